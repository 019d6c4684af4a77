import numpy as np
import pytest

from semapop.toy import ToyJointSpec, default_toy_spec, make_toy_population


def test_fair_binary_marginal():
    spec = {"nodes": [{"name": "A", "values": ["0", "1"], "probs": [0.5, 0.5]}]}
    pop = make_toy_population(spec, 10_000, 0)
    freq = pop.frame["A"].value_counts(normalize=True)
    assert abs(freq["0"] - 0.5) < 0.02 and abs(freq["1"] - 0.5) < 0.02


def test_deterministic_copy():
    spec = {
        "nodes": [
            {"name": "A", "values": ["x", "y"], "probs": [0.3, 0.7]},
            {"name": "B", "values": ["x", "y"], "parents": ["A"], "cpt": {"x": [1, 0], "y": [0, 1]}},
        ]
    }
    pop = make_toy_population(spec, 2000, 1)
    assert (pop.frame["A"] == pop.frame["B"]).all()


def _chain():
    return ToyJointSpec(
        {
            "nodes": [
                {"name": "A", "values": ["a0", "a1"], "probs": [0.3, 0.7]},
                {"name": "B", "values": ["b0", "b1", "b2"], "parents": ["A"], "cpt": {"a0": [0.6, 0.3, 0.1], "a1": [0.1, 0.2, 0.7]}},
                {"name": "C", "kind": "numerical", "values": [0, 1], "parents": ["B"],
                 "cpt": {"b0": [0.9, 0.1], "b1": [0.5, 0.5], "b2": [0.2, 0.8]}},
            ]
        }
    )


def test_chain_bivariate_tables():
    spec = _chain()
    pop = make_toy_population(spec, 20_000, 2)
    frame = pop.frame.astype(str)
    for a, b in [("A", "B"), ("B", "C"), ("A", "C")]:
        analytic = spec.pair_table(a, b)
        for (va, vb), p in analytic.items():
            emp = ((frame[a] == str(va)) & (frame[b] == str(vb))).mean()
            assert abs(emp - p) < 0.02, (a, b, va, vb)


def test_joint_sums_to_one_and_matches_hand_value():
    spec = _chain()
    outcomes, probs = spec.joint()
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert probs[outcomes.index(("a1", "b2", 1))] == pytest.approx(0.7 * 0.7 * 0.8)
    assert spec.marginal("A") == pytest.approx({"a0": 0.3, "a1": 0.7})


def test_schema_kinds():
    schema = default_toy_spec().schema()
    assert [s.kind for s in schema] == ["categorical"] * 3 + ["numerical"] * 2
    assert schema["PT_Trips"].integer_valued


@pytest.mark.parametrize(
    "doc",
    [
        {"nodes": [{"name": "A", "values": ["x"], "probs": [0.5]}]},
        {"nodes": [{"name": "B", "values": ["x", "y"], "parents": ["A"], "cpt": {}}]},
        {"nodes": [{"name": "A", "values": ["x", "y"], "probs": [0.5, 0.6]}]},
    ],
)
def test_invalid_specs(doc):
    with pytest.raises(ValueError):
        ToyJointSpec(doc)


def test_same_seed_same_table():
    a = make_toy_population(default_toy_spec(), 300, 4)
    b = make_toy_population(default_toy_spec(), 300, 4)
    assert a.equals(b)
    assert not a.equals(make_toy_population(default_toy_spec(), 300, 5))
