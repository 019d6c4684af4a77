import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fitted, mixed_schema, random_mixed_population
from semapop.population import (
    Population,
    PopulationError,
    decode,
    encode,
    load_population,
    round_half_away,
    split,
    stratified_sample,
    write_population,
)
from semapop.schema import AttributeSchema, AttributeSpec


def _two_rows():
    return pd.DataFrame({"Color": ["red", "blue"], "Owner": ["yes", "no"], "Trips": [1, 0], "Score": [2.5, 3.0]})


def test_two_row_csv(tmp_path):
    path = tmp_path / "pop.csv"
    _two_rows().to_csv(path, index=False)
    pop = load_population(path, mixed_schema())
    assert pop.n == 2
    assert pop.frame["Trips"].dtype == np.int64


def test_unknown_category_names_row_column_value():
    frame = _two_rows()
    frame.loc[1, "Owner"] = "Maybe"
    with pytest.raises(PopulationError) as err:
        Population(frame, mixed_schema())
    msg = str(err.value)
    assert "row 1" in msg and "Owner" in msg and "Maybe" in msg


def test_missing_column_and_non_numeric():
    with pytest.raises(PopulationError, match="missing"):
        Population(_two_rows().drop(columns="Score"), mixed_schema())
    frame = _two_rows().astype({"Score": object})
    frame.loc[0, "Score"] = "abc"
    with pytest.raises(PopulationError, match="row 0, column Score"):
        Population(frame, mixed_schema())
    frame = _two_rows().astype({"Trips": float})
    frame.loc[0, "Trips"] = 1.5
    with pytest.raises(PopulationError, match="integer"):
        Population(frame, mixed_schema())


def test_write_load_roundtrip(tmp_path):
    pop = random_mixed_population(50, 3)
    write_population(pop, tmp_path / "p.csv")
    back = load_population(tmp_path / "p.csv", pop.schema)
    assert back.equals(pop)


def test_encode_one_hot_and_standardize():
    pop = fitted(Population(_two_rows(), mixed_schema()))
    X = encode(pop)
    assert X.shape == (2, 3 + 2 + 1 + 1)
    # blue is the third category of three
    np.testing.assert_array_equal(X[1, :3], [0, 0, 1])
    np.testing.assert_array_equal(X[0, :3], [1, 0, 0])
    # two rows symmetric around the mean → ±1
    np.testing.assert_allclose(X[:, 5], [1.0, -1.0])


def test_encode_mean_is_zero():
    schema = AttributeSchema((AttributeSpec("x", "numerical", "behavioral", mean=4.0, std=2.0),))
    pop = Population(pd.DataFrame({"x": [4.0]}), schema)
    assert encode(pop)[0, 0] == 0.0


def test_encode_unfitted_rejected():
    with pytest.raises(PopulationError, match="not fitted"):
        encode(Population(_two_rows(), mixed_schema()))


def test_decode_argmax_and_ties():
    schema = AttributeSchema((AttributeSpec("c", "categorical", "demographic", ("a", "b", "c")),))
    assert decode([[0.1, 0.7, 0.2]], schema).frame["c"][0] == "b"
    schema2 = AttributeSchema((AttributeSpec("c", "categorical", "demographic", ("a", "b")),))
    assert decode([[0.5, 0.5]], schema2).frame["c"][0] == "a"


def test_decode_inverse_standardization():
    schema = AttributeSchema((AttributeSpec("n", "numerical", "behavioral", integer_valued=True, mean=10.0, std=2.0),))
    assert decode([[1.0]], schema).frame["n"][0] == 12


def test_decode_rejects_non_finite():
    schema = AttributeSchema((AttributeSpec("n", "numerical", "behavioral", mean=0.0, std=1.0),))
    with pytest.raises(PopulationError, match="non-finite"):
        decode([[np.nan]], schema)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 60), seed=st.integers(0, 10_000))
def test_encode_decode_roundtrip(n, seed):
    pop = random_mixed_population(n, seed)
    back = decode(encode(pop), pop.schema)
    for name in ["Color", "Owner", "Trips"]:
        assert (back.frame[name] == pop.frame[name]).all()
    np.testing.assert_allclose(back.frame["Score"], pop.frame["Score"], rtol=0, atol=1e-9)


@pytest.mark.parametrize("x,expected", [(0.5, 1), (1.5, 2), (2.5, 3), (-0.5, -1), (0.49, 0), (2.0, 2)])
def test_round_half_away(x, expected):
    assert round_half_away(x) == expected


def _strata_pop(sizes):
    labels = [lab for lab, k in zip(["red", "green", "blue"], sizes) for _ in range(k)]
    frame = pd.DataFrame({"Color": labels, "Owner": "yes", "Trips": 0, "Score": 1.0})
    return Population(frame, mixed_schema())


def test_stratified_sizes():
    pop = _strata_pop([10, 5])
    out = stratified_sample(pop, "Color", 0.2, seed=0)
    counts = out.frame["Color"].value_counts().to_dict()
    assert counts == {"red": 2, "green": 1}


def test_stratified_identity_fraction():
    pop = random_mixed_population(40, 1)
    out = stratified_sample(pop, "Color", 1.0, seed=5)
    key = lambda f: sorted(map(tuple, f.astype(str).to_numpy().tolist()))
    assert key(out.frame) == key(pop.frame)


def test_stratified_deterministic_and_validates():
    pop = random_mixed_population(200, 2)
    a = stratified_sample(pop, "Color", 0.3, seed=9)
    b = stratified_sample(pop, "Color", 0.3, seed=9)
    assert a.equals(b)
    with pytest.raises(ValueError):
        stratified_sample(pop, "Color", 0.0, seed=0)
    with pytest.raises(ValueError):
        stratified_sample(pop, "Trips", 0.5, seed=0)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(3, 200), seed=st.integers(0, 1000))
def test_split_partitions(n, seed):
    pop = random_mixed_population(n, 0)
    pop = Population(pop.frame.assign(Trips=np.arange(n)), pop.schema)
    parts = split(pop, (0.8, 0.1, 0.1), seed)
    ids = np.concatenate([p.frame["Trips"].to_numpy() for p in parts])
    assert sorted(ids.tolist()) == list(range(n))
    assert parts[0].n == round_half_away(0.8 * n)


def test_split_rejects_bad_fractions():
    pop = random_mixed_population(10, 0)
    with pytest.raises(ValueError):
        split(pop, (0.5, 0.2, 0.2), 0)
