"""Toy populations drawn from a small discrete Bayesian network.

The network is given as a JSON-like dict::

    {"nodes": [
        {"name": "Region", "kind": "categorical", "values": ["U", "R"],
         "parents": [], "probs": [0.6, 0.4]},
        {"name": "Cars", "kind": "numerical", "values": [0, 1, 2],
         "parents": ["Region"], "cpt": {"U": [0.5, 0.4, 0.1], "R": [0.2, 0.5, 0.3]}}
    ]}

Nodes are listed in topological order.  CPT keys join the parent values with
``"|"``.  Because every node is discrete the joint distribution is available
exactly, which is what the tests compare sampled tables against.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from semapop.embeddings import EmbeddingMatrix
from semapop.population import Population
from semapop.schema import AttributeSchema, AttributeSpec

PROB_TOL = 1e-9


@dataclass(frozen=True)
class ToyNode:
    name: str
    kind: str
    values: tuple
    parents: tuple[str, ...]
    table: dict  # parent-key -> probability vector
    group: str = "demographic"


class ToyJointSpec:
    def __init__(self, doc: dict):
        self.nodes: list[ToyNode] = []
        seen: dict[str, ToyNode] = {}
        for item in doc["nodes"]:
            parents = tuple(item.get("parents", ()))
            for p in parents:
                if p not in seen:
                    raise ValueError(f"{item['name']}: parent {p!r} must be declared earlier")
            values = tuple(item["values"])
            if parents:
                table = {k: np.asarray(v, dtype=np.float64) for k, v in item["cpt"].items()}
                expected = {"|".join(map(str, combo)) for combo in itertools.product(*(seen[p].values for p in parents))}
                if set(table) != expected:
                    raise ValueError(f"{item['name']}: CPT keys {sorted(table)} != {sorted(expected)}")
            else:
                table = {"": np.asarray(item["probs"], dtype=np.float64)}
            for key, probs in table.items():
                if probs.shape != (len(values),) or np.any(probs < 0) or abs(probs.sum() - 1) > PROB_TOL:
                    raise ValueError(f"{item['name']}[{key}]: invalid probability row {probs.tolist()}")
            kind = item.get("kind", "categorical")
            group = item.get("group", "behavioral" if kind == "numerical" else "demographic")
            node = ToyNode(item["name"], kind, values, parents, table, group)
            self.nodes.append(node)
            seen[node.name] = node
        self._by_name = seen
        self.doc = doc

    @property
    def names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def schema(self) -> AttributeSchema:
        specs = []
        for n in self.nodes:
            if n.kind == "categorical":
                specs.append(AttributeSpec(n.name, "categorical", n.group, tuple(str(v) for v in n.values)))
            else:
                integer = all(float(v) == int(v) for v in n.values)
                specs.append(AttributeSpec(n.name, "numerical", n.group, integer_valued=integer))
        return AttributeSchema(tuple(specs))

    def joint(self) -> tuple[list[tuple], np.ndarray]:
        """Enumerate every outcome of the network with its exact probability."""
        outcomes, probs = [], []
        for combo in itertools.product(*(range(len(n.values)) for n in self.nodes)):
            p = 1.0
            assignment = {}
            for node, k in zip(self.nodes, combo):
                key = "|".join(str(assignment[q]) for q in node.parents)
                p *= node.table[key][k]
                assignment[node.name] = node.values[k]
            outcomes.append(tuple(assignment[n] for n in self.names))
            probs.append(p)
        return outcomes, np.asarray(probs)

    def marginal(self, name: str) -> dict:
        outcomes, probs = self.joint()
        j = self.names.index(name)
        out = {v: 0.0 for v in self._by_name[name].values}
        for o, p in zip(outcomes, probs):
            out[o[j]] += p
        return out

    def pair_table(self, a: str, b: str) -> dict:
        outcomes, probs = self.joint()
        ia, ib = self.names.index(a), self.names.index(b)
        out = {(va, vb): 0.0 for va in self._by_name[a].values for vb in self._by_name[b].values}
        for o, p in zip(outcomes, probs):
            out[(o[ia], o[ib])] += p
        return out


def make_toy_population(spec: ToyJointSpec | dict, n: int, seed: int) -> Population:
    """Draw ``n`` i.i.d. agents by ancestral sampling."""
    if not isinstance(spec, ToyJointSpec):
        spec = ToyJointSpec(spec)
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    cols: dict[str, np.ndarray] = {}
    for node in spec.nodes:
        if node.parents:
            keys = ["|".join(parts) for parts in zip(*(cols[p].astype(str) for p in node.parents))]
        else:
            keys = [""] * n
        u = rng.random(n)
        idx = np.empty(n, dtype=np.int64)
        keys = np.asarray(keys, dtype=object)
        for key, probs in node.table.items():
            mask = keys == key
            cdf = np.cumsum(probs)
            cdf[-1] = 1.0
            idx[mask] = np.searchsorted(cdf, u[mask], side="right")
        cols[node.name] = np.asarray(node.values, dtype=object)[idx]
    return Population(pd.DataFrame(cols, columns=spec.names), spec.schema())


def _truncated_poisson(lam: float, support: int) -> list[float]:
    w = [math.exp(-lam) * lam**k / math.factorial(k) for k in range(support)]
    total = sum(w)
    return [x / total for x in w]


def default_toy_spec() -> ToyJointSpec:
    """Five-attribute network: three categorical, two integer counts.

    ``PT_Trips`` depends on region and car ownership and is the count used for
    counterfactual experiments.
    """
    regions = ["Urban", "Suburban", "Rural"]
    cars = [0, 1, 2, 3]
    car_cpt = {"Urban": [0.40, 0.40, 0.15, 0.05], "Suburban": [0.15, 0.45, 0.30, 0.10], "Rural": [0.05, 0.35, 0.40, 0.20]}
    region_rate = {"Urban": 2.2, "Suburban": 1.2, "Rural": 0.5}
    pt_cpt = {}
    for r in regions:
        for c in cars:
            lam = region_rate[r] / (1.0 + c)
            zero_mass = 0.15 + 0.15 * c
            body = _truncated_poisson(lam, 6)
            row = [zero_mass + (1 - zero_mass) * body[0]] + [(1 - zero_mass) * b for b in body[1:]]
            total = sum(row)
            pt_cpt[f"{r}|{c}"] = [x / total for x in row]
    return ToyJointSpec(
        {
            "nodes": [
                {"name": "Region", "kind": "categorical", "values": regions, "parents": [], "probs": [0.45, 0.35, 0.20]},
                {"name": "Gender", "kind": "categorical", "values": ["Female", "Male"], "parents": [], "probs": [0.5, 0.5]},
                {
                    "name": "Employment",
                    "kind": "categorical",
                    "values": ["Employed", "NotEmployed"],
                    "parents": ["Region"],
                    "cpt": {"Urban": [0.75, 0.25], "Suburban": [0.70, 0.30], "Rural": [0.60, 0.40]},
                },
                {"name": "Cars", "kind": "numerical", "values": cars, "parents": ["Region"], "cpt": car_cpt, "group": "household"},
                {
                    "name": "PT_Trips",
                    "kind": "numerical",
                    "values": list(range(6)),
                    "parents": ["Region", "Cars"],
                    "cpt": pt_cpt,
                    "group": "behavioral",
                },
            ]
        }
    )


def planted_embeddings(values, dim: int, strength: float, seed: int) -> tuple[EmbeddingMatrix, np.ndarray]:
    """Isotropic unit-variance noise plus ``strength * v_i * u`` along a random unit axis ``u``.

    ``values`` are used as given (standardize them first for a scale-free
    signal).  Returns the embeddings and ``u``.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(dim)
    u /= np.linalg.norm(u)
    E = rng.standard_normal((v.size, dim)) + strength * v[:, None] * u[None, :]
    return EmbeddingMatrix(E, "mock"), u
