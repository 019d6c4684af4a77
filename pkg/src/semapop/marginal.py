"""Differentiable univariate marginal estimators and the marginal loss.

Categorical marginals are column means of (soft) one-hot blocks.  Numerical
marginals use a Gaussian-kernel soft histogram over fixed, data-adaptive bin
centers.  Bin centers are stored in raw attribute units and mapped into the
standardized space whenever they are applied to encoded batches.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from semapop.schema import AttributeSchema

SIMPLEX_TOL = 1e-5
DEFAULT_BINS = 10
DEFAULT_EPS = 1e-8


@dataclass
class VariableMarginal:
    name: str
    kind: str
    probs: np.ndarray
    centers: np.ndarray | None = None
    sigma: float | None = None
    weight: float = 1.0

    @property
    def support(self) -> int:
        return len(self.probs)

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "probs": self.probs.tolist(), "weight": self.weight}
        if self.centers is not None:
            d["centers"] = self.centers.tolist()
            d["sigma"] = self.sigma
        return d

    @classmethod
    def from_dict(cls, d: dict) -> VariableMarginal:
        centers = d.get("centers")
        return cls(
            d["name"],
            d["kind"],
            np.asarray(d["probs"], dtype=np.float64),
            None if centers is None else np.asarray(centers, dtype=np.float64),
            d.get("sigma"),
            d.get("weight", 1.0),
        )


@dataclass
class MarginalSpec:
    variables: list[VariableMarginal]

    def __post_init__(self):
        for v in self.variables:
            if np.any(v.probs < 0) or abs(v.probs.sum() - 1) > 1e-9:
                raise ValueError(f"{v.name}: reference probabilities must be non-negative and sum to 1")
            if v.centers is not None:
                if np.any(np.diff(v.centers) <= 0):
                    raise ValueError(f"{v.name}: bin centers must be strictly increasing")
                if not v.sigma or v.sigma <= 0:
                    raise ValueError(f"{v.name}: bandwidth must be positive")

    def __getitem__(self, name: str) -> VariableMarginal:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    def to_dict(self) -> dict:
        return {"variables": [v.to_dict() for v in self.variables]}

    @classmethod
    def from_dict(cls, d: dict) -> MarginalSpec:
        return cls([VariableMarginal.from_dict(v) for v in d["variables"]])


def categorical_marginal(soft_block):
    """Column mean of a ``B x K`` block of simplex rows."""
    block = torch.as_tensor(soft_block)
    sums = block.sum(dim=1)
    if torch.any(block < -SIMPLEX_TOL) or torch.any((sums - 1).abs() > SIMPLEX_TOL):
        raise ValueError("categorical block rows must lie on the probability simplex")
    return block.mean(dim=0)


def fit_bins(values, K: int = DEFAULT_BINS) -> tuple[np.ndarray, float]:
    """Bin centers at the midpoints of ``K`` equal-mass quantile intervals.

    Coinciding centers are merged (reducing ``K`` with a warning).  The
    bandwidth is half the mean spacing between adjacent centers.
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0 or np.all(x == x.flat[0]):
        raise ValueError("degenerate continuous variable")
    edges = np.quantile(x, np.linspace(0.0, 1.0, K + 1))
    centers = 0.5 * (edges[:-1] + edges[1:])
    unique = np.unique(centers)
    if len(unique) < K:
        warnings.warn(f"collapsed {K - len(unique)} duplicate bin centers (K={len(unique)})", stacklevel=2)
    if len(unique) < 2:
        raise ValueError("degenerate continuous variable")
    sigma = 0.5 * float(np.mean(np.diff(unique)))
    return unique, sigma


def soft_histogram(values, centers, sigma):
    """Batch-averaged softmax over ``-(x - c_k)^2 / (2 sigma^2)``."""
    x = torch.as_tensor(values)
    c = torch.as_tensor(centers, dtype=x.dtype if x.is_floating_point() else torch.float64)
    x = x.to(c.dtype)
    logits = -((x.reshape(-1, 1) - c.reshape(1, -1)) ** 2) / (2.0 * sigma**2)
    return torch.softmax(logits, dim=1).mean(dim=0)


def assign_bins(values, centers) -> np.ndarray:
    """Hard nearest-center bin index; equidistant values go to the lower bin."""
    x = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    d = np.abs(x - np.asarray(centers, dtype=np.float64).reshape(1, -1))
    return np.argmin(d, axis=1)


def build_marginal_spec(train, schema: AttributeSchema | None = None, K: int = DEFAULT_BINS) -> MarginalSpec:
    """Reference marginals from a training population.

    Categorical references are category frequencies; numerical references are
    the soft histogram of the training values over bins fitted on them.
    """
    schema = schema or train.schema
    out = []
    for s in schema:
        col = train.frame[s.name]
        if s.is_categorical:
            counts = np.bincount(train.category_codes(s.name), minlength=len(s.categories))
            out.append(VariableMarginal(s.name, "categorical", counts / counts.sum()))
        else:
            x = col.to_numpy(dtype=np.float64)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                centers, sigma = fit_bins(x, K)
            probs = soft_histogram(torch.as_tensor(x), centers, sigma).numpy()
            probs = probs / probs.sum()
            out.append(VariableMarginal(s.name, "numerical", probs, centers, sigma))
    return MarginalSpec(out)


def marginal_terms(gen_batch, spec: MarginalSpec, schema: AttributeSchema, eps: float = DEFAULT_EPS):
    """Categorical and numerical parts of the marginal loss.

    Each variable contributes ``w_j * sqrt(sum_k (p_hat_k - p_k)^2 + eps)``;
    both parts are divided by the total number of variables, so their sum is
    the aggregate marginal loss.
    """
    x = torch.as_tensor(gen_batch)
    cat = x.new_zeros(())
    cont = x.new_zeros(())
    n_vars = len(schema)
    for s, sl in schema.blocks():
        ref = spec[s.name]
        p = torch.as_tensor(ref.probs, dtype=x.dtype)
        if s.is_categorical:
            p_hat = x[:, sl].mean(dim=0)
        else:
            centers = (torch.as_tensor(ref.centers, dtype=x.dtype) - s.mean) / s.std
            p_hat = soft_histogram(x[:, sl.start], centers, ref.sigma / s.std)
        if p_hat.shape != p.shape:
            raise ValueError(f"{s.name}: support size {p_hat.shape[0]} != reference {p.shape[0]}")
        term = ref.weight * torch.sqrt(((p_hat - p) ** 2).sum() + eps)
        if s.is_categorical:
            cat = cat + term
        else:
            cont = cont + term
    return cat / n_vars, cont / n_vars


def marginal_loss(gen_batch, spec: MarginalSpec, schema: AttributeSchema, eps: float = DEFAULT_EPS):
    cat, cont = marginal_terms(gen_batch, spec, schema, eps)
    return cat + cont
