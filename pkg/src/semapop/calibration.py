"""Post-hoc marginal calibration by damped raking.

Generated agents are kept fixed and reweighted so that selected weighted
marginals approach target distributions.  Numerical attributes are treated as
categorical over the evaluation bins.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from semapop import metrics
from semapop.marginal import MarginalSpec, assign_bins
from semapop.population import Population

logger = logging.getLogger(__name__)

DEFAULT_LEVELS = (0, 5, 10, 20, 40)
DEFAULT_CONSTRAINED = (
    "Age",
    "Income_class",
    "Household_Type",
    "Number_of_cars_of_household",
    "Trips_of_PublicTransport",
)
RATIO_EPS = 1e-9
SWEEP_COLUMNS = ("level", "iterations", "srmse_m_weighted", "srmse_b_weighted", "ess")


@dataclass
class CalibrationTargets:
    """Target distributions keyed by attribute, applied in declaration order."""

    targets: dict[str, np.ndarray]
    order: list[str]

    def __post_init__(self):
        self.targets = {k: np.asarray(v, dtype=np.float64) for k, v in self.targets.items()}
        if set(self.order) != set(self.targets):
            raise ValueError("attribute order must list exactly the targeted attributes")
        for name, p in self.targets.items():
            if np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
                raise ValueError(f"target for {name} must be non-negative and sum to 1")

    @classmethod
    def load(cls, path: str | Path) -> CalibrationTargets:
        doc = json.loads(Path(path).read_text())
        order = doc.get("order") or list(doc["targets"])
        return cls(doc["targets"], order)

    def save(self, path: str | Path) -> None:
        doc = {"order": self.order, "targets": {k: self.targets[k].tolist() for k in self.order}}
        Path(path).write_text(json.dumps(doc, indent=2))

    @classmethod
    def from_reference(cls, ref: Population, spec: MarginalSpec, attributes) -> CalibrationTargets:
        """Targets equal to the (hard-binned) marginals of a reference population."""
        targets = {}
        for name in attributes:
            codes, size = attribute_codes(ref, name, spec)
            targets[name] = np.bincount(codes, minlength=size) / ref.n
        return cls(targets, list(attributes))


def attribute_codes(pop: Population, name: str, spec: MarginalSpec | None) -> tuple[np.ndarray, int]:
    s = pop.schema[name]
    if s.is_categorical:
        return pop.category_codes(name), len(s.categories)
    if spec is None:
        raise ValueError(f"numerical attribute {name} needs a MarginalSpec for binning")
    centers = spec[name].centers
    return assign_bins(pop.frame[name].to_numpy(dtype=np.float64), centers), len(centers)


def weighted_marginal(pop: Population, w, attr: str, spec: MarginalSpec | None = None) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (pop.n,):
        raise ValueError(f"{w.shape[0]} weights for {pop.n} agents")
    codes, size = attribute_codes(pop, attr, spec)
    return np.bincount(codes, weights=w, minlength=size)


def rake(
    pop: Population,
    targets: CalibrationTargets,
    iterations: int,
    damping: float = 1.0,
    eps: float = RATIO_EPS,
    spec: MarginalSpec | None = None,
) -> np.ndarray:
    """Multiplicative raking starting from uniform weights.

    Every iteration visits the constrained attributes in order and applies
    ``w_i <- w_i * r_j(x_ij) ** damping`` with
    ``r_j(k) = (p*_j(k) + eps) / (p_w,j(k) + eps)``, renormalizing after each
    attribute.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if not 0 <= damping <= 1:
        raise ValueError("damping must lie in [0, 1]")
    w = np.full(pop.n, 1.0 / pop.n)
    coded = []
    for name in targets.order:
        codes, size = attribute_codes(pop, name, spec)
        target = targets.targets[name]
        if target.shape != (size,):
            raise ValueError(f"target for {name} has {target.shape[0]} entries, expected {size}")
        present = np.bincount(codes, minlength=size) > 0
        if np.any(~present & (target > 0)):
            logger.warning("%s: target mass on categories absent from the population", name)
        coded.append((codes, size, target))
    for _ in range(iterations):
        for codes, size, target in coded:
            current = np.bincount(codes, weights=w, minlength=size)
            ratio = (target + eps) / (current + eps)
            w = w * ratio[codes] ** damping
            w = w / w.sum()
    return w


def calibration_sweep(
    gen: Population,
    targets: CalibrationTargets,
    levels=DEFAULT_LEVELS,
    spec: MarginalSpec | None = None,
    ref: Population | None = None,
    damping: float = 1.0,
) -> list[dict]:
    """Rake at every level and report weighted SRMSE-M/-B and ESS."""
    levels = list(levels)
    if levels != sorted(levels) or 0 not in levels:
        raise ValueError("levels must be sorted ascending and include 0")
    rows = []
    for i, iterations in enumerate(levels):
        w = rake(gen, targets, iterations, damping=damping, spec=spec)
        rows.append(
            {
                "level": f"L{i}",
                "iterations": iterations,
                "srmse_m_weighted": metrics.srmse_m(gen, ref, spec, gen_weights=w),
                "srmse_b_weighted": metrics.srmse_b(gen, ref, spec, gen_weights=w),
                "ess": metrics.ess(w),
            }
        )
    return rows


def write_sweep(rows: list[dict], path: str | Path, order: list[str] | None = None) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    path.with_suffix(".json").write_text(json.dumps({"attribute_order": order, "pair_weighting": "global", "rows": rows}, indent=2))
