"""Population-level evaluation metrics.

SRMSE over univariate (SRMSE-M) and bivariate (SRMSE-B) distributions,
precision/recall/F1 over discretized attribute tuples, and the effective
sample size of a weight vector.  Numerical attributes are discretized by
nearest bin center from a :class:`~semapop.marginal.MarginalSpec`, so every
metric shares one discretization.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from semapop.marginal import MarginalSpec, assign_bins
from semapop.population import Population


def srmse(p_hat, p) -> float:
    p_hat = np.asarray(p_hat, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if p_hat.shape != p.shape or p.size < 1:
        raise ValueError(f"support mismatch: {p_hat.shape} vs {p.shape}")
    for v in (p_hat, p):
        if abs(v.sum() - 1) > 1e-6:
            raise ValueError("distributions must sum to 1")
    denom = p.mean()
    if denom == 0:
        raise ValueError("zero denominator")
    return float(np.sqrt(np.mean((p_hat - p) ** 2)) / denom)


def discretize(pop: Population, spec: MarginalSpec, names=None) -> tuple[np.ndarray, list[int]]:
    """Integer code matrix (rows x attributes) and the support size of each column."""
    schema = pop.schema
    names = list(names or schema.names)
    codes = np.empty((pop.n, len(names)), dtype=np.int64)
    sizes = []
    for j, name in enumerate(names):
        s = schema[name]
        if s.is_categorical:
            codes[:, j] = pop.category_codes(name)
            sizes.append(len(s.categories))
        else:
            centers = spec[name].centers
            codes[:, j] = assign_bins(pop.frame[name].to_numpy(dtype=np.float64), centers)
            sizes.append(len(centers))
    return codes, sizes


def _normalize(w, n: int) -> np.ndarray:
    if w is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"weights of length {w.shape} do not match {n} rows")
    return w / w.sum()


def _hist(codes: np.ndarray, size: int, w: np.ndarray) -> np.ndarray:
    return np.bincount(codes, weights=w, minlength=size)


def _check_same_schema(gen: Population, ref: Population) -> None:
    if gen.schema.structure_hash() != ref.schema.structure_hash():
        raise ValueError("generated and reference populations use different schemas")


def univariate_srmse(gen: Population, ref: Population, spec: MarginalSpec, gen_weights=None) -> dict[str, float]:
    _check_same_schema(gen, ref)
    gc, sizes = discretize(gen, spec)
    rc, _ = discretize(ref, spec)
    wg, wr = _normalize(gen_weights, gen.n), _normalize(None, ref.n)
    return {
        name: srmse(_hist(gc[:, j], sizes[j], wg), _hist(rc[:, j], sizes[j], wr))
        for j, name in enumerate(gen.schema.names)
    }


def bivariate_srmse(gen: Population, ref: Population, spec: MarginalSpec, gen_weights=None) -> dict[tuple[str, str], float]:
    _check_same_schema(gen, ref)
    names = gen.schema.names
    if len(names) < 2:
        raise ValueError("SRMSE-B needs at least 2 variables")
    gc, sizes = discretize(gen, spec)
    rc, _ = discretize(ref, spec)
    wg, wr = _normalize(gen_weights, gen.n), _normalize(None, ref.n)
    out = {}
    for a, b in itertools.combinations(range(len(names)), 2):
        size = sizes[a] * sizes[b]
        pg = _hist(gc[:, a] * sizes[b] + gc[:, b], size, wg)
        pr = _hist(rc[:, a] * sizes[b] + rc[:, b], size, wr)
        out[(names[a], names[b])] = srmse(pg, pr)
    return out


def srmse_m(gen: Population, ref: Population, spec: MarginalSpec, gen_weights=None) -> float:
    per_var = univariate_srmse(gen, ref, spec, gen_weights)
    return float(np.mean(list(per_var.values())))


def srmse_b(gen: Population, ref: Population, spec: MarginalSpec, gen_weights=None) -> float:
    per_pair = bivariate_srmse(gen, ref, spec, gen_weights)
    return float(np.mean(list(per_pair.values())))


def precision_recall_f1(gen: Population, ref: Population, spec: MarginalSpec, attributes=None) -> tuple[float, float, float]:
    """Tuple-membership precision and recall, in percent."""
    _check_same_schema(gen, ref)
    if gen.n == 0 or ref.n == 0:
        raise ValueError("precision/recall need non-empty populations")
    gc, _ = discretize(gen, spec, attributes)
    rc, _ = discretize(ref, spec, attributes)
    gen_keys = [row.tobytes() for row in gc]
    ref_keys = [row.tobytes() for row in rc]
    gen_set, ref_set = set(gen_keys), set(ref_keys)
    precision = 100.0 * sum(k in ref_set for k in gen_keys) / len(gen_keys)
    recall = 100.0 * sum(k in gen_set for k in ref_keys) / len(ref_keys)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def ess(weights) -> float:
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
        raise ValueError("ESS expects non-negative weights summing to 1")
    if np.all(w == w[0]):
        # uniform weights: exactly n, free of summation round-off
        return float(w.size)
    return float(1.0 / np.sum(w**2))


@dataclass
class MetricReport:
    srmse_m: float
    srmse_b: float
    precision: float
    recall: float
    f1: float
    ess: float | None = None
    per_variable: dict[str, float] = field(default_factory=dict)
    per_pair: dict[str, float] = field(default_factory=dict)

    SUMMARY = ("srmse_m", "srmse_b", "precision", "recall", "f1", "ess")

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in self.SUMMARY}

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_csv_row(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.SUMMARY)
        writer.writerow(["" if v is None else repr(float(v)) for v in self.summary().values()])
        if path is not None:
            Path(path).write_text(buf.getvalue())
        return buf.getvalue()


def evaluate(gen: Population, ref: Population, spec: MarginalSpec, weights=None, attributes=None) -> MetricReport:
    per_var = univariate_srmse(gen, ref, spec, weights)
    per_pair = bivariate_srmse(gen, ref, spec, weights) if len(gen.schema) >= 2 else {}
    precision, recall, f1 = precision_recall_f1(gen, ref, spec, attributes)
    return MetricReport(
        srmse_m=float(np.mean(list(per_var.values()))),
        srmse_b=float(np.mean(list(per_pair.values()))) if per_pair else float("nan"),
        precision=precision,
        recall=recall,
        f1=f1,
        ess=None if weights is None else ess(_normalize(weights, gen.n)),
        per_variable=per_var,
        per_pair={f"{a}|{b}": v for (a, b), v in per_pair.items()},
    )
