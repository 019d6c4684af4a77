"""Semantic and text-level interventions on trained generators.

Semantic edits move persona embeddings along a probe direction while the
generator noise stays fixed (same-z), so every change in the output is caused
by the edit alone.  Text edits rewrite the persona, re-embed it, and compare
generations under the same fixed noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd
import torch

from semapop.checkpoint import ModelCheckpoint
from semapop.embeddings import EmbeddingMatrix
from semapop.gan import draw_noise, generate_encoded, model_from_checkpoint
from semapop.population import Population, decode, round_half_away
from semapop.vae import draw_latent_noise, generate_vae_encoded, vae_from_checkpoint

DEFAULT_ALPHAS = (-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5)
SIGMA_FLOOR = 1e-8
PROBE_TOL = 1e-6
PERCENTILE_METHOD = "weibull"


@dataclass
class EmbeddingStandardizer:
    mu: np.ndarray
    sigma: np.ndarray

    def transform(self, E) -> np.ndarray:
        E = np.asarray(getattr(E, "matrix", E), dtype=np.float64)
        if E.shape[-1] != self.mu.shape[0]:
            raise ValueError(f"embedding dim {E.shape[-1]} != standardizer dim {self.mu.shape[0]}")
        return (E - self.mu) / self.sigma

    def inverse(self, E_std) -> np.ndarray:
        return np.asarray(E_std, dtype=np.float64) * self.sigma + self.mu


def standardize_embeddings(E_train) -> tuple[EmbeddingStandardizer, np.ndarray]:
    """Column-wise standardization fitted on training rows (population std, floored)."""
    E = np.asarray(getattr(E_train, "matrix", E_train), dtype=np.float64)
    if E.ndim != 2 or E.shape[0] < 2:
        raise ValueError("standardization needs at least 2 embedding rows")
    st = EmbeddingStandardizer(E.mean(axis=0), np.maximum(E.std(axis=0), SIGMA_FLOOR))
    return st, st.transform(E)


@dataclass
class InterventionDirection:
    d: np.ndarray
    probe_lambda: float = 1.0
    target_label_def: str = ""
    intercept: float = 0.0

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        if abs(np.linalg.norm(self.d) - 1.0) > 1e-9:
            raise ValueError("intervention direction must have unit norm")


def fit_direction(
    E_std,
    y,
    lam: float = 1.0,
    target_label_def: str = "",
    tol: float = PROBE_TOL,
    max_iter: int = 100,
) -> InterventionDirection:
    """L2-penalized logistic probe solved by damped Newton steps.

    Minimizes ``sum_i log(1 + exp(-s_i (w . e_i + b))) + lam * ||w||^2`` with
    ``s_i = 2 y_i - 1``; the intercept ``b`` is not penalized.  Iterates until
    the gradient norm drops below ``tol``.
    """
    X = np.asarray(E_std, dtype=np.float64)
    y = np.asarray(y).astype(np.float64).ravel()
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("probe labels must be binary")
    if y.min() == y.max():
        raise ValueError("probe labels must contain both classes")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    n, dim = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    penalty = np.full(dim + 1, 2.0 * lam)
    penalty[-1] = 0.0
    theta = np.zeros(dim + 1)

    def objective(t):
        m = A @ t
        return np.sum(np.logaddexp(0.0, m) - y * m) + lam * t[:-1] @ t[:-1]

    for _ in range(max_iter):
        p = 1.0 / (1.0 + np.exp(-(A @ theta)))
        grad = A.T @ (p - y) + penalty * theta
        if np.linalg.norm(grad) < tol:
            break
        H = (A * (p * (1 - p))[:, None]).T @ A + np.diag(penalty)
        step = np.linalg.solve(H + 1e-12 * np.eye(dim + 1), grad)
        f0, t = objective(theta), 1.0
        while objective(theta - t * step) > f0 - 1e-4 * t * grad @ step and t > 1e-10:
            t *= 0.5
        theta = theta - t * step
    else:
        raise RuntimeError(f"probe did not converge (gradient norm {np.linalg.norm(grad):.2e})")
    w = theta[:-1]
    norm = np.linalg.norm(w)
    if norm == 0:
        raise RuntimeError("probe weights are zero")
    return InterventionDirection(w / norm, lam, target_label_def, float(theta[-1]))


def edit_embedding(e0, direction: InterventionDirection | np.ndarray, alpha: float) -> np.ndarray:
    """``e0 + alpha * d``, with no projection or renormalization."""
    d = direction.d if isinstance(direction, InterventionDirection) else np.asarray(direction, dtype=np.float64)
    e0 = np.asarray(e0, dtype=np.float64)
    if e0.shape[-1] != d.shape[0]:
        raise ValueError(f"embedding dim {e0.shape[-1]} != direction dim {d.shape[0]}")
    return e0 + alpha * d


def side_effects(base: Population, edited: Population, target_attr: str) -> dict[str, float]:
    """Mean absolute change of every numerical attribute except the target."""
    if base.n != edited.n:
        raise ValueError(f"row counts differ: {base.n} vs {edited.n}")
    if base.schema.names != edited.schema.names:
        raise ValueError("populations have different schemas")
    out = {}
    for s in base.schema.numerical:
        if s.name != target_attr:
            a = base.frame[s.name].to_numpy(dtype=np.float64)
            b = edited.frame[s.name].to_numpy(dtype=np.float64)
            out[s.name] = float(np.mean(np.abs(b - a)))
    return out


def build_subgroups(pop: Population, target_attr: str, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """High and low groups for text interventions.

    High: the top 10% of positive-target agents by value, ties broken by
    agent index.  Low: 5% of positive agents drawn from those not in the high
    group, plus 5% of zero-target agents.  Both sorted by index.
    """
    t = pop.frame[target_attr].to_numpy(dtype=np.float64)
    positive = np.flatnonzero(t > 0)
    zeros = np.flatnonzero(t == 0)
    if positive.size == 0:
        raise ValueError(f"no agents with positive {target_attr}")
    order = positive[np.lexsort((positive, -t[positive]))]
    high = np.sort(order[: round_half_away(0.10 * positive.size)])
    rng = np.random.default_rng(seed)
    pool = np.setdiff1d(positive, high)
    n_pos = min(round_half_away(0.05 * positive.size), pool.size)
    n_zero = round_half_away(0.05 * zeros.size)
    low = np.concatenate([
        rng.choice(pool, size=n_pos, replace=False),
        rng.choice(zeros, size=n_zero, replace=False) if n_zero else np.empty(0, dtype=np.int64),
    ])
    return high, np.sort(low).astype(np.int64)


def _load(model):
    if isinstance(model, ModelCheckpoint):
        return vae_from_checkpoint(model) if model.backbone == "vae" else model_from_checkpoint(model)
    return model


def _is_vae(model) -> bool:
    return hasattr(model, "net")


def draw_fixed_noise(model, n: int, seed: int) -> torch.Tensor:
    """The shared noise for a same-z comparison: GAN ``z`` or VAE prior ``eps``."""
    model = _load(model)
    if _is_vae(model):
        return draw_latent_noise(n, model.cfg.latent_dim, seed)
    return draw_noise(n, model.cfg.noise_dim, seed)


def generate_with_noise(model, embeddings, noise: torch.Tensor, seed: int) -> Population:
    """Hard population for given embeddings and fixed noise.

    For the GAN backbone the Gumbel draws are re-seeded from ``seed`` on every
    call, so identical inputs give bit-identical populations.
    """
    model = _load(model)
    E = np.asarray(getattr(embeddings, "matrix", embeddings), dtype=np.float32)
    if E.shape[0] != noise.shape[0]:
        raise ValueError(f"{E.shape[0]} embeddings for {noise.shape[0]} noise rows")
    if _is_vae(model):
        return decode(generate_vae_encoded(model, E, noise), model.schema)
    return decode(generate_encoded(model, E, noise, seed), model.schema)


def _target_stats(pop: Population, target_attr: str) -> tuple[float, float]:
    t = pop.frame[target_attr].to_numpy(dtype=np.float64)
    return float(t.mean()), float(np.mean(t > 0))


@dataclass
class SweepReport:
    target_attr: str
    semantic: list[dict] = field(default_factory=list)
    text: list[dict] = field(default_factory=list)

    def write_semantic_csv(self, path: str | Path) -> None:
        _write_rows(self.semantic, path)

    def write_text_csv(self, path: str | Path) -> None:
        _write_rows(self.text, path)


def _write_rows(rows: list[dict], path: str | Path) -> None:
    if not rows:
        raise ValueError("nothing to write")
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def semantic_sweep(
    model,
    E0,
    direction: InterventionDirection,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    target_attr: str = "",
    seed: int = 0,
    standardizer: EmbeddingStandardizer | None = None,
) -> SweepReport:
    """Same-z generations along ``E0 + alpha * d`` for each ``alpha``.

    With a ``standardizer`` the edit is applied in standardized embedding
    space (where the probe was fitted) and mapped back before generation.
    Side effects are measured against the ``alpha = 0`` generation.
    """
    if len(alphas) == 0:
        raise ValueError("alpha grid is empty")
    model = _load(model)
    spec = model.schema[target_attr]
    if spec.is_categorical:
        raise ValueError(f"target attribute {target_attr!r} must be numerical")
    E0 = np.asarray(getattr(E0, "matrix", E0), dtype=np.float32)
    noise = draw_fixed_noise(model, E0.shape[0], seed)
    base = generate_with_noise(model, E0, noise, seed)
    report = SweepReport(target_attr)
    for alpha in sorted(alphas):
        if alpha == 0:
            pop = base
        elif standardizer is not None:
            pop = generate_with_noise(model, standardizer.inverse(edit_embedding(standardizer.transform(E0), direction, alpha)), noise, seed)
        else:
            pop = generate_with_noise(model, edit_embedding(E0, direction, alpha), noise, seed)
        mean, act = _target_stats(pop, target_attr)
        report.semantic.append({"alpha": float(alpha), "mean_target": mean, "activation": act, **side_effects(base, pop, target_attr)})
    return report


def percentiles(diffs) -> tuple[float, float, float]:
    """Median, P25 and P75 under linear interpolation at rank ``p (n + 1)``."""
    q = np.percentile(np.asarray(diffs, dtype=np.float64), [50, 25, 75], method=PERCENTILE_METHOD)
    return float(q[0]), float(q[1]), float(q[2])


def text_sweep(
    model,
    base_texts: Sequence[str],
    edited_texts_by_variant: Mapping[str, Sequence[str]],
    embed_fn: Callable[[Sequence[str]], EmbeddingMatrix],
    seed: int,
    target_attr: str,
) -> SweepReport:
    """Per-variant target deltas of edited personas relative to the originals, under one shared noise draw."""
    model = _load(model)
    base_emb = embed_fn(list(base_texts))
    noise = draw_fixed_noise(model, len(base_texts), seed)
    base = generate_with_noise(model, base_emb, noise, seed)
    t0 = base.frame[target_attr].to_numpy(dtype=np.float64)
    m0, a0 = _target_stats(base, target_attr)
    report = SweepReport(target_attr)
    for variant, texts in edited_texts_by_variant.items():
        if len(texts) != len(base_texts):
            raise ValueError(f"variant {variant!r}: {len(texts)} texts for {len(base_texts)} personas")
        emb = embed_fn(list(texts))
        if emb.dim != base_emb.dim or emb.provenance != base_emb.provenance:
            raise ValueError(f"variant {variant!r} was embedded differently from the base personas")
        pop = generate_with_noise(model, emb, noise, seed)
        m, a = _target_stats(pop, target_attr)
        med, p25, p75 = percentiles(pop.frame[target_attr].to_numpy(dtype=np.float64) - t0)
        report.text.append({
            "variant": variant, "d_mean": m - m0, "d_activation": a - a0,
            "d_median": med, "d_p25": p25, "d_p75": p75,
        })
    return report


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    rx = pd.Series(np.asarray(x, dtype=np.float64)).rank().to_numpy()
    ry = pd.Series(np.asarray(y, dtype=np.float64)).rank().to_numpy()
    if rx.std() == 0 or ry.std() == 0:
        return 0.0
    return float(np.corrcoef(rx, ry)[0, 1])
