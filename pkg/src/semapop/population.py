"""Agent tables: validation, CSV I/O, encoding, and sampling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from semapop.schema import AttributeSchema


class PopulationError(ValueError):
    """Raised when a table does not conform to its schema."""


@dataclass
class Population:
    """A table of agents, one row per agent, columns in schema order.

    Categorical cells hold category labels (``str``); integer-valued numerical
    columns are ``int64`` and the remaining numerical columns ``float64``.
    """

    frame: pd.DataFrame
    schema: AttributeSchema

    def __post_init__(self):
        self.frame = _coerce(self.frame, self.schema)

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def n(self) -> int:
        return len(self.frame)

    def take(self, indices) -> Population:
        return Population(self.frame.iloc[np.asarray(indices, dtype=np.int64)].reset_index(drop=True), self.schema)

    def equals(self, other: Population) -> bool:
        return self.schema.names == other.schema.names and self.frame.equals(other.frame)

    def category_codes(self, name: str) -> np.ndarray:
        """Integer category index of every row for a categorical attribute."""
        spec = self.schema[name]
        lookup = {c: i for i, c in enumerate(spec.categories)}
        return self.frame[name].map(lookup).to_numpy(dtype=np.int64)


def _coerce(frame: pd.DataFrame, schema: AttributeSchema) -> pd.DataFrame:
    missing = [n for n in schema.names if n not in frame.columns]
    if missing:
        raise PopulationError(f"missing columns: {missing}")
    out = {}
    for s in schema:
        col = frame[s.name]
        if s.is_categorical:
            values = col.astype(str)
            bad = ~values.isin(s.categories)
            if bad.any():
                row = int(np.flatnonzero(bad.to_numpy())[0])
                raise PopulationError(
                    f"row {row}, column {s.name}: unknown category {values.iloc[row]!r}"
                )
            out[s.name] = values.to_numpy(dtype=object)
        else:
            values = _to_numeric(col)
            bad = values.isna() | ~np.isfinite(values.to_numpy(dtype=np.float64, na_value=np.nan))
            if bad.any():
                row = int(np.flatnonzero(bad.to_numpy())[0])
                raise PopulationError(
                    f"row {row}, column {s.name}: non-numeric value {col.iloc[row]!r}"
                )
            arr = values.to_numpy(dtype=np.float64)
            if s.integer_valued:
                if not np.all(arr == np.round(arr)):
                    row = int(np.flatnonzero(arr != np.round(arr))[0])
                    raise PopulationError(f"row {row}, column {s.name}: expected an integer, got {arr[row]}")
                arr = arr.astype(np.int64)
            out[s.name] = arr
    return pd.DataFrame(out, columns=schema.names).reset_index(drop=True)


def _parse_float(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return np.nan


def _to_numeric(col: pd.Series) -> pd.Series:
    # pd.to_numeric on strings is not correctly rounded; float() is
    if col.dtype == object or pd.api.types.is_string_dtype(col):
        return col.map(_parse_float).astype(np.float64)
    return pd.to_numeric(col, errors="coerce")


def load_population(path: str | Path, schema: AttributeSchema) -> Population:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    header = list(frame.columns)
    if header != schema.names:
        missing = [n for n in schema.names if n not in header]
        if missing:
            raise PopulationError(f"{path}: missing columns {missing}")
        frame = frame[schema.names]
    return Population(frame, schema)


def write_population(pop: Population, path: str | Path) -> None:
    pop.frame.to_csv(path, index=False, encoding="utf-8", quoting=csv.QUOTE_MINIMAL, float_format="%.17g")


def encode(pop: Population, schema: AttributeSchema | None = None) -> np.ndarray:
    """One-hot categorical blocks and standardized numerical columns."""
    schema = schema or pop.schema
    if not schema.fitted:
        raise PopulationError("schema statistics are not fitted; call fit_schema_stats first")
    out = np.zeros((pop.n, schema.encoded_width), dtype=np.float64)
    for s, sl in schema.blocks():
        if s.is_categorical:
            codes = pop.category_codes(s.name)
            out[np.arange(pop.n), sl.start + codes] = 1.0
        else:
            out[:, sl.start] = (pop.frame[s.name].to_numpy(dtype=np.float64) - s.mean) / s.std
    return out


def decode(batch, schema: AttributeSchema, mode: str = "hard") -> Population:
    """Inverse of :func:`encode`.

    Categorical blocks decode by argmax (ties go to the lowest index);
    numerical columns are de-standardized, rounded when integer valued, and
    clipped to the range observed during fitting.
    """
    if mode != "hard":
        raise ValueError(f"unsupported decode mode {mode!r}")
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != schema.encoded_width:
        raise PopulationError(f"batch width {batch.shape} does not match schema width {schema.encoded_width}")
    if not np.all(np.isfinite(batch)):
        raise PopulationError("cannot decode non-finite values")
    cols = {}
    for s, sl in schema.blocks():
        if s.is_categorical:
            # np.argmax returns the first maximal index
            idx = np.argmax(batch[:, sl], axis=1)
            cols[s.name] = np.asarray(s.categories, dtype=object)[idx]
        else:
            vals = batch[:, sl.start] * s.std + s.mean
            if s.integer_valued:
                vals = _round_half_away(vals)
            if s.min is not None and s.max is not None:
                vals = np.clip(vals, s.min, s.max)
            cols[s.name] = vals
    return Population(pd.DataFrame(cols, columns=schema.names), schema)


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def stratified_sample(pop: Population, stratum_attr: str, fraction: float, seed: int) -> Population:
    """Sample ``round(n_s * fraction)`` agents uniformly from every stratum."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if not pop.schema[stratum_attr].is_categorical:
        raise ValueError(f"{stratum_attr} is not a categorical attribute")
    rng = np.random.default_rng(seed)
    codes = pop.category_codes(stratum_attr)
    chosen = []
    for k in range(len(pop.schema[stratum_attr].categories)):
        members = np.flatnonzero(codes == k)
        m = round_half_away(len(members) * fraction)
        if m:
            chosen.append(np.sort(rng.choice(members, size=m, replace=False)))
    idx = np.concatenate(chosen) if chosen else np.array([], dtype=np.int64)
    return pop.take(idx)


def split(pop: Population, fractions: tuple[float, float, float], seed: int) -> tuple[Population, Population, Population]:
    """Random train/validation/test partition with the given fractions."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    perm = np.random.default_rng(seed).permutation(pop.n)
    n_train = round_half_away(pop.n * fractions[0])
    n_val = round_half_away(pop.n * fractions[1])
    parts = perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
    return tuple(pop.take(np.sort(p)) for p in parts)
