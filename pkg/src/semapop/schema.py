"""Attribute schema: typed description of the agent attributes.

A schema is an ordered list of :class:`AttributeSpec`.  Categorical attributes
carry an ordered category list; numerical attributes carry standardization
statistics once :func:`fit_schema_stats` has been run on a training split.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

KINDS = ("categorical", "numerical")
GROUPS = ("demographic", "household", "behavioral")
STD_FLOOR = 1e-6


class SchemaError(ValueError):
    """Raised for malformed or inconsistent schema documents."""


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    kind: str
    group: str
    categories: tuple[str, ...] = ()
    integer_valued: bool = False
    mean: float | None = None
    std: float | None = None
    min: float | None = None
    max: float | None = None

    def __post_init__(self):
        if not self.name:
            raise SchemaError("attribute name must be non-empty")
        if self.kind not in KINDS:
            raise SchemaError(f"{self.name}: kind must be one of {KINDS}, got {self.kind!r}")
        if self.group not in GROUPS:
            raise SchemaError(f"{self.name}: group must be one of {GROUPS}, got {self.group!r}")
        if self.kind == "categorical":
            if len(self.categories) < 2:
                raise SchemaError(f"{self.name}: categorical attribute needs at least 2 categories")
            if len(set(self.categories)) != len(self.categories):
                raise SchemaError(f"{self.name}: duplicate category labels")
        elif self.categories:
            raise SchemaError(f"{self.name}: numerical attribute cannot declare categories")
        if self.std is not None and not self.std > 0:
            raise SchemaError(f"{self.name}: std must be > 0")

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"

    @property
    def width(self) -> int:
        """Number of encoded columns this attribute occupies."""
        return len(self.categories) if self.is_categorical else 1

    @property
    def fitted(self) -> bool:
        return self.is_categorical or self.std is not None

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "group": self.group}
        if self.is_categorical:
            d["categories"] = list(self.categories)
        else:
            d["integer_valued"] = self.integer_valued
            for key in ("mean", "std", "min", "max"):
                if getattr(self, key) is not None:
                    d[key] = getattr(self, key)
        return d


@dataclass(frozen=True)
class AttributeSchema:
    specs: tuple[AttributeSpec, ...]
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if not self.specs:
            raise SchemaError("schema must contain at least one attribute")
        names = [s.name for s in self.specs]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"duplicate attribute names: {dupes}")

    def __iter__(self) -> Iterator[AttributeSpec]:
        return iter(self.specs)

    def __len__(self) -> int:
        return len(self.specs)

    def __getitem__(self, name: str) -> AttributeSpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    @property
    def categorical(self) -> list[AttributeSpec]:
        return [s for s in self.specs if s.is_categorical]

    @property
    def numerical(self) -> list[AttributeSpec]:
        return [s for s in self.specs if not s.is_categorical]

    @property
    def encoded_width(self) -> int:
        return sum(s.width for s in self.specs)

    @property
    def fitted(self) -> bool:
        return all(s.fitted for s in self.specs)

    def blocks(self) -> list[tuple[AttributeSpec, slice]]:
        """Column slice of every attribute inside an encoded batch."""
        out, start = [], 0
        for s in self.specs:
            out.append((s, slice(start, start + s.width)))
            start += s.width
        return out

    def subset(self, names: Sequence[str]) -> AttributeSchema:
        return AttributeSchema(tuple(self[n] for n in names))

    def to_dict(self) -> dict:
        return {"attributes": [s.to_dict() for s in self.specs]}

    def structure_hash(self) -> str:
        """Hash of names, kinds, and categories (statistics excluded)."""
        skeleton = [(s.name, s.kind, list(s.categories), s.integer_valued) for s in self.specs]
        return hashlib.sha256(json.dumps(skeleton).encode()).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def schema_from_dict(doc: dict) -> AttributeSchema:
    if not isinstance(doc, dict) or not isinstance(doc.get("attributes"), list):
        raise SchemaError('schema document must be {"attributes": [...]}')
    specs = []
    for i, item in enumerate(doc["attributes"]):
        if not isinstance(item, dict) or "name" not in item or "kind" not in item:
            raise SchemaError(f"attribute #{i} must be an object with name and kind")
        specs.append(
            AttributeSpec(
                name=item["name"],
                kind=item["kind"],
                group=item.get("group", "demographic"),
                categories=tuple(str(c) for c in item.get("categories", ())),
                integer_valued=bool(item.get("integer_valued", False)),
                mean=item.get("mean"),
                std=item.get("std"),
                min=item.get("min"),
                max=item.get("max"),
            )
        )
    return AttributeSchema(tuple(specs))


def load_schema(path: str | Path) -> AttributeSchema:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed schema document {path}: {exc}") from exc
    return schema_from_dict(doc)


def default_schema() -> AttributeSchema:
    """The 23-attribute individual-level schema shipped with the package."""
    text = resources.files("semapop").joinpath("data/default_schema.json").read_text()
    return schema_from_dict(json.loads(text))


def fit_schema_stats(schema: AttributeSchema, train) -> AttributeSchema:
    """Return a copy of ``schema`` with mean/std/min/max fitted on ``train``.

    ``std`` is the population standard deviation, floored at 1e-6; a floored
    (constant) column is recorded in ``schema.warnings``.
    """
    frame = train.frame if hasattr(train, "frame") else train
    if len(frame) == 0:
        raise ValueError("cannot fit schema statistics on an empty population")
    specs, notes = [], []
    for s in schema:
        if s.is_categorical:
            specs.append(s)
            continue
        col = np.asarray(frame[s.name], dtype=np.float64)
        std = float(col.std())
        if std < STD_FLOOR:
            msg = f"{s.name}: constant column, std floored at {STD_FLOOR}"
            warnings.warn(msg, stacklevel=2)
            notes.append(msg)
            std = STD_FLOOR
        specs.append(replace(s, mean=float(col.mean()), std=std, min=float(col.min()), max=float(col.max())))
    return AttributeSchema(tuple(specs), warnings=tuple(notes))


__all__ = [
    "AttributeSchema",
    "AttributeSpec",
    "SchemaError",
    "default_schema",
    "fit_schema_stats",
    "load_schema",
    "schema_from_dict",
]
