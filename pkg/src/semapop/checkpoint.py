"""Self-describing model checkpoints.

Layout of a checkpoint directory::

    manifest.json          backbone, schema, marginal spec, config echo, version
    tensors/<name>.bin     flat little-endian float32 values
    tensors/<name>.json    {"shape": [...], "dtype": "float32le"}
    metrics.csv            per-step training log (optional)
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from semapop.marginal import MarginalSpec
from semapop.schema import AttributeSchema, schema_from_dict

FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelCheckpoint:
    backbone: str
    schema: AttributeSchema
    marginal_spec: MarginalSpec
    config: dict
    embed_dim: int
    tensors: dict[str, np.ndarray]
    metrics: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def state_dict(self, prefix: str) -> dict[str, torch.Tensor]:
        """Tensors under ``prefix.`` with the prefix stripped, as torch tensors."""
        p = prefix + "."
        return {k[len(p):]: torch.from_numpy(v.astype(np.float32)) for k, v in self.tensors.items() if k.startswith(p)}


def tensors_from_modules(**modules: torch.nn.Module) -> dict[str, np.ndarray]:
    out = {}
    for prefix, module in modules.items():
        for k, v in module.state_dict().items():
            out[f"{prefix}.{k}"] = v.detach().cpu().numpy().astype(np.float32)
    return out


def save_checkpoint(ckpt: ModelCheckpoint, directory: str | Path) -> Path:
    directory = Path(directory)
    tdir = directory / "tensors"
    tdir.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, arr in sorted(ckpt.tensors.items()):
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor {name} has non-finite entries")
        data = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        (tdir / f"{name}.bin").write_bytes(data)
        (tdir / f"{name}.json").write_text(json.dumps({"shape": list(arr.shape), "dtype": "float32le"}))
        index[name] = hashlib.sha256(data).hexdigest()
    manifest = {
        "format_version": FORMAT_VERSION,
        "backbone": ckpt.backbone,
        "schema": ckpt.schema.to_dict(),
        "schema_hash": ckpt.schema.structure_hash(),
        "marginal_spec": ckpt.marginal_spec.to_dict(),
        "config": ckpt.config,
        "embed_dim": ckpt.embed_dim,
        "tensors": index,
        "extra": ckpt.extra,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if ckpt.metrics:
        write_metrics(ckpt.metrics, directory / "metrics.csv")
    return directory


def load_checkpoint(directory: str | Path, schema: AttributeSchema | None = None) -> ModelCheckpoint:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"no checkpoint manifest in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
    stored = schema_from_dict(manifest["schema"])
    if stored.structure_hash() != manifest["schema_hash"]:
        raise CheckpointError("manifest schema does not match its recorded hash")
    if schema is not None and schema.structure_hash() != manifest["schema_hash"]:
        raise CheckpointError("checkpoint was trained with a different schema")
    tensors = {}
    for name in manifest["tensors"]:
        meta = json.loads((directory / "tensors" / f"{name}.json").read_text())
        raw = (directory / "tensors" / f"{name}.bin").read_bytes()
        expected = int(np.prod(meta["shape"], dtype=np.int64)) * 4
        if len(raw) != expected:
            raise CheckpointError(f"tensor {name}: expected {expected} bytes, found {len(raw)}")
        tensors[name] = np.frombuffer(raw, dtype=_LE_F32).reshape(meta["shape"]).astype(np.float32)
    metrics = read_metrics(directory / "metrics.csv") if (directory / "metrics.csv").exists() else []
    return ModelCheckpoint(
        backbone=manifest["backbone"],
        schema=stored,
        marginal_spec=MarginalSpec.from_dict(manifest["marginal_spec"]),
        config=manifest["config"],
        embed_dim=manifest["embed_dim"],
        tensors=tensors,
        metrics=metrics,
        extra=manifest.get("extra", {}),
    )


def write_metrics(rows: list[dict], path: str | Path) -> None:
    if not rows:
        return
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_metrics(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]
