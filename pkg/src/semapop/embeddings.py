"""Persona embeddings: pooled LLM hidden states, a mock embedder, and a disk cache."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from filelock import FileLock

PROVENANCES = ("external", "mock", "zero")
DEFAULT_LAST_LAYERS = 4
MOCK_BUCKETS = 4096
LN_EPS = 1e-12


@dataclass
class EmbeddingMatrix:
    matrix: np.ndarray
    provenance: str = "mock"

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2:
            raise ValueError("embedding matrix must be 2-D")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("embeddings must be finite")
        if self.provenance == "zero" and np.any(self.matrix != 0):
            raise ValueError("zero-provenance embeddings must be all zeros")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.n

    def take(self, indices) -> EmbeddingMatrix:
        return EmbeddingMatrix(self.matrix[np.asarray(indices)], self.provenance)

    def __array__(self, dtype=None, copy=None):
        return self.matrix if dtype is None else self.matrix.astype(dtype)


def layer_norm(x: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """Per-row zero mean, unit variance, no affine parameters."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


class HiddenStateEmbedder(Protocol):
    """Anything that returns per-layer token states for a text.

    ``hidden_states(text)`` returns ``(states, mask)`` with ``states`` of shape
    ``(layers, tokens, dim)`` and ``mask`` of shape ``(tokens,)``.
    """

    name: str

    def hidden_states(self, text: str) -> tuple[np.ndarray, np.ndarray]: ...


def pool_hidden_states(states: np.ndarray, mask: np.ndarray, last_layers: int = DEFAULT_LAST_LAYERS) -> np.ndarray:
    """Layer mean over the last layers, masked token mean, then layer norm."""
    states = np.asarray(states, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if states.ndim != 3:
        raise ValueError("hidden states must have shape (layers, tokens, dim)")
    layer_mean = states[-last_layers:].mean(axis=0)
    denom = max(mask.sum(), 1.0)
    pooled = (layer_mean * mask[:, None]).sum(axis=0) / denom
    return layer_norm(pooled)


def embed_texts(texts: Sequence[str], embedder: HiddenStateEmbedder, last_layers: int = DEFAULT_LAST_LAYERS) -> EmbeddingMatrix:
    rows = []
    for text in texts:
        states, mask = embedder.hidden_states(text)
        row = pool_hidden_states(states, mask, last_layers)
        if rows and row.shape != rows[0].shape:
            raise ValueError(f"embedder returned dim {row.shape[0]}, expected {rows[0].shape[0]}")
        rows.append(row)
    if not rows:
        return EmbeddingMatrix(np.zeros((0, 1)), "external")
    return EmbeddingMatrix(np.stack(rows), "external")


class TransformersEmbedder:
    """Hidden states from a local Hugging Face causal LM (imported lazily)."""

    def __init__(self, model_name: str, max_tokens: int = 512):
        from transformers import AutoModel, AutoTokenizer

        self.name = model_name
        self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        self.model = AutoModel.from_pretrained(model_name, output_hidden_states=True)
        self.model.eval()
        self.max_tokens = max_tokens

    def hidden_states(self, text: str):
        import torch

        enc = self.tokenizer(text, return_tensors="pt", truncation=True, max_length=self.max_tokens)
        with torch.no_grad():
            out = self.model(**enc)
        states = torch.stack(out.hidden_states[1:], dim=0)[:, 0]
        return states.float().numpy(), enc["attention_mask"][0].float().numpy()


def _token_bucket(token: str, seed: int, buckets: int) -> tuple[int, float]:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little", signed=True)).digest()
    h = int.from_bytes(digest, "little")
    return h % buckets, 1.0 if (h >> 63) & 1 else -1.0


def mock_embed(texts: Sequence[str], dim: int, seed: int = 0, buckets: int = MOCK_BUCKETS) -> EmbeddingMatrix:
    """Deterministic stand-in for the frozen LLM encoder.

    Whitespace tokens are hashed (keyed by ``seed``) into a signed bag of
    buckets, projected by a seeded Gaussian matrix to ``dim`` and
    layer-normalized.  Identical texts give identical rows.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    proj = np.random.default_rng(seed).standard_normal((buckets, dim))
    out = np.zeros((len(texts), dim))
    memo: dict[str, np.ndarray] = {}
    for i, text in enumerate(texts):
        if text not in memo:
            bag = np.zeros(buckets)
            for tok in text.split():
                b, sign = _token_bucket(tok, seed, buckets)
                bag[b] += sign
            memo[text] = bag @ proj
        out[i] = memo[text]
    # an empty text maps to the zero vector before normalization
    return EmbeddingMatrix(layer_norm(out) if len(texts) else out, "mock")


def zero_embeddings(n: int, dim: int) -> EmbeddingMatrix:
    if n < 1 or dim < 1:
        raise ValueError("n and dim must be >= 1")
    return EmbeddingMatrix(np.zeros((n, dim), dtype=np.float32), "zero")


class EmbeddingCache:
    """Directory of embedding matrices.

    ``manifest.json`` maps keys to ``{dims, provenance}``; each matrix is stored
    as ``<key>.bin`` (little-endian float32) with a ``<key>.json`` shape sidecar.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.directory / "manifest.json"
        self.lock = FileLock(str(self.directory / ".lock"))

    @staticmethod
    def key(texts: Sequence[str], mode: str, model_name: str, **params) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([mode, model_name, sorted(params.items())]).encode())
        for t in texts:
            h.update(hashlib.sha256(t.encode("utf-8")).digest())
        return h.hexdigest()[:32]

    def _manifest(self) -> dict:
        return json.loads(self.manifest_path.read_text()) if self.manifest_path.exists() else {}

    def __contains__(self, key: str) -> bool:
        return key in self._manifest()

    def save(self, key: str, emb: EmbeddingMatrix) -> None:
        with self.lock:
            data = np.ascontiguousarray(emb.matrix, dtype="<f4")
            (self.directory / f"{key}.bin").write_bytes(data.tobytes())
            (self.directory / f"{key}.json").write_text(json.dumps({"shape": list(data.shape), "dtype": "float32le"}))
            manifest = self._manifest()
            manifest[key] = {"dims": list(data.shape), "provenance": emb.provenance}
            self.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))

    def load(self, key: str) -> EmbeddingMatrix:
        entry = self._manifest()[key]
        shape = json.loads((self.directory / f"{key}.json").read_text())["shape"]
        raw = (self.directory / f"{key}.bin").read_bytes()
        if len(raw) != int(np.prod(shape)) * 4:
            raise ValueError(f"embedding cache entry {key} is truncated")
        return EmbeddingMatrix(np.frombuffer(raw, dtype="<f4").reshape(shape).copy(), entry["provenance"])
