"""Original passage/query features.

The default provider hashes character 3-grams into ``d`` signed buckets.
Precomputed vectors from any backbone can be loaded from a JSON Lines file
instead. A trainable affine adapter sits on top of either provider.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import kernels
from .numerics import DimensionError, Node, add, as_node, matmul, reshape

MIN_DIM = 8


class EmbeddingFormatError(ValueError):
    """An embedding file violates the JSON Lines vector format."""


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    source_id: str = ""

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def _normalize(counts: np.ndarray) -> np.ndarray:
    norm = math.sqrt(float(np.dot(counts, counts)))
    return counts / norm if norm > 0 else counts


def _fix_cancellation(counts: np.ndarray, text: str) -> np.ndarray:
    # Signed buckets can cancel exactly; non-empty text must not map to zero.
    if text and not counts.any():
        counts = counts.copy()
        counts[0] = 1.0
    return counts


def hash_embed(text: str, d: int, source_id: str = "") -> EmbeddingVector:
    """Deterministic unit-norm feature hash of ``text``; ``""`` maps to zeros."""
    if d < MIN_DIM:
        raise ValueError(f"hash_embed needs d >= {MIN_DIM}, got {d}")
    counts = _fix_cancellation(kernels.trigram_counts(text, d), text)
    return EmbeddingVector(_normalize(counts), source_id)


def hash_embed_many(texts: list[str], d: int) -> np.ndarray:
    """Row-stacked :func:`hash_embed` for a batch of texts."""
    if d < MIN_DIM:
        raise ValueError(f"hash_embed needs d >= {MIN_DIM}, got {d}")
    counts = kernels.trigram_counts_many(list(texts), d)
    out = np.empty_like(counts)
    for row, text in enumerate(texts):
        out[row] = _normalize(_fix_cancellation(counts[row], text))
    return out


class HashEmbedder:
    """Stateless provider around :func:`hash_embed_many`."""

    def __init__(self, dim: int):
        if dim < MIN_DIM:
            raise ValueError(f"hash embedder needs dim >= {MIN_DIM}, got {dim}")
        self.dim = dim

    def embed(self, texts: list[str]) -> np.ndarray:
        return hash_embed_many(texts, self.dim)


class TableEmbedder:
    """Looks texts up in a precomputed table, keyed by text or id."""

    def __init__(self, table: Mapping[str, EmbeddingVector]):
        if not table:
            raise EmbeddingFormatError("embedding table is empty")
        dims = {v.dim for v in table.values()}
        if len(dims) != 1:
            raise EmbeddingFormatError(f"embedding table mixes dimensions {sorted(dims)}")
        self.dim = dims.pop()
        self._table = dict(table)

    def embed(self, texts: list[str]) -> np.ndarray:
        missing = [t for t in texts if t not in self._table]
        if missing:
            raise KeyError(f"no precomputed embedding for {missing[0]!r}")
        return np.stack([self._table[t].values for t in texts])


def load_embedding_file(path: str | Path) -> dict[str, EmbeddingVector]:
    """Parse a JSON Lines file of ``{"id": ..., "vector": [...]}`` records."""
    table: dict[str, EmbeddingVector] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key = rec["id"]
                vec = np.asarray(rec["vector"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise EmbeddingFormatError(f"{path}:{lineno}: malformed record ({exc})") from exc
            if not isinstance(key, str):
                raise EmbeddingFormatError(f"{path}:{lineno}: id must be a string")
            if vec.ndim != 1 or vec.size == 0 or not np.all(np.isfinite(vec)):
                raise EmbeddingFormatError(f"{path}:{lineno}: vector must be a non-empty finite list")
            if key in table:
                raise EmbeddingFormatError(f"{path}:{lineno}: duplicate id {key!r}")
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: dimension {vec.size} differs from {dim} of earlier records"
                )
            table[key] = EmbeddingVector(vec, key)
    return table


def write_embedding_file(path: str | Path, vectors: Mapping[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, vec in vectors.items():
            # repr of a Python float round-trips exactly
            fh.write(json.dumps({"id": key, "vector": [float(x) for x in np.asarray(vec)]}) + "\n")


@dataclass
class AdapterParams:
    weight: np.ndarray
    bias: np.ndarray
    trainable: bool = False

    @classmethod
    def identity(cls, d: int) -> "AdapterParams":
        return cls(np.eye(d), np.zeros(d))


def apply_adapter(v, weight, bias) -> Node:
    """``weight @ v + bias`` for a vector, or row-wise for a stack of vectors.

    Accepts arrays or graph nodes; the result is differentiable in whichever
    arguments require gradients.
    """
    if isinstance(v, EmbeddingVector):
        v = v.values
    v, weight, bias = as_node(v), as_node(weight), as_node(bias)
    w_shape = weight.value.shape
    if v.value.ndim == 1:
        if len(w_shape) != 2 or w_shape[1] != v.value.shape[0] or bias.value.shape != (w_shape[0],):
            raise DimensionError(
                f"adapter dims: weight {w_shape}, bias {bias.value.shape}, input {v.value.shape}"
            )
        return add(reshape(matmul(weight, reshape(v, (-1, 1))), (w_shape[0],)), bias)
    if len(w_shape) != 2 or w_shape[1] != v.value.shape[1] or bias.value.shape != (w_shape[0],):
        raise DimensionError(f"adapter dims: weight {w_shape}, bias {bias.value.shape}, input {v.value.shape}")
    return add(matmul(v, weight.T), bias)
