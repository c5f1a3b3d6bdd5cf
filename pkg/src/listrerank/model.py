"""List transformer encoder and fused scoring head.

The query feature and the passage features form one sequence. A stack of
post-norm transformer blocks encodes it under one of three attention masks,
then three small MLPs turn original and listwise features into a score per
passage.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .numerics import (
    DimensionError,
    Node,
    add,
    as_node,
    concat,
    gelu,
    layer_norm,
    masked_softmax,
    matmul,
    reshape,
    scale,
    sigmoid,
    take,
)

FORMAT_VERSION = 1
FUSED_HIDDEN = 4


class AttentionVariant(str, enum.Enum):
    LIST = "list"
    BIDIRECTIONAL = "bidirectional"
    PASSAGE = "passage"


class FeatureMode(str, enum.Enum):
    FUSED = "fused"
    LISTWISE = "listwise"
    ORIGINAL = "original"


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match its config."""


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    attention_variant: AttentionVariant = AttentionVariant.LIST
    feature_mode: FeatureMode = FeatureMode.FUSED
    seed: int = 0
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "attention_variant", AttentionVariant(self.attention_variant))
        object.__setattr__(self, "feature_mode", FeatureMode(self.feature_mode))
        if self.d < 1 or self.heads < 1 or self.ffn_dim < 1:
            raise ValueError("d, heads and ffn_dim must be positive")
        if self.d % self.heads:
            raise ValueError(f"heads={self.heads} must divide d={self.d}")
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["attention_variant"] = self.attention_variant.value
        out["feature_mode"] = self.feature_mode.value
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ScoreBreakdown:
    s_origin: float
    s_list: float
    s_final: float


def _mlp_shapes(prefix: str, d_in: int, hidden: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.w1": (d_in, hidden),
        f"{prefix}.b1": (hidden,),
        f"{prefix}.w2": (hidden, 1),
        f"{prefix}.b2": (1,),
    }


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name and shape of every parameter, in canonical order."""
    d, f = config.d, config.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "adapter.weight": (d, d),
        "adapter.bias": (d,),
        "e_q": (d,),
        "e_p": (d,),
    }
    for i in range(config.layers):
        p = f"layer{i}"
        shapes.update(
            {
                f"{p}.w_q": (d, d),
                f"{p}.w_k": (d, d),
                f"{p}.w_v": (d, d),
                f"{p}.w_o": (d, d),
                f"{p}.ln1_gain": (d,),
                f"{p}.ln1_bias": (d,),
                f"{p}.ffn_w1": (d, f),
                f"{p}.ffn_b1": (f,),
                f"{p}.ffn_w2": (f, d),
                f"{p}.ffn_b2": (d,),
                f"{p}.ln2_gain": (d,),
                f"{p}.ln2_bias": (d,),
            }
        )
    shapes.update(_mlp_shapes("mlp_ori", 2 * d, d))
    shapes.update(_mlp_shapes("mlp_list", 2 * d, d))
    shapes.update(_mlp_shapes("mlp_fused", 2, FUSED_HIDDEN))
    return shapes


ADAPTER_PARAMS = frozenset({"adapter.weight", "adapter.bias"})


def param_count(config: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(config).values())


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    """Deterministic initial parameters for ``config.seed``.

    Matrices and the type embeddings draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in));
    biases start at zero, norm gains at one, and the adapter at identity.
    """
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "adapter.weight":
            params[name] = np.eye(config.d)
        elif leaf.endswith("gain"):
            params[name] = np.ones(shape)
        elif len(shape) == 2 or name in ("e_q", "e_p"):
            bound = 1.0 / math.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def build_mask(variant: AttentionVariant | str, n_passages: int) -> np.ndarray:
    """Boolean (N+1)x(N+1) mask; row i lists what position i may attend to.

    Position 0 is the query.
    """
    variant = AttentionVariant(variant)
    if n_passages < 0:
        raise ValueError("n_passages must be >= 0")
    n = n_passages + 1
    if variant is AttentionVariant.BIDIRECTIONAL:
        return np.ones((n, n), dtype=bool)
    if variant is AttentionVariant.LIST:
        mask = np.ones((n, n), dtype=bool)
        mask[0, 1:] = False
        return mask
    mask = np.eye(n, dtype=bool)
    mask[0, :] = True
    mask[:, 0] = True
    return mask


def _block(p: Mapping[str, Node], prefix: str, z: Node, mask: np.ndarray, config: ModelConfig) -> Node:
    d, heads = config.d, config.heads
    dh = d // heads
    q = matmul(z, p[f"{prefix}.w_q"])
    k = matmul(z, p[f"{prefix}.w_k"])
    v = matmul(z, p[f"{prefix}.w_v"])
    outs = []
    for h in range(heads):
        cols = (slice(None), slice(h * dh, (h + 1) * dh))
        qh, kh, vh = take(q, cols), take(k, cols), take(v, cols)
        logits = scale(matmul(qh, kh.T), 1.0 / math.sqrt(dh))
        outs.append(matmul(masked_softmax(logits, mask), vh))
    attn = matmul(outs[0] if heads == 1 else concat(outs, axis=1), p[f"{prefix}.w_o"])
    z = layer_norm(add(z, attn), p[f"{prefix}.ln1_gain"], p[f"{prefix}.ln1_bias"], config.ln_eps)
    hidden = gelu(add(matmul(z, p[f"{prefix}.ffn_w1"]), p[f"{prefix}.ffn_b1"]))
    ffn = add(matmul(hidden, p[f"{prefix}.ffn_w2"]), p[f"{prefix}.ffn_b2"])
    return layer_norm(add(z, ffn), p[f"{prefix}.ln2_gain"], p[f"{prefix}.ln2_bias"], config.ln_eps)


def _check_features(config: ModelConfig, h_q: Node, h_list: Node) -> None:
    if h_list.value.ndim != 2 or h_list.value.shape[0] == 0:
        raise ValueError("at least one passage is required")
    if h_q.value.shape != (config.d,) or h_list.value.shape[1] != config.d:
        raise DimensionError(
            f"features must have dimension {config.d}: query {h_q.value.shape}, passages {h_list.value.shape}"
        )


def encode_graph(p: Mapping[str, Node], config: ModelConfig, h_q, h_list) -> Node:
    """Final-layer sequence features, shape (N+1, d); row 0 is the query."""
    h_q, h_list = as_node(h_q), as_node(h_list)
    _check_features(config, h_q, h_list)
    d = config.d
    z = concat([reshape(add(h_q, p["e_q"]), (1, d)), add(h_list, p["e_p"])], axis=0)
    mask = build_mask(config.attention_variant, h_list.value.shape[0])
    for i in range(config.layers):
        z = _block(p, f"layer{i}", z, mask, config)
    return z


def _pair_mlp(p: Mapping[str, Node], prefix: str, left: Node, rights: Node) -> Node:
    n = rights.value.shape[0]
    tiled = matmul(np.ones((n, 1)), reshape(left, (1, -1)))
    x = concat([tiled, rights], axis=1)
    hidden = gelu(add(matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
    return reshape(add(matmul(hidden, p[f"{prefix}.w2"]), p[f"{prefix}.b2"]), (n,))


def score_graph(p: Mapping[str, Node], config: ModelConfig, h_q, h_list) -> tuple[Node, Node, Node]:
    """(s_origin, s_list, s_final), each of shape (N,)."""
    s_origin, s_list, logit = logit_graph(p, config, h_q, h_list)
    return s_origin, s_list, sigmoid(logit)


def logit_graph(p: Mapping[str, Node], config: ModelConfig, h_q, h_list) -> tuple[Node, Node, Node]:
    """Like :func:`score_graph` but returns the fused logit before the sigmoid."""
    h_q, h_list = as_node(h_q), as_node(h_list)
    _check_features(config, h_q, h_list)
    n = h_list.value.shape[0]
    mode = config.feature_mode
    if mode is FeatureMode.LISTWISE:
        s_origin = Node(np.zeros(n))
    else:
        s_origin = _pair_mlp(p, "mlp_ori", h_q, h_list)
    if mode is FeatureMode.ORIGINAL:
        s_list = Node(np.zeros(n))
    else:
        z = encode_graph(p, config, h_q, h_list)
        s_list = _pair_mlp(p, "mlp_list", take(z, 0), take(z, slice(1, None)))
    pair = concat([reshape(s_origin, (n, 1)), reshape(s_list, (n, 1))], axis=1)
    hidden = gelu(add(matmul(pair, p["mlp_fused.w1"]), p["mlp_fused.b1"]))
    fused = reshape(add(matmul(hidden, p["mlp_fused.w2"]), p["mlp_fused.b2"]), (n,))
    return s_origin, s_list, fused


def _as_matrix(h_list) -> np.ndarray:
    if isinstance(h_list, np.ndarray):
        return np.asarray(h_list, dtype=np.float64)
    if len(h_list) == 0:
        raise ValueError("at least one passage is required")
    return np.stack([np.asarray(h, dtype=np.float64) for h in h_list])


def list_encode(
    params: Mapping[str, np.ndarray], config: ModelConfig, h_q, h_list
) -> tuple[np.ndarray, np.ndarray]:
    """Encode a query and its passages; returns (z_q, z_passages)."""
    z = encode_graph(params, config, np.asarray(h_q, dtype=np.float64), _as_matrix(h_list)).value
    return z[0], z[1:]


def score_arrays(params: Mapping[str, np.ndarray], config: ModelConfig, h_q, h_list):
    """Score arrays ``(s_origin, s_list, s_final)`` without recording gradients."""
    nodes = score_graph(params, config, np.asarray(h_q, dtype=np.float64), _as_matrix(h_list))
    return tuple(n.value for n in nodes)


def score(params: Mapping[str, np.ndarray], config: ModelConfig, h_q, h_list) -> list[ScoreBreakdown]:
    s_o, s_l, s_f = score_arrays(params, config, h_q, h_list)
    return [ScoreBreakdown(float(a), float(b), float(c)) for a, b, c in zip(s_o, s_l, s_f)]


def features(params: Mapping[str, np.ndarray], embeddings: np.ndarray) -> np.ndarray:
    """Apply the embedding adapter row-wise to raw embeddings."""
    return embeddings @ params["adapter.weight"].T + params["adapter.bias"]


# checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def model_id(self) -> str:
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()[:16]


def save_checkpoint(path: str | Path, config: ModelConfig, params: Mapping[str, np.ndarray], meta=None) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "tensors": {
            name: {"shape": list(arr.shape), "data": [float(x) for x in np.asarray(arr).reshape(-1)]}
            for name, arr in params.items()
        },
    }
    if meta:
        doc["meta"] = meta
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(doc), encoding="utf-8")
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from exc
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {version!r}")
    try:
        config = ModelConfig.from_dict(doc["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config ({exc})") from exc
    expected = param_shapes(config)
    tensors = doc.get("tensors", {})
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"{path}: tensor names differ from config (missing {missing}, unexpected {extra})")
    params = {}
    for name, shape in expected.items():
        rec = tensors[name]
        if tuple(rec["shape"]) != shape:
            raise CheckpointError(f"{path}: {name} has shape {rec['shape']}, config implies {list(shape)}")
        arr = np.asarray(rec["data"], dtype=np.float64)
        if arr.size != math.prod(shape) or not np.all(np.isfinite(arr)):
            raise CheckpointError(f"{path}: {name} data does not fill shape {list(shape)} with finite values")
        params[name] = arr.reshape(shape)
    return Checkpoint(config, params, doc.get("meta", {}))
