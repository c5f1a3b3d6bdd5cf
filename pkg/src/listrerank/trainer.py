"""Two-stage training.

Stage one trains the list transformer and scoring heads with the embedding
adapter frozen. Stage two unfreezes everything and switches the circle-loss
margin. Each stage runs Adam over query groups sampled from a dataset.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import QueryRecord, RankingDataset
from .embedder import HashEmbedder, apply_adapter
from .loss import CircleLossConfig, bce_logits_graph, circle_loss_graph, circle_slopes
from .model import ADAPTER_PARAMS, ModelConfig, features, logit_graph, save_checkpoint, score_arrays
from .numerics import NonFiniteError, Node, parameter, scale, sigmoid

log = logging.getLogger(__name__)

LOSSES = ("circle", "bce")


@dataclass(frozen=True)
class StageConfig:
    epochs: int = 1
    batch_size: int = 8
    m: float = -0.2
    gamma: float = 10.0
    lr: float = 1e-3
    frozen: tuple[str, ...] = tuple(sorted(ADAPTER_PARAMS))
    max_steps: int | None = None
    loss: str = "circle"
    data: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "frozen", tuple(self.frozen))
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive when given")


def default_stages() -> list[StageConfig]:
    return [
        StageConfig(epochs=4, m=-0.2),
        StageConfig(epochs=2, m=0.1, frozen=()),
    ]


@dataclass(frozen=True)
class TrainConfig:
    stages: tuple[StageConfig, ...] = field(default_factory=lambda: tuple(default_stages()))
    group_size: int = 8
    seed: int = 0
    checkpoint_every: int | None = None
    checkpoint_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not self.stages:
            raise ValueError("at least one stage is required")

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        data = dict(data)
        data.pop("model", None)
        if "stages" in data:
            data["stages"] = tuple(StageConfig(**s) for s in data["stages"])
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["stages"] = [asdict(s) | {"frozen": list(s.frozen)} for s in self.stages]
        return out


def load_train_config(path: str | Path) -> tuple[TrainConfig, ModelConfig]:
    """Read a JSON training config; an optional ``model`` key holds the ModelConfig."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    model_cfg = ModelConfig.from_dict(doc.get("model", {}))
    return TrainConfig.from_dict(doc), model_cfg


@dataclass
class TrainRecord:
    step: int
    stage: int
    loss: float
    grad_norm: float
    wall_clock: float


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_good: dict[str, np.ndarray]):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class Group:
    query: str
    texts: tuple[str, ...]
    labels: np.ndarray


@dataclass
class BatchPlan:
    batches: list[list[Group]]
    skipped: int


def sample_group(rec: QueryRecord, group_size: int, rng: np.random.Generator) -> Group | None:
    """Keep positives (at most group_size-1), fill the rest with sampled negatives."""
    if not rec.passages:
        return None
    pos = [p for p in rec.passages if p.label == 1][: group_size - 1]
    neg = [p for p in rec.passages if p.label == 0]
    n_neg = min(len(neg), group_size - len(pos))
    picked = [neg[i] for i in sorted(rng.choice(len(neg), size=n_neg, replace=False))] if n_neg else []
    chosen = pos + picked
    return Group(rec.query, tuple(p.text for p in chosen), np.array([p.label for p in chosen]))


def make_batches(dataset: RankingDataset, group_size: int, batch_size: int, seed: int) -> BatchPlan:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(seed)
    groups, skipped = [], 0
    for rec in dataset:
        g = sample_group(rec, group_size, rng)
        if g is None:
            skipped += 1
        else:
            groups.append(g)
    order = rng.permutation(len(groups))
    groups = [groups[i] for i in order]
    batches = [groups[i : i + batch_size] for i in range(0, len(groups), batch_size)]
    return BatchPlan(batches, skipped)


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.m.get(name, 0.0) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            params[name] = params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class EmbeddingCache:
    """Memoized raw embeddings keyed by text."""

    def __init__(self, embedder):
        self.embedder = embedder
        self._cache: dict[str, np.ndarray] = {}

    def warm(self, texts: Iterable[str]) -> None:
        todo = [t for t in dict.fromkeys(texts) if t not in self._cache]
        if todo:
            for t, v in zip(todo, self.embedder.embed(todo)):
                self._cache[t] = v

    def rows(self, texts: Sequence[str]) -> np.ndarray:
        self.warm(texts)
        return np.stack([self._cache[t] for t in texts])


def group_loss(
    nodes: Mapping[str, Node],
    config: ModelConfig,
    raw_q,
    raw_p,
    labels,
    loss: str,
    cfg: CircleLossConfig,
    slope: np.ndarray | None = None,
) -> Node:
    """Loss of one query group, differentiable in whichever ``nodes`` are leaves."""
    h_q = apply_adapter(raw_q, nodes["adapter.weight"], nodes["adapter.bias"])
    h_p = apply_adapter(raw_p, nodes["adapter.weight"], nodes["adapter.bias"])
    _, _, logit = logit_graph(nodes, config, h_q, h_p)
    if loss == "bce":
        return bce_logits_graph(logit, labels)
    return circle_loss_graph(sigmoid(logit), labels, cfg, slope)


def batch_slopes(
    params: Mapping[str, np.ndarray], config: ModelConfig, batch, stage: "StageConfig"
) -> list[np.ndarray | None]:
    """Circle-loss weights each group would freeze at ``params``.

    Passing these back into :func:`batch_loss` gives the surrogate objective
    whose plain derivative equals the stop-gradient training gradient.
    """
    cfg = CircleLossConfig(stage.m, stage.gamma)
    out = []
    for raw_q, raw_p, labels in batch:
        h_q = features(params, np.asarray(raw_q)[None, :])[0]
        h_p = features(params, raw_p)
        s = score_arrays(params, config, h_q, h_p)[2]
        out.append(circle_slopes(s, labels, cfg))
    return out


def batch_loss(
    params: Mapping[str, np.ndarray],
    config: ModelConfig,
    batch: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]],
    stage: StageConfig,
    trainable: Iterable[str] = (),
    slopes: Sequence[np.ndarray | None] | None = None,
) -> tuple[Node | None, dict[str, Node]]:
    """Mean per-group loss over ``batch`` of (raw_q, raw_p, labels) triples.

    Returns ``(None, leaves)`` when no group has both positives and negatives
    under circle loss.
    """
    trainable = set(trainable)
    nodes = {k: parameter(v, k) if k in trainable else Node(v) for k, v in params.items()}
    cfg = CircleLossConfig(stage.m, stage.gamma)
    terms = []
    slopes = slopes if slopes is not None else [None] * len(batch)
    for (raw_q, raw_p, labels), slope in zip(batch, slopes):
        if stage.loss == "circle" and (labels.min() == labels.max()):
            continue
        terms.append(group_loss(nodes, config, raw_q, raw_p, labels, stage.loss, cfg, slope))
    leaves = {k: nodes[k] for k in trainable}
    if not terms:
        return None, leaves
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return scale(out, 1.0 / len(terms)), leaves


def train_stage(
    params: Mapping[str, np.ndarray],
    config: ModelConfig,
    dataset: RankingDataset,
    stage: StageConfig,
    *,
    group_size: int = 8,
    seed: int = 0,
    stage_index: int = 0,
    cache: EmbeddingCache | None = None,
    step_offset: int = 0,
    checkpoint_every: int | None = None,
    checkpoint_path: str | None = None,
) -> tuple[dict[str, np.ndarray], list[TrainRecord]]:
    unknown = set(stage.frozen) - set(params)
    if unknown:
        raise KeyError(f"frozen parameter names not in the model: {sorted(unknown)}")
    params = {k: np.array(v) for k, v in params.items()}
    trainable = [k for k in params if k not in set(stage.frozen)]
    cache = cache or EmbeddingCache(HashEmbedder(config.d))
    cache.warm(dataset.texts())
    opt = Adam(stage.lr)
    records: list[TrainRecord] = []
    step = step_offset
    skipped_groups = 0
    t0 = time.perf_counter()
    done = False
    for epoch in range(stage.epochs if stage.max_steps is None else 10**9):
        plan = make_batches(dataset, group_size, stage.batch_size, seed + 7919 * epoch + 104729 * stage_index)
        if plan.skipped:
            log.warning("stage %d epoch %d: skipped %d queries without passages", stage_index, epoch, plan.skipped)
        for groups in plan.batches:
            batch = [(cache.rows([g.query])[0], cache.rows(g.texts), g.labels) for g in groups]
            if stage.loss == "circle":
                skipped_groups += sum(1 for g in groups if g.labels.min() == g.labels.max())
            try:
                loss, leaves = batch_loss(params, config, batch, stage, trainable)
                if loss is None:
                    continue
                loss.backward()
            except NonFiniteError as exc:
                _save(checkpoint_path, config, params, step)
                raise TrainingAborted(f"non-finite value at step {step}: {exc}", params) from exc
            value = float(loss.value)
            if not math.isfinite(value):
                _save(checkpoint_path, config, params, step)
                raise TrainingAborted(f"non-finite loss at step {step}", params)
            grads = {k: n.grad if n.grad is not None else np.zeros_like(n.value) for k, n in leaves.items()}
            gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            opt.step(params, grads)
            step += 1
            records.append(TrainRecord(step, stage_index, value, gnorm, time.perf_counter() - t0))
            if checkpoint_every and step % checkpoint_every == 0:
                _save(checkpoint_path, config, params, step)
            if stage.max_steps is not None and step - step_offset >= stage.max_steps:
                done = True
                break
        if done:
            break
    if skipped_groups:
        log.warning("stage %d: skipped %d groups lacking positives or negatives", stage_index, skipped_groups)
    _save(checkpoint_path, config, params, step)
    return params, records


def _save(path: str | None, config: ModelConfig, params: Mapping[str, np.ndarray], step: int) -> None:
    if path:
        save_checkpoint(path, config, params, meta={"step": step})


def train(
    params: Mapping[str, np.ndarray],
    config: ModelConfig,
    datasets: RankingDataset | Sequence[RankingDataset],
    train_cfg: TrainConfig,
    embedder=None,
) -> tuple[dict[str, np.ndarray], list[TrainRecord]]:
    """Run every stage in order; ``datasets`` is one dataset or one per stage."""
    if isinstance(datasets, RankingDataset):
        datasets = [datasets] * len(train_cfg.stages)
    if len(datasets) != len(train_cfg.stages):
        raise ValueError(f"{len(datasets)} datasets given for {len(train_cfg.stages)} stages")
    cache = EmbeddingCache(embedder or HashEmbedder(config.d))
    records: list[TrainRecord] = []
    params = dict(params)
    for i, (stage, data) in enumerate(zip(train_cfg.stages, datasets)):
        params, recs = train_stage(
            params,
            config,
            data,
            stage,
            group_size=train_cfg.group_size,
            seed=train_cfg.seed,
            stage_index=i,
            cache=cache,
            step_offset=records[-1].step if records else 0,
            checkpoint_every=train_cfg.checkpoint_every,
            checkpoint_path=train_cfg.checkpoint_path,
        )
        records.extend(recs)
    return params, records
