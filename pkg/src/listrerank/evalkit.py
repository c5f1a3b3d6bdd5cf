"""mAP evaluation and the ablation runner."""
from __future__ import annotations

import itertools
import json
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .dataset import RankingDataset, synthesize_dataset
from .inference import IterConfig, RankMode, Reranker
from .model import AttentionVariant, FeatureMode, ModelConfig, init_params
from .trainer import StageConfig, TrainConfig, train


def average_precision(ranks: Sequence[int], labels: Sequence[int]) -> float | None:
    """Uncut average precision of a ranking.

    ``ranks[i]`` is the 1-based rank of item ``i``. Returns ``None`` when there
    are no positive labels, meaning the query should be skipped.
    """
    ranks = np.asarray(ranks, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    n = ranks.size
    if labels.shape != ranks.shape:
        raise ValueError(f"ranks {ranks.shape} and labels {labels.shape} differ in shape")
    if not np.array_equal(np.sort(ranks), np.arange(1, n + 1)):
        raise ValueError("ranks must be a permutation of 1..N")
    if not labels.any():
        return None
    by_rank = np.empty(n, dtype=np.int64)
    by_rank[ranks - 1] = labels
    return float(kernels.average_precision_ranked(by_rank))


@dataclass
class EvalReport:
    mode: str
    map: float
    per_query: dict[str, float]
    skipped: list[str]
    runtime_s: float
    iterative_applicable: bool = True
    rows: list[dict] = field(default_factory=list)

    @property
    def n_queries(self) -> int:
        return len(self.per_query)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mAP"] = out.pop("map")
        out["n_queries"] = self.n_queries
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def mean_ap(aps: Mapping[str, float]) -> float:
    if not aps:
        return float("nan")
    # sorted keys make the float sum independent of query order
    return float(sum(aps[k] for k in sorted(aps)) / len(aps))


def evaluate(
    reranker: Reranker,
    dataset: RankingDataset,
    iter_cfg: IterConfig = IterConfig(),
    mode: RankMode | str = RankMode.ITERATIVE,
) -> EvalReport:
    mode = RankMode(mode)
    t0 = time.perf_counter()
    aps: dict[str, float] = {}
    skipped: list[str] = []
    for rec in dataset:
        if not rec.passages:
            skipped.append(rec.query_id)
            continue
        result = reranker.rerank(rec.query, rec.texts, mode, iter_cfg)
        ap = average_precision(result.ranks, rec.labels)
        if ap is None:
            skipped.append(rec.query_id)
        else:
            aps[rec.query_id] = ap
    return EvalReport(
        mode=mode.value,
        map=mean_ap(aps),
        per_query=aps,
        skipped=skipped,
        runtime_s=time.perf_counter() - t0,
        iterative_applicable=reranker.iterative_applicable,
    )


AXES = {
    "attention_variant": tuple(v.value for v in AttentionVariant),
    "feature_mode": tuple(v.value for v in FeatureMode),
    "loss": ("circle", "bce"),
    "layers": None,  # any positive integer
}


def _check_axes(axes: Mapping[str, Sequence]) -> None:
    for name, values in axes.items():
        if name not in AXES:
            raise ValueError(f"unknown ablation axis {name!r}; expected one of {sorted(AXES)}")
        allowed = AXES[name]
        for v in values:
            if allowed is None:
                if not isinstance(v, int) or v < 1:
                    raise ValueError(f"layers must be positive integers, got {v!r}")
            elif v not in allowed:
                raise ValueError(f"unknown value {v!r} for axis {name!r}; expected one of {allowed}")


def ablation_run(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    axes: Mapping[str, Sequence],
    train_data: RankingDataset,
    eval_data: RankingDataset,
    iter_cfg: IterConfig = IterConfig(),
    mode: RankMode | str = RankMode.ITERATIVE,
) -> list[dict]:
    """Train and evaluate one model per cell of the cartesian product of ``axes``.

    Every cell shares ``model_cfg.seed`` and ``train_cfg.seed``.
    """
    _check_axes(axes)
    names = list(axes)
    rows = []
    for values in itertools.product(*(axes[n] for n in names)):
        cell = dict(zip(names, values))
        mcfg = replace(model_cfg, **{k: v for k, v in cell.items() if k != "loss"})
        tcfg = train_cfg
        if "loss" in cell:
            tcfg = replace(train_cfg, stages=tuple(replace(s, loss=cell["loss"]) for s in train_cfg.stages))
        params, records = train(init_params(mcfg), mcfg, train_data, tcfg)
        reranker = Reranker(mcfg, params)
        cell_mode = RankMode(mode) if reranker.iterative_applicable else RankMode.DIRECT
        report = evaluate(reranker, eval_data, iter_cfg, cell_mode)
        rows.append(
            {
                **cell,
                "mAP": report.map,
                "mode": report.mode,
                "iterative_applicable": report.iterative_applicable,
                "final_loss": records[-1].loss if records else None,
                "steps": len(records),
            }
        )
    return rows


def format_table(rows: Sequence[Mapping]) -> str:
    """Aligned plain-text table of report rows."""
    if not rows:
        return ""
    cols = list(rows[0])

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    cells = [[fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells)
    return "\n".join(lines)


def desk_train_config(steps: int = 300, seed: int = 0, loss: str = "circle", lr: float = 1e-3) -> TrainConfig:
    """Two-stage schedule sized for laptop runs: two thirds of the steps at
    m=-0.2 with the adapter frozen, the rest at m=0.1 with everything trainable."""
    first = (2 * steps) // 3
    return TrainConfig(
        stages=(
            StageConfig(epochs=1, max_steps=first, m=-0.2, lr=lr, loss=loss),
            StageConfig(epochs=1, max_steps=steps - first, m=0.1, lr=lr, frozen=(), loss=loss),
        ),
        group_size=8,
        seed=seed,
    )


def desk_split(seed: int = 0, n_queries: int = 400, held_out: float = 0.25) -> tuple[RankingDataset, RankingDataset]:
    """Seeded synthetic corpus split into train and held-out queries."""
    return synthesize_dataset(seed, n_queries).split(held_out, seed)
