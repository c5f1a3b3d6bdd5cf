"""Circle loss over one query's passage scores, plus a BCE baseline.

The self-adaptive weights ``alpha_pos``/``alpha_neg`` are computed from the
current scores and then held constant: no gradient flows through them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Node, as_node, exp, log1p, mean, mul, softplus, sub, take, total

BCE_EPS = 1e-12


@dataclass(frozen=True)
class CircleLossConfig:
    m: float = -0.2
    gamma: float = 10.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")

    @property
    def delta_pos(self) -> float:
        return 1.0 - self.m

    @property
    def delta_neg(self) -> float:
        return self.m

    @property
    def optimum_pos(self) -> float:
        return 1.0 + self.m

    @property
    def optimum_neg(self) -> float:
        return -self.m


@dataclass(frozen=True)
class LabeledScores:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels)
        if scores.ndim != 1 or scores.shape != labels.shape:
            raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(len(self.labels) - self.labels.sum())

    def require_both(self) -> None:
        if self.n_pos == 0 or self.n_neg == 0:
            raise ValueError(
                f"circle loss needs positives and negatives, got {self.n_pos} positive(s) and {self.n_neg} negative(s)"
            )


def _exponents(s: np.ndarray, labels: np.ndarray, cfg: CircleLossConfig):
    pos = labels == 1
    alpha = np.where(
        pos,
        np.maximum(0.0, cfg.optimum_pos - s),
        np.maximum(0.0, s - cfg.optimum_neg),
    )
    # exponent = slope * (s - delta), slope frozen
    slope = np.where(pos, -cfg.gamma * alpha, cfg.gamma * alpha)
    delta = np.where(pos, cfg.delta_pos, cfg.delta_neg)
    return pos, slope, delta


def circle_loss(x: LabeledScores, cfg: CircleLossConfig) -> float:
    x.require_both()
    pos, slope, delta = _exponents(x.scores, x.labels, cfg)
    e = np.exp(slope * (x.scores - delta))
    r_pos = e[pos].sum()
    r_neg = e[~pos].sum()
    prod = r_neg * r_pos
    return math.log1p(prod) if prod < 1.0 else math.log(1.0 + prod)


def circle_loss_grad(x: LabeledScores, cfg: CircleLossConfig) -> np.ndarray:
    """dL/ds per score with the adaptive weights held constant."""
    x.require_both()
    pos, slope, delta = _exponents(x.scores, x.labels, cfg)
    e = np.exp(slope * (x.scores - delta))
    r_pos = e[pos].sum()
    r_neg = e[~pos].sum()
    denom = 1.0 + r_pos * r_neg
    other = np.where(pos, r_neg, r_pos)
    return other * e * slope / denom


def circle_slopes(scores, labels, cfg: CircleLossConfig) -> np.ndarray:
    """Frozen exponent slopes (+-gamma * alpha) at the given scores."""
    return _exponents(np.asarray(scores, dtype=np.float64), np.asarray(labels), cfg)[1]


def circle_loss_graph(scores: Node, labels, cfg: CircleLossConfig, slope: np.ndarray | None = None) -> Node:
    """Differentiable circle loss of a score vector for one query.

    ``slope`` overrides the adaptive weights, which are otherwise taken from
    the current scores. Either way they are constants of the graph.
    """
    scores = as_node(scores)
    labels = np.asarray(labels)
    LabeledScores(scores.value, labels).require_both()
    pos, own_slope, delta = _exponents(scores.value, labels, cfg)
    slope = own_slope if slope is None else np.asarray(slope, dtype=np.float64)
    e = exp(mul(sub(scores, delta), slope))
    r_pos = total(take(e, np.flatnonzero(pos)))
    r_neg = total(take(e, np.flatnonzero(~pos)))
    return log1p(mul(r_pos, r_neg))


def bce_loss(x: LabeledScores) -> float:
    """Mean binary cross-entropy; exact 0/1 scores are clipped to [1e-12, 1-1e-12]."""
    s = x.scores
    if not np.all(np.isfinite(s)) or np.any((s < 0.0) | (s > 1.0)):
        raise ValueError("bce_loss scores must lie in [0, 1]")
    s = np.clip(s, BCE_EPS, 1.0 - BCE_EPS)
    y = x.labels
    return float(np.mean(-(y * np.log(s) + (1 - y) * np.log1p(-s))))


def bce_logits_graph(logits: Node, labels) -> Node:
    """Mean BCE of sigmoid(logits), computed stably from the logits."""
    logits = as_node(logits)
    y = np.asarray(labels, dtype=np.float64)
    # -[y log s + (1-y) log(1-s)] = softplus(x) - y x
    return mean(sub(softplus(logits), mul(logits, y)))
