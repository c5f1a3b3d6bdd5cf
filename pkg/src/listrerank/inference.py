"""Ranking passages from model scores.

``rank_direct`` sorts one scoring pass. ``iterative_rerank`` repeatedly scores
the surviving passages, fixes the ranks of the worst ``ceil(|P| * beta)`` of
them, and re-scores the rest until at most ``alpha`` remain.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .embedder import HashEmbedder
from .model import FeatureMode, ModelConfig, features, score_arrays


class RankMode(str, enum.Enum):
    ITERATIVE = "iterative"
    DIRECT = "direct"


class ScorerError(RuntimeError):
    """The scorer raised during one round of iterative reranking."""

    def __init__(self, round_index: int, cause: BaseException):
        super().__init__(f"scorer failed in round {round_index}: {cause}")
        self.round_index = round_index


@dataclass(frozen=True)
class IterConfig:
    alpha: int = 20
    beta: float = 0.2

    def __post_init__(self):
        if int(self.alpha) != self.alpha or self.alpha < 1:
            raise ValueError(f"alpha must be a positive integer, got {self.alpha}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")


@dataclass
class RankedResult:
    ranks: np.ndarray  # ranks[i] is the 1-based rank of input passage i
    scores: np.ndarray  # score of passage i in the round its rank was fixed
    rounds: int
    ids: list[str] | None = None

    def order(self) -> np.ndarray:
        """Input indices sorted from rank 1 downward."""
        return np.argsort(self.ranks, kind="stable")


def descending_order(scores: Sequence[float]) -> np.ndarray:
    """Indices by descending score; ties keep ascending index order."""
    s = np.asarray(scores, dtype=np.float64)
    return np.argsort(-s, kind="stable")


def rank_direct(scores: Sequence[float]) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("rank_direct needs at least one score")
    ranks = np.empty(s.size, dtype=np.int64)
    ranks[descending_order(s)] = np.arange(1, s.size + 1)
    return ranks


Scorer = Callable[[object, list], Sequence[float]]


def iterative_rerank(
    scorer: Scorer,
    query,
    passages: Sequence,
    cfg: IterConfig = IterConfig(),
    ids: list[str] | None = None,
) -> RankedResult:
    n = len(passages)
    if n == 0:
        raise ValueError("iterative_rerank needs at least one passage")
    ranks = np.zeros(n, dtype=np.int64)
    fixed_scores = np.zeros(n)
    remaining = list(range(n))
    rounds = 0

    def run_round(count: int) -> None:
        nonlocal remaining, rounds
        rounds += 1
        try:
            scores = np.asarray(scorer(query, [passages[i] for i in remaining]), dtype=np.float64)
        except Exception as exc:
            raise ScorerError(rounds, exc) from exc
        if scores.shape != (len(remaining),):
            raise ScorerError(rounds, ValueError(f"expected {len(remaining)} scores, got shape {scores.shape}"))
        order = descending_order(scores)
        size = len(remaining)
        dropped = set()
        for i in range(1, count + 1):
            pos = int(order[-i])
            idx = remaining[pos]
            ranks[idx] = size - (i - 1)
            fixed_scores[idx] = scores[pos]
            dropped.add(pos)
        remaining = [idx for pos, idx in enumerate(remaining) if pos not in dropped]

    while len(remaining) > cfg.alpha:
        run_round(math.ceil(len(remaining) * cfg.beta))
    if remaining:
        run_round(len(remaining))
    return RankedResult(ranks, fixed_scores, rounds, ids)


class Reranker:
    """A loaded model plus its embedding provider, ready to rank texts.

    Instances are read-only after construction and safe to share across threads.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], embedder=None):
        self.config = config
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        for arr in self.params.values():
            arr.setflags(write=False)
        self.embedder = embedder if embedder is not None else HashEmbedder(config.d)
        if self.embedder.dim != config.d:
            raise ValueError(f"embedder dimension {self.embedder.dim} does not match model d={config.d}")

    @property
    def iterative_applicable(self) -> bool:
        # Without listwise features a passage's score ignores its companions.
        return self.config.feature_mode is not FeatureMode.ORIGINAL

    def featurize(self, query: str, passages: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        raw = self.embedder.embed([query, *passages])
        feats = features(self.params, raw)
        return feats[0], feats[1:]

    def score_features(self, h_q: np.ndarray, h_list: np.ndarray) -> np.ndarray:
        return score_arrays(self.params, self.config, h_q, h_list)[2]

    def score_texts(self, query: str, passages: Sequence[str]) -> np.ndarray:
        h_q, h_list = self.featurize(query, passages)
        return self.score_features(h_q, h_list)

    def rerank(
        self,
        query: str,
        passages: Sequence[str],
        mode: RankMode | str = RankMode.ITERATIVE,
        iter_cfg: IterConfig = IterConfig(),
        ids: list[str] | None = None,
    ) -> RankedResult:
        if len(passages) == 0:
            raise ValueError("at least one passage is required")
        mode = RankMode(mode)
        h_q, h_list = self.featurize(query, passages)
        if mode is RankMode.DIRECT:
            scores = self.score_features(h_q, h_list)
            return RankedResult(rank_direct(scores), scores, 1, ids)

        def scorer(_query, idx):
            return self.score_features(h_q, h_list[np.asarray(idx, dtype=np.int64)])

        return iterative_rerank(scorer, None, list(range(len(passages))), iter_cfg, ids)
