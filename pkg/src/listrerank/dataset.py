"""Ranking datasets: JSON Lines I/O, splitting, and a synthetic topical corpus."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np


class DatasetFormatError(ValueError):
    """A dataset file violates the JSON Lines query format."""


@dataclass(frozen=True)
class Passage:
    id: str
    text: str
    label: int


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    query: str
    passages: tuple[Passage, ...]

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.passages], dtype=np.int64)

    @property
    def texts(self) -> list[str]:
        return [p.text for p in self.passages]

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "query": self.query,
            "passages": [{"id": p.id, "text": p.text, "label": p.label} for p in self.passages],
        }


class RankingDataset:
    def __init__(self, records: Iterable[QueryRecord]):
        self.records = list(records)
        seen = set()
        for rec in self.records:
            if rec.query_id in seen:
                raise DatasetFormatError(f"duplicate query_id {rec.query_id!r}")
            seen.add(rec.query_id)
            ids = [p.id for p in rec.passages]
            if len(set(ids)) != len(ids):
                raise DatasetFormatError(f"query {rec.query_id!r} repeats a passage id")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[QueryRecord]:
        return iter(self.records)

    def __getitem__(self, i: int) -> QueryRecord:
        return self.records[i]

    def texts(self) -> list[str]:
        """Every distinct query and passage text, first-seen order."""
        out = {}
        for rec in self.records:
            out.setdefault(rec.query, None)
            for p in rec.passages:
                out.setdefault(p.text, None)
        return list(out)

    def split(self, held_out: float, seed: int = 0) -> tuple["RankingDataset", "RankingDataset"]:
        """Random query-level split into (train, held-out)."""
        if not 0.0 < held_out < 1.0:
            raise ValueError("held_out fraction must lie in (0, 1)")
        idx = np.random.default_rng(seed).permutation(len(self.records))
        cut = len(idx) - max(1, int(round(held_out * len(idx))))
        train = sorted(idx[:cut].tolist())
        test = sorted(idx[cut:].tolist())
        return (
            RankingDataset(self.records[i] for i in train),
            RankingDataset(self.records[i] for i in test),
        )


def _parse_record(obj, where: str) -> QueryRecord:
    try:
        qid, query, raw = obj["query_id"], obj["query"], obj["passages"]
    except (KeyError, TypeError) as exc:
        raise DatasetFormatError(f"{where}: missing field {exc}") from exc
    if not isinstance(qid, str) or not isinstance(query, str) or not isinstance(raw, list):
        raise DatasetFormatError(f"{where}: query_id/query must be strings and passages a list")
    passages = []
    for j, p in enumerate(raw):
        try:
            pid, text, label = p["id"], p["text"], p["label"]
        except (KeyError, TypeError) as exc:
            raise DatasetFormatError(f"{where}: passage {j} missing field {exc}") from exc
        if not isinstance(pid, str) or not isinstance(text, str):
            raise DatasetFormatError(f"{where}: passage {j} id/text must be strings")
        if label not in (0, 1) or isinstance(label, bool):
            raise DatasetFormatError(f"{where}: passage {j} label must be 0 or 1")
        passages.append(Passage(pid, text, int(label)))
    return QueryRecord(qid, query, tuple(passages))


def load_dataset(path: str | Path) -> RankingDataset:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            records.append(_parse_record(obj, f"{path}:{lineno}"))
    return RankingDataset(records)


def dumps_dataset(dataset: RankingDataset) -> str:
    return "".join(json.dumps(r.to_json(), ensure_ascii=False) + "\n" for r in dataset)


def write_dataset(path: str | Path, dataset: RankingDataset) -> None:
    Path(path).write_text(dumps_dataset(dataset), encoding="utf-8")


# synthetic corpus ------------------------------------------------------------

_CONSONANTS = "bcdfghjklmnprstvwxz"
_VOWELS = "aeiou"
SYLLABLES_PER_TOPIC = 5
WORDS_PER_TOPIC = 16
QUERY_WORDS = 4
PASSAGE_WORDS = 8


def _topic_vocabularies(rng: np.random.Generator, n_topics: int) -> list[list[str]]:
    syllables = [a + v + b for a in _CONSONANTS for v in _VOWELS for b in _CONSONANTS]
    if n_topics * SYLLABLES_PER_TOPIC > len(syllables):
        raise ValueError(f"at most {len(syllables) // SYLLABLES_PER_TOPIC} topics are supported")
    pool = rng.permutation(len(syllables))
    vocabs = []
    seen: set[str] = set()
    for t in range(n_topics):
        own = [syllables[i] for i in pool[t * SYLLABLES_PER_TOPIC : (t + 1) * SYLLABLES_PER_TOPIC]]
        words: list[str] = []
        while len(words) < WORDS_PER_TOPIC:
            k = int(rng.integers(2, 4))
            w = "".join(own[i] for i in rng.integers(0, len(own), size=k))
            if w not in seen:
                seen.add(w)
                words.append(w)
        vocabs.append(words)
    return vocabs


def _sentence(rng: np.random.Generator, vocab: list[str], n: int) -> list[str]:
    return [vocab[i] for i in rng.integers(0, len(vocab), size=n)]


def synthesize_dataset(
    seed: int,
    n_queries: int,
    passages_per_query: int = 8,
    n_topics: int = 40,
    hard_negative_overlap: float = 0.25,
    max_positives: int = 3,
) -> RankingDataset:
    """Deterministic topical corpus.

    Every topic owns a disjoint set of syllables from which its words are
    built. A query is a few words of one topic; positives are sentences in the
    same topic; negatives come from other topics, with ``hard_negative_overlap``
    of their words swapped for query-topic words.
    """
    if n_topics < 2:
        raise ValueError("n_topics must be >= 2")
    if passages_per_query < 2:
        raise ValueError("passages_per_query must be >= 2")
    if not 0.0 <= hard_negative_overlap < 1.0:
        raise ValueError("hard_negative_overlap must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    vocabs = _topic_vocabularies(rng, n_topics)
    n_hard = int(round(hard_negative_overlap * PASSAGE_WORDS))
    records = []
    for q in range(n_queries):
        topic = int(rng.integers(0, n_topics))
        query = " ".join(_sentence(rng, vocabs[topic], QUERY_WORDS))
        n_pos = int(rng.integers(1, min(max_positives, passages_per_query - 1) + 1))
        passages = []
        for j in range(passages_per_query):
            if j < n_pos:
                words = _sentence(rng, vocabs[topic], PASSAGE_WORDS)
                label = 1
            else:
                other = int(rng.integers(0, n_topics - 1))
                other += other >= topic
                words = _sentence(rng, vocabs[other], PASSAGE_WORDS)
                for slot in rng.choice(PASSAGE_WORDS, size=n_hard, replace=False):
                    words[slot] = vocabs[topic][int(rng.integers(0, WORDS_PER_TOPIC))]
                label = 0
            passages.append((" ".join(words), label))
        order = rng.permutation(passages_per_query)
        records.append(
            QueryRecord(
                f"q{q}",
                query,
                tuple(Passage(f"q{q}-p{k}", passages[i][0], passages[i][1]) for k, i in enumerate(order)),
            )
        )
    return RankingDataset(records)
