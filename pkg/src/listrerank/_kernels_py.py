"""Pure-Python reference kernels.

These mirror ``_kernels.pyx`` operation for operation so that both backends
produce bitwise-identical results.
"""
from __future__ import annotations

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = 0xFFFFFFFFFFFFFFFF

# Boundary markers so texts shorter than three characters still yield grams.
BOS = "\x02"
EOS = "\x03"


def _fnv_trigram(a: int, b: int, c: int) -> int:
    h = FNV_OFFSET
    for cp in (a, b, c):
        for shift in (0, 8, 16, 24):
            h ^= (cp >> shift) & 0xFF
            h = (h * FNV_PRIME) & MASK64
    return h


def trigram_counts(text: str, d: int) -> np.ndarray:
    """Signed bucket counts of the padded character 3-grams of ``text``."""
    out = np.zeros(d, dtype=np.float64)
    if not text:
        return out
    cps = [ord(ch) for ch in BOS + text + EOS]
    for i in range(len(cps) - 2):
        h = _fnv_trigram(cps[i], cps[i + 1], cps[i + 2])
        if h >> 63:
            out[h % d] -= 1.0
        else:
            out[h % d] += 1.0
    return out


def trigram_counts_many(texts: list[str], d: int) -> np.ndarray:
    out = np.zeros((len(texts), d), dtype=np.float64)
    for row, text in enumerate(texts):
        out[row] = trigram_counts(text, d)
    return out


def average_precision_ranked(labels: np.ndarray) -> float:
    """AP of binary ``labels`` listed in rank order (index 0 is rank 1).

    Returns NaN when there is no positive label.
    """
    hits = 0
    total = 0.0
    for k in range(len(labels)):
        if labels[k]:
            hits += 1
            total += hits / (k + 1)
    if hits == 0:
        return float("nan")
    return total / hits
