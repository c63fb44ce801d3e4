"""Visual-token compression operators.

Every operator returns a :class:`RetentionMask` holding the sorted indices of
the visual tokens that survive. The ratio ``r`` is the fraction *removed*.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

COMPRESSORS = ("random", "importance", "redundancy")


class CompressionError(ValueError):
    pass


@dataclass(frozen=True)
class CompressionRequest:
    ratio: float
    layer: int = 2

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise CompressionError(f"ratio must lie in [0, 1], got {self.ratio}")
        if self.layer < 1:
            raise CompressionError(f"layer must be >= 1, got {self.layer}")


@dataclass(frozen=True)
class RetentionMask:
    kept_indices: np.ndarray
    original_count: int

    def __post_init__(self):
        idx = np.asarray(self.kept_indices, dtype=np.int64)
        object.__setattr__(self, "kept_indices", idx)
        if idx.ndim != 1 or len(idx) == 0:
            raise CompressionError("mask must keep at least one index")
        if np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.original_count:
            raise CompressionError("kept indices must be strictly increasing and within [0, N)")

    def __len__(self) -> int:
        return len(self.kept_indices)


@dataclass
class CompressionEvent:
    """A (ratio, layer) request together with the per-sample masks it produced."""

    ratio: float
    layer: int
    compressor: str
    masks: list[RetentionMask] = field(default_factory=list)

    @property
    def retained(self) -> int:
        return len(self.masks[0]) if self.masks else 0


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def keep_count(n: int, r: float) -> int:
    """Number of visual tokens kept when a fraction ``r`` is removed."""
    if n < 1:
        raise CompressionError(f"N must be >= 1, got {n}")
    # N*(1-r) picks up float noise (576 * (1 - 8/9) = 63.99999...); snap first
    kept = round_half_away(round(n * (1.0 - r), 9))
    return min(n, max(1, kept))


def _mask(indices, n: int) -> RetentionMask:
    return RetentionMask(np.sort(np.asarray(indices, dtype=np.int64)), n)


def random_select(n: int, r: float, rng: np.random.Generator) -> RetentionMask:
    k = keep_count(n, r)
    if k == n:
        return _mask(np.arange(n), n)
    return _mask(rng.choice(n, size=k, replace=False), n)


def _top_k_stable(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores; ties go to the lower index."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    return order[:k]


def importance_select(attn: np.ndarray | None, visual_range: tuple[int, int], r: float,
                      text_rows: np.ndarray | None = None) -> RetentionMask:
    """Keep the visual tokens that text queries attended to most.

    ``attn`` holds one sample's attention probabilities ``[heads, seq, seq]``
    from the layer just before compression. A token's score is the attention
    it receives from every text query, averaged over queries and heads.
    ``text_rows`` defaults to every row after the visual span.
    """
    if attn is None:
        raise CompressionError("importance compression needs attention from the previous layer "
                               "(compression layer must be >= 2)")
    attn = np.asarray(attn, dtype=np.float64)
    lo, hi = visual_range
    n = hi - lo
    if text_rows is None:
        text_rows = np.arange(hi, attn.shape[-2])
    if len(text_rows) == 0:
        raise CompressionError("importance compression needs at least one text query")
    scores = attn[:, text_rows, lo:hi].mean(axis=(0, 1))
    return _mask(_top_k_stable(scores, keep_count(n, r)), n)


def duplication_scores(hidden: np.ndarray, pivots: np.ndarray) -> np.ndarray:
    """Max cosine similarity of every row to any pivot row."""
    norm = np.linalg.norm(hidden, axis=1, keepdims=True)
    unit = hidden / np.maximum(norm, 1e-12)
    return (unit @ unit[pivots].T).max(axis=1)


def redundancy_select(hidden: np.ndarray, r: float, rng: np.random.Generator,
                      n_pivots: int = 8) -> RetentionMask:
    """Keep random pivots plus the tokens least duplicated by them."""
    hidden = np.asarray(hidden, dtype=np.float64)
    n = hidden.shape[0]
    k = keep_count(n, r)
    if k == n:
        return _mask(np.arange(n), n)
    p = min(n_pivots, n)
    pivots = rng.choice(n, size=p, replace=False)
    if k <= p:
        return _mask(pivots[:k], n)
    scores = duplication_scores(hidden, pivots)
    rest = np.setdiff1d(np.arange(n), pivots)
    # lowest duplication first, ties toward lower index
    order = np.lexsort((rest, scores[rest]))
    return _mask(np.concatenate([pivots, rest[order[: k - p]]]), n)


def select(kind: str, *, n: int, r: float, rng: np.random.Generator,
           attn: np.ndarray | None = None, hidden: np.ndarray | None = None,
           visual_range: tuple[int, int] | None = None, n_pivots: int = 8) -> RetentionMask:
    """Dispatch to the named operator with whatever signal it consumes."""
    if kind == "random":
        return random_select(n, r, rng)
    if kind == "importance":
        return importance_select(attn, visual_range or (0, n), r)
    if kind == "redundancy":
        if hidden is None:
            raise CompressionError("redundancy compression needs visual hidden states")
        return redundancy_select(hidden, r, rng, n_pivots=n_pivots)
    raise CompressionError(f"unknown compressor {kind!r}; expected one of {COMPRESSORS}")
