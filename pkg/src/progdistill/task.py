"""Synthetic visual question task.

The "image" is a board of ``n_visual`` cells, each holding a value from an
alphabet of ``alphabet`` symbols. A cell's visual feature concatenates one-hot
blocks for its position and its value, plus (when ``multiplicity`` is on) a
one-hot of how many cells on the board share that value. The last block plays
the part of the context a real vision encoder mixes into each patch; without
it the toy model has to discover counting from scratch, which it does far too
slowly at this scale.

The text is ``queries`` question/answer pairs asked about the same board:

* ``[position p, value]``  the value stored in cell ``p``
* ``[value v, count]``     how many cells hold ``v`` (0 .. max_group)

The argument token's id range tells the two templates apart. Answers sit in
the odd text columns and depend on the board, never on the text alone.
``duplication`` is the fraction of cells whose value also appears elsewhere;
duplicated cells come in groups of 2..max_group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Batch

Q_VALUE, Q_COUNT = 0, 1


@dataclass(frozen=True)
class SyntheticTask:
    n_visual: int = 64
    alphabet: int = 64
    duplication: float = 0.5
    max_group: int = 3
    noise: float = 0.05
    queries: int = 24
    value_query_frac: float = 0.5
    absent_frac: float = 0.25
    multiplicity: bool = True

    def __post_init__(self):
        for k in ("n_visual", "alphabet", "queries"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")
        if not 0.0 <= self.duplication <= 1.0:
            raise ValueError("duplication must lie in [0, 1]")
        if self.max_group < 2:
            raise ValueError("max_group must be >= 2")
        if not 0.0 <= self.value_query_frac <= 1.0 or not 0.0 <= self.absent_frac <= 1.0:
            raise ValueError("query fractions must lie in [0, 1]")
        if self.distinct_needed_max() > self.alphabet:
            raise ValueError(f"alphabet {self.alphabet} too small for {self.n_visual} cells "
                             f"at duplication {self.duplication}")

    @property
    def d_visual(self) -> int:
        return self.n_visual + self.alphabet + (self.max_group + 1 if self.multiplicity else 0)

    # vocabulary: [values, positions, counts]

    @property
    def value_offset(self) -> int:
        return 0

    @property
    def position_offset(self) -> int:
        return self.value_offset + self.alphabet

    @property
    def count_offset(self) -> int:
        return self.position_offset + self.n_visual

    @property
    def vocab_size(self) -> int:
        return self.count_offset + self.max_group + 1

    @property
    def answer_vocab(self) -> np.ndarray:
        """Token ids any answer can take (values and counts)."""
        return np.concatenate([self.value_offset + np.arange(self.alphabet),
                               self.count_offset + np.arange(self.max_group + 1)])

    @property
    def text_len(self) -> int:
        return 2 * self.queries

    @property
    def answer_cols(self) -> tuple[int, ...]:
        return tuple(range(1, self.text_len, 2))

    @property
    def seq_len(self) -> int:
        return self.n_visual + self.text_len

    def n_duplicated(self) -> int:
        n = self.n_visual
        k = math.ceil(self.duplication * n - 1e-9)
        if k == 0:
            return 0
        k = min(n, max(2, k))
        if self.max_group == 2 and k % 2:
            k = k + 1 if k < n else k - 1
        return k

    def distinct_needed_max(self) -> int:
        # worst case: every duplicated group has the minimum size 2
        d = self.n_duplicated()
        return self.n_visual - d + d // 2

    def codes(self) -> tuple[np.ndarray, np.ndarray]:
        """Value codes ``[alphabet, d_visual]`` and position codes ``[N, d_visual]``."""
        eye = np.eye(self.d_visual)
        n = self.n_visual
        return eye[n: n + self.alphabet], eye[:n]

    # generation -----------------------------------------------------------

    def _group_sizes(self, rng: np.random.Generator) -> list[int]:
        left = self.n_duplicated()
        sizes = []
        while left > 0:
            s = int(rng.integers(2, self.max_group + 1))
            if left - s == 1:
                s += 1 if s < self.max_group else -1
            s = min(s, left)
            sizes.append(s)
            left -= s
        return sizes

    def sample_grid(self, rng: np.random.Generator) -> np.ndarray:
        """Board of values respecting the duplication rate."""
        sizes = self._group_sizes(rng)
        n_unique = self.n_visual - sum(sizes)
        values = rng.permutation(self.alphabet)[: n_unique + len(sizes)]
        cells = list(values[:n_unique])
        for v, s in zip(values[n_unique:], sizes):
            cells.extend([v] * s)
        return rng.permutation(np.array(cells, dtype=np.int64))


@dataclass
class TaskBatch(Batch):
    grids: np.ndarray = None        # [B, N] cell values
    query_type: np.ndarray = None   # [B, Q]
    query_arg: np.ndarray = None    # [B, Q] cell index or value (raw, not token ids)

    def subset(self, idx) -> "TaskBatch":
        return TaskBatch(self.visual[idx], self.text[idx], self.answer_span, self.answer_cols,
                         self.grids[idx], self.query_type[idx], self.query_arg[idx])


def render_visual(task: SyntheticTask, grids: np.ndarray, rng: np.random.Generator,
                  value_code: np.ndarray | None = None,
                  pos_code: np.ndarray | None = None) -> np.ndarray:
    """Noisy visual features ``[B, N, d_visual]`` for a stack of boards."""
    if value_code is None or pos_code is None:
        value_code, pos_code = task.codes()
    visual = value_code[grids] + pos_code[None, :, :]
    if task.multiplicity:
        mult = np.stack([np.bincount(g, minlength=task.alphabet)[g] for g in grids])
        visual[..., task.n_visual + task.alphabet:] += np.eye(task.max_group + 1)[mult]
    return visual + task.noise * rng.normal(size=visual.shape)


def gen_batch(task: SyntheticTask, batch_size: int, rng: np.random.Generator,
              value_code: np.ndarray | None = None, pos_code: np.ndarray | None = None) -> TaskBatch:
    N, Q = task.n_visual, task.queries
    grids = np.stack([task.sample_grid(rng) for _ in range(batch_size)])
    visual = render_visual(task, grids, rng, value_code, pos_code)

    # exact template split per board, random order
    n_val = int(round(task.value_query_frac * Q))
    qtype = np.stack([rng.permutation(np.r_[np.full(n_val, Q_VALUE), np.full(Q - n_val, Q_COUNT)])
                      for _ in range(batch_size)]).astype(np.int64)
    text = np.zeros((batch_size, task.text_len), dtype=np.int64)
    args = np.zeros((batch_size, Q), dtype=np.int64)
    for b in range(batch_size):
        g = grids[b]
        counts = np.bincount(g, minlength=task.alphabet)
        absent = np.flatnonzero(counts == 0)
        for k in range(Q):
            if qtype[b, k] == Q_VALUE:
                p = int(rng.integers(N))
                args[b, k] = p
                text[b, 2 * k: 2 * k + 2] = (task.position_offset + p, task.value_offset + g[p])
            else:
                if len(absent) and rng.random() < task.absent_frac:
                    v = int(rng.choice(absent))
                else:
                    v = int(g[rng.integers(N)])
                args[b, k] = v
                text[b, 2 * k: 2 * k + 2] = (task.value_offset + v, task.count_offset + counts[v])
    return TaskBatch(visual, text, (1, task.text_len), task.answer_cols, grids, qtype, args)


def oracle_answer(task: SyntheticTask, grid: np.ndarray, query_type: int, arg: int) -> int:
    """Answer token read straight off the board."""
    if query_type == Q_VALUE:
        return task.value_offset + int(grid[arg])
    return task.count_offset + int(np.count_nonzero(grid == arg))


def decode_query(task: SyntheticTask, token: int) -> tuple[int, int]:
    """(query type, raw argument) recovered from an argument token."""
    if task.position_offset <= token < task.count_offset:
        return Q_VALUE, int(token) - task.position_offset
    if task.value_offset <= token < task.position_offset:
        return Q_COUNT, int(token) - task.value_offset
    raise ValueError(f"token {token} is not a query argument")


def duplicated_fraction(grid: np.ndarray) -> float:
    _, inv, counts = np.unique(grid, return_inverse=True, return_counts=True)
    return float((counts[inv] > 1).mean())
