"""Compression curricula for consistency distillation.

Each scheduler maps a training step ``t`` in ``[0, T]`` (plus an rng) to a
:class:`ScheduleState`: the student ratio, the teacher ratio, the
compression layer and the teacher-student gap. Ratios are fractions of
visual tokens removed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ScheduleState:
    r_stu: float
    r_tea: float
    layer: int
    gap: float

    def __post_init__(self):
        if not 0.0 <= self.r_tea <= self.r_stu <= 1.0:
            raise ValueError(f"need 0 <= r_tea <= r_stu <= 1, got {self.r_tea}, {self.r_stu}")


def _progress(t: float, T: int) -> float:
    if T <= 0:
        raise ValueError("T must be positive")
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    return t / T


def gap(t: float, T: int, delta_min: float, delta_max: float) -> float:
    """Teacher-student ratio gap, linear from ``delta_min`` to ``delta_max``."""
    return delta_min + _progress(t, T) * (delta_max - delta_min)


def _state(r_stu: float, delta: float, layer: int) -> ScheduleState:
    return ScheduleState(r_stu, max(0.0, r_stu - delta), layer, delta)


@dataclass(frozen=True)
class TcdSchedule:
    """Token-wise curriculum: the student ratio range widens and shifts up."""

    T: int
    eps: float = 0.05
    r_max_final: float = 0.90
    r_min_final: float = 0.50
    delta_min: float = 0.0
    delta_max: float = 0.30
    fixed_layer: int = 2

    def __post_init__(self):
        if not 0.0 <= self.eps <= self.r_max_final <= 1.0:
            raise ValueError("need 0 <= eps <= r_max_final <= 1")
        if not 0.0 <= self.r_min_final <= self.r_max_final:
            raise ValueError("need 0 <= r_min_final <= r_max_final")
        if not 0.0 <= self.delta_min <= self.delta_max < 1.0:
            raise ValueError("need 0 <= delta_min <= delta_max < 1")

    def bounds(self, t: float) -> tuple[float, float]:
        """``(R_min,t, R_max,t)`` of the student sampling range."""
        f = _progress(t, self.T)
        return f * self.r_min_final, self.eps + f * (self.r_max_final - self.eps)

    def sample(self, t: float, rng: np.random.Generator) -> ScheduleState:
        return tcd_sample(self, t, rng)


def tcd_sample(sched: TcdSchedule, t: float, rng: np.random.Generator,
               gap_progress: float | None = None) -> ScheduleState:
    lo, hi = sched.bounds(t)
    r_stu = float(rng.uniform(lo, hi))
    f = _progress(t, sched.T) if gap_progress is None else gap_progress
    delta = sched.delta_min + f * (sched.delta_max - sched.delta_min)
    return _state(r_stu, delta, sched.fixed_layer)


@dataclass(frozen=True)
class LcdSchedule:
    """Layer-wise curriculum: compression moves from the deepest layer to ``l_min``.

    ``fixed_layer`` pins the layer (the no-progressive-layer ablation).
    """

    T: int
    L: int
    l_min: int = 2
    r_min: float = 0.2
    r_max: float = 0.9
    delta_min: float = 0.0
    delta_max: float = 0.30
    fixed_layer: int | None = None

    def __post_init__(self):
        if not 1 <= self.l_min <= self.L:
            raise ValueError("need 1 <= l_min <= L")
        if not 0.0 <= self.r_min <= self.r_max <= 1.0:
            raise ValueError("need 0 <= r_min <= r_max <= 1")
        if not 0.0 <= self.delta_min <= self.delta_max < 1.0:
            raise ValueError("need 0 <= delta_min <= delta_max < 1")

    def sample(self, t: float, rng: np.random.Generator) -> ScheduleState:
        return lcd_sample(self, t, rng)


def lcd_layer(sched: LcdSchedule, t: float) -> int:
    beta = _progress(t, sched.T)
    if sched.fixed_layer is not None:
        return sched.fixed_layer
    # Round() with ties upward
    raw = sched.L - beta * (sched.L - sched.l_min)
    layer = int(np.floor(round(raw, 9) + 0.5))
    return min(sched.L, max(sched.l_min, layer))


def lcd_sample(sched: LcdSchedule, t: float, rng: np.random.Generator) -> ScheduleState:
    layer = lcd_layer(sched, t)
    r_stu = float(rng.uniform(sched.r_min, sched.r_max))
    return _state(r_stu, gap(t, sched.T, sched.delta_min, sched.delta_max), layer)


@dataclass(frozen=True)
class IcdSchedule:
    """Layer-wise iterated TCD: one equal block of steps per layer, L down to ``l_min``.

    Within a block the ratio follows the TCD ramp on block-local progress and
    resets when the next (shallower) layer starts. ``gap_resets=False`` makes
    the gap follow global progress instead.
    """

    T: int
    L: int
    l_min: int = 2
    eps: float = 0.05
    r_max_final: float = 0.90
    r_min_final: float = 0.50
    delta_min: float = 0.0
    delta_max: float = 0.30
    gap_resets: bool = True

    def __post_init__(self):
        if not 1 <= self.l_min <= self.L:
            raise ValueError("need 1 <= l_min <= L")
        if self.T < self.n_blocks:
            raise ValueError("T must give every layer block at least one step")

    @property
    def n_blocks(self) -> int:
        return self.L - self.l_min + 1

    def boundaries(self) -> np.ndarray:
        """Block start steps, plus ``T`` as the final edge."""
        return np.round(np.linspace(0, self.T, self.n_blocks + 1)).astype(int)

    def block(self, t: float) -> tuple[int, float]:
        """``(block index, local progress in [0, 1])`` for step ``t``."""
        _progress(t, self.T)
        edges = self.boundaries()
        b = int(np.searchsorted(edges, t, side="right") - 1)
        b = min(b, self.n_blocks - 1)
        return b, (t - edges[b]) / (edges[b + 1] - edges[b])

    def sub_schedule(self) -> TcdSchedule:
        return TcdSchedule(T=1, eps=self.eps, r_max_final=self.r_max_final,
                           r_min_final=self.r_min_final, delta_min=self.delta_min,
                           delta_max=self.delta_max, fixed_layer=self.L)

    def sample(self, t: float, rng: np.random.Generator) -> ScheduleState:
        return icd_sample(self, t, rng)


def icd_sample(sched: IcdSchedule, t: float, rng: np.random.Generator) -> ScheduleState:
    b, local = sched.block(t)
    sub = sched.sub_schedule()
    g = local if sched.gap_resets else t / sched.T
    st = tcd_sample(sub, local, rng, gap_progress=g)
    return ScheduleState(st.r_stu, st.r_tea, sched.L - b, st.gap)


@dataclass(frozen=True)
class FixedSchedule:
    """Constant ratio and layer with zero gap (the no-progressive-ratio ablation)."""

    T: int
    ratio: float = 8 / 9
    layer: int = 2

    def sample(self, t: float, rng: np.random.Generator) -> ScheduleState:
        _progress(t, self.T)
        return ScheduleState(self.ratio, self.ratio, self.layer, 0.0)
