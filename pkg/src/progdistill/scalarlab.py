"""One-dimensional model of progressive distillation.

A scalar prediction ``theta`` is trained toward a ratio-dependent center
``c(r)``. Direct training gives ``theta = c(r)``; adding a pull toward the
lagged center ``c(r - delta)`` with weight ``lam`` gives

    theta = (c(r) + lam * c(r - delta)) / (1 + lam).

This module computes both minimiser paths over a ratio schedule, their total
variation, the worst-case lagged/current slope ratio ``kappa`` and checks the
contraction bound

    TV(progressive) <= (1 + lam * kappa) / (1 + lam) * TV(direct) <= gamma * r_max.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ASSUMPTION_TOL = 1e-9
BOUND_TOL = 1e-12


class AssumptionError(ValueError):
    """The center function fails one of the monotone / Lipschitz / convex checks."""

    def __init__(self, failures: dict[str, str]):
        self.failures = failures
        super().__init__("; ".join(f"{k}: {v}" for k, v in failures.items()))


@dataclass(frozen=True)
class CenterFunction:
    fn: Callable[[np.ndarray], np.ndarray]
    gamma: float
    convex: bool = True
    strictly_convex: bool = True
    name: str = "c"

    def __call__(self, r):
        return self.fn(np.asarray(r, dtype=np.float64))

    def check(self, lo: float, hi: float, n: int = 10_001, tol: float = ASSUMPTION_TOL) -> dict[str, str]:
        """Grid checks of monotonicity (S1), the slope bound (S2) and convexity (S3).

        Returns the failures, keyed by assumption; empty when all hold.
        """
        r = np.linspace(lo, hi, n)
        c = self(r)
        d = np.diff(c)
        h = r[1] - r[0]
        fails = {}
        if (d < -tol).any():
            i = int(np.argmin(d))
            fails["S1"] = f"decreasing near r={r[i]:.6g}"
        if (np.abs(d) > self.gamma * h + tol).any():
            i = int(np.argmax(np.abs(d)))
            fails["S2"] = f"slope {abs(d[i]) / h:.6g} exceeds gamma={self.gamma:.6g} near r={r[i]:.6g}"
        if self.convex:
            # midpoint convexity on neighbouring triples
            second = c[2:] - 2 * c[1:-1] + c[:-2]
            if (second < -tol).any():
                i = int(np.argmin(second))
                fails["S3"] = f"not convex near r={r[i + 1]:.6g}"
        return fails


# families ------------------------------------------------------------------


def quadratic(a: float = 1.0, b: float = 0.0, c0: float = 0.0, r_max: float = 0.9) -> CenterFunction:
    """``a r^2 + b r + c0`` with ``a >= 0, b >= 0``."""
    return CenterFunction(lambda r: a * r * r + b * r + c0, gamma=2 * a * r_max + b,
                          strictly_convex=a > 0, name=f"quad({a:g},{b:g},{c0:g})")


def affine(a: float = 1.0, b: float = 0.0) -> CenterFunction:
    return CenterFunction(lambda r: a * r + b, gamma=abs(a), strictly_convex=False,
                          name=f"affine({a:g},{b:g})")


def exponential(scale: float = 1.0, rate: float = 1.0, r_max: float = 0.9) -> CenterFunction:
    """``scale * (exp(rate r) - 1)``."""
    return CenterFunction(lambda r: scale * np.expm1(rate * r), gamma=scale * rate * math.exp(rate * r_max),
                          strictly_convex=scale * rate * rate > 0, name=f"exp({scale:g},{rate:g})")


def softplus(scale: float = 1.0, sharpness: float = 1.0, shift: float = 0.0) -> CenterFunction:
    """``scale * softplus(sharpness * (r - shift))``."""
    def fn(r):
        return scale * np.logaddexp(0.0, sharpness * (r - shift))
    return CenterFunction(fn, gamma=scale * sharpness, strictly_convex=scale * sharpness > 0,
                          name=f"softplus({scale:g},{sharpness:g},{shift:g})")


CENTERS = {
    "quad": lambda: quadratic(),
    "affine": lambda: affine(),
    "exp": lambda: exponential(),
    "softplus": lambda: softplus(sharpness=4.0, shift=0.5),
}


# problem -------------------------------------------------------------------


@dataclass
class ScalarProblem:
    center: CenterFunction
    lam: float
    delta: float
    schedule: np.ndarray
    lag: str = "clamp"   # "clamp": c(max(0, r - delta)); "extend": c(r - delta)

    def __post_init__(self):
        self.schedule = np.asarray(self.schedule, dtype=np.float64)
        s = self.schedule
        if not 0 < self.lam < 1:
            raise ValueError(f"lam must lie in (0, 1), got {self.lam}")
        if len(s) < 2 or s[0] != 0.0 or (np.diff(s) <= 0).any():
            raise ValueError("schedule must start at 0 and be strictly increasing")
        if not 0 < self.delta <= s[-1]:
            raise ValueError(f"delta must lie in (0, r_max], got {self.delta}")
        if self.lag not in ("clamp", "extend"):
            raise ValueError(f"unknown lag mode {self.lag!r}")

    @property
    def r_max(self) -> float:
        return float(self.schedule[-1])

    def lagged(self, r):
        r = np.asarray(r, dtype=np.float64)
        return r - self.delta if self.lag == "extend" else np.maximum(0.0, r - self.delta)

    @classmethod
    def uniform(cls, center: CenterFunction, lam: float, delta: float, r_max: float = 0.9,
                steps: int = 10, **kw) -> "ScalarProblem":
        return cls(center, lam, delta, np.linspace(0.0, r_max, steps + 1), **kw)


def _check_domain(problem: ScalarProblem, r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if (r < 0).any() or (r > problem.r_max + 1e-15).any():
        raise ValueError(f"r outside [0, {problem.r_max}]")
    return r


def minimizer_direct(problem: ScalarProblem, r):
    return problem.center(_check_domain(problem, r))


def minimizer_progressive(problem: ScalarProblem, r):
    r = _check_domain(problem, r)
    c = problem.center
    return (c(r) + problem.lam * c(problem.lagged(r))) / (1.0 + problem.lam)


def total_variation(path) -> float:
    x = np.asarray(path, dtype=np.float64)
    if x.ndim != 1 or len(x) < 2:
        raise ValueError("total variation needs a path of length >= 2")
    return float(np.abs(np.diff(x)).sum())


def kappa(problem: ScalarProblem, grid_resolution: int = 10_001) -> float:
    """Largest lagged/current increment ratio over ``[delta, r_max - delta]``."""
    lo, hi = problem.delta, problem.r_max - problem.delta
    if hi < lo:
        raise ValueError(f"degenerate kappa interval: r_max={problem.r_max} < 2*delta={2 * problem.delta}")
    r = np.linspace(lo, hi, grid_resolution)
    c = problem.center
    num = c(r) - c(r - problem.delta)
    den = c(r + problem.delta) - c(r)
    if (den <= 0).any():
        i = int(np.argmin(den))
        raise ValueError(f"non-positive denominator at r={r[i]:.6g}: c is flat there")
    return float((num / den).max())


@dataclass
class StepCheck:
    r_from: float
    r_to: float
    step_direct: float
    step_progressive: float
    kappa_t: float
    in_kappa_interval: bool
    kappa_t_le_kappa: bool
    step_bound_holds: bool


@dataclass
class TheoremReport:
    tv_direct: float
    tv_progressive: float
    gamma_bound: float
    kappa: float
    contraction_factor: float
    direct_bound_holds: bool
    bound_holds: bool
    strict: bool
    lam: float
    delta: float
    r_max: float
    center: str
    lag: str
    steps: list[StepCheck] = field(default_factory=list)

    def summary(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "steps"}
        d["steps_in_kappa_interval"] = sum(s.in_kappa_interval for s in self.steps)
        d["step_bounds_hold"] = all(s.step_bound_holds for s in self.steps)
        return d


def verify_theorem(problem: ScalarProblem, grid_resolution: int = 10_001,
                   check_assumptions: bool = True) -> TheoremReport:
    c = problem.center
    if check_assumptions:
        lo = min(0.0, float(problem.lagged(0.0)))
        fails = c.check(lo, problem.r_max)
        if fails:
            raise AssumptionError(fails)

    r = problem.schedule
    direct = minimizer_direct(problem, r)
    prog = minimizer_progressive(problem, r)
    tv_d, tv_p = total_variation(direct), total_variation(prog)
    k = kappa(problem, grid_resolution)
    factor = (1.0 + problem.lam * k) / (1.0 + problem.lam)

    lagged = c(problem.lagged(r))
    steps = []
    lo, hi = problem.delta, problem.r_max - problem.delta
    for t in range(len(r) - 1):
        dd = float(direct[t + 1] - direct[t])
        dl = float(lagged[t + 1] - lagged[t])
        dp = float(prog[t + 1] - prog[t])
        k_t = dl / dd if dd > 0 else 0.0
        inside = bool(lo <= r[t] <= hi)
        # |d theta_prog| <= (1 + lam k_t)/(1 + lam) * d theta_dir
        bound_t = (1.0 + problem.lam * k_t) / (1.0 + problem.lam) * dd
        steps.append(StepCheck(float(r[t]), float(r[t + 1]), dd, dp, k_t, inside,
                               k_t <= k + BOUND_TOL, abs(dp) <= bound_t + BOUND_TOL))

    strict = k < 1.0 - ASSUMPTION_TOL and tv_p < tv_d - BOUND_TOL
    return TheoremReport(
        tv_direct=tv_d, tv_progressive=tv_p, gamma_bound=c.gamma * problem.r_max, kappa=k,
        contraction_factor=factor,
        direct_bound_holds=tv_d <= c.gamma * problem.r_max + BOUND_TOL,
        bound_holds=tv_p <= factor * tv_d + BOUND_TOL,
        strict=strict, lam=problem.lam, delta=problem.delta, r_max=problem.r_max,
        center=c.name, lag=problem.lag, steps=steps,
    )


def random_convex_center(rng: np.random.Generator, r_max: float = 0.9) -> CenterFunction:
    """Draw a strictly convex, increasing center from one of three families."""
    kind = rng.integers(3)
    if kind == 0:
        return quadratic(a=float(rng.uniform(0.1, 5.0)), b=float(rng.uniform(0.0, 2.0)),
                         c0=float(rng.normal()), r_max=r_max)
    if kind == 1:
        return exponential(scale=float(rng.uniform(0.1, 3.0)), rate=float(rng.uniform(0.2, 4.0)),
                           r_max=r_max)
    return softplus(scale=float(rng.uniform(0.2, 3.0)), sharpness=float(rng.uniform(0.5, 8.0)),
                    shift=float(rng.uniform(0.0, r_max)))
