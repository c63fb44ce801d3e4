"""Fast runtime self-test: gradient suite plus randomized invariant sweeps.

The pytest suite is the thorough version; this module is what ``selfcheck``
runs on an installed package with no test dependencies.
"""

from __future__ import annotations

import time

import numpy as np

from . import compress as C
from . import gradcheck, scalarlab
from . import tensor as T
from .compress import keep_count
from .distill import DistillConfig, consistency_loss, dual_forward
from .model import ModelConfig, ToyMLLM, loss_sft
from .schedule import LcdSchedule, TcdSchedule, lcd_layer
from .task import SyntheticTask, gen_batch


def _gradients(instances: int):
    t0 = time.perf_counter()
    worst = gradcheck.run_suite(instances)
    bad = {k: v for k, v in worst.items() if not v < gradcheck.REL_TOL}
    detail = f"max rel err {max(worst.values()):.2e} over {len(worst)} ops, {time.perf_counter() - t0:.1f}s"
    return not bad, detail + (f" failing: {sorted(bad)}" if bad else "")


def _kl(rng, n=1000):
    for _ in range(n):
        k = int(rng.integers(2, 12))
        p, q = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))
        if T.kl_divergence(T.Tensor(p), T.Tensor(q)).item() < 0:
            return False, "negative KL"
        if abs(T.kl_divergence(T.Tensor(p), T.Tensor(p)).item()) > 1e-12:
            return False, "KL(p||p) != 0"
    return True, f"{n} pairs"


def _compression(rng, n=1000):
    for _ in range(n):
        N = int(rng.integers(1, 1025))
        r = float(rng.integers(0, 101)) / 100
        seed = int(rng.integers(2**31))
        a = C.random_select(N, r, np.random.default_rng(seed))
        b = C.random_select(N, r, np.random.default_rng(seed))
        idx = a.kept_indices
        if len(idx) != keep_count(N, r) or (np.diff(idx) <= 0).any() or not np.array_equal(idx, b.kept_indices):
            return False, f"N={N} r={r}"
    return True, f"{n} (N, r) draws"


def _schedules(rng, n=1000):
    tcd = TcdSchedule(T=100)
    lcd = LcdSchedule(T=100, L=8)
    prev = None
    for t in range(0, 101):
        lo, hi = tcd.bounds(t)
        if prev is not None and (lo < prev[0] - 1e-15 or hi < prev[1] - 1e-15):
            return False, f"tcd bounds decrease at t={t}"
        prev = (lo, hi)
        if t and lcd_layer(lcd, t) > lcd_layer(lcd, t - 1):
            return False, f"lcd layer increases at t={t}"
    for _ in range(n):
        s = tcd.sample(float(rng.uniform(0, 100)), rng)
        if not 0 <= s.r_tea <= s.r_stu:
            return False, "teacher ratio out of order"
    return True, "tcd bounds, lcd layers, sample order"


def _text_and_loss(rng):
    task = SyntheticTask(n_visual=16, alphabet=16, queries=2)
    cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, ffn_dim=32, vocab_size=task.vocab_size,
                      n_visual_tokens=16, d_visual=task.d_visual, max_seq_len=task.seq_len)
    model = ToyMLLM(cfg, seed=0)
    batch = gen_batch(task, 4, rng)
    from .schedule import ScheduleState
    dc = DistillConfig()
    for r in (0.3, 0.5, 0.9):
        out = model.forward(batch, C.CompressionRequest(r, 2), compressor="random", rng=rng)
        nv = out.n_visual
        text_pos = np.arange(16, task.seq_len)
        if not (out.positions[:, -task.text_len:] == text_pos).all() or nv != keep_count(16, r):
            return False, f"text positions shifted at r={r}"
        tea, stu = dual_forward(model, batch, ScheduleState(r, r / 2, 2, r / 2), "random", rng)
        sft, kd = loss_sft(stu, batch), consistency_loss(tea, stu, batch)
        total = sft * (1 - dc.lam) + kd * dc.lam
        if abs(total.item() - ((1 - dc.lam) * sft.item() + dc.lam * kd.item())) > 1e-9:
            return False, "loss decomposition"
    return True, "text positions kept, loss identity"


def _theorem():
    prob = scalarlab.ScalarProblem.uniform(scalarlab.quadratic(), 0.5, 0.1)
    rep = scalarlab.verify_theorem(prob)
    ok = rep.bound_holds and rep.strict and abs(rep.tv_direct - 0.81) < 1e-9
    return ok, f"tv_d={rep.tv_direct:.6f} tv_p={rep.tv_progressive:.6f} kappa={rep.kappa:.6f}"


def run_all(instances: int = 50, seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    checks = [
        ("gradients", lambda: _gradients(instances)),
        ("kl", lambda: _kl(rng)),
        ("compression", lambda: _compression(rng)),
        ("schedules", lambda: _schedules(rng)),
        ("model", lambda: _text_and_loss(rng)),
        ("scalar-bound", _theorem),
    ]
    results = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:  # report, don't abort the sweep
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
