import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from progdistill import schedule as S

from conftest import PROPERTY


def test_gap_endpoints_and_midpoint():
    assert S.gap(0, 100, 0.0, 0.3) == 0.0
    assert S.gap(100, 100, 0.05, 0.3) == 0.3
    assert S.gap(50, 100, 0.0, 0.3) == pytest.approx(0.15, abs=1e-15)
    with pytest.raises(ValueError):
        S.gap(101, 100, 0.0, 0.3)


def test_tcd_endpoint_ranges():
    sched = S.TcdSchedule(T=1000)
    assert sched.bounds(0) == (0.0, 0.05)
    lo, hi = sched.bounds(1000)
    assert lo == 0.5 and hi == pytest.approx(0.9, abs=1e-15)
    rng = np.random.default_rng(0)
    for _ in range(500):
        assert 0.0 <= sched.sample(0, rng).r_stu <= 0.05
        assert 0.5 <= sched.sample(1000, rng).r_stu <= 0.9


def test_lcd_layer_examples():
    sched = S.LcdSchedule(T=100, L=12, l_min=2)
    assert S.lcd_layer(sched, 0) == 12
    assert S.lcd_layer(sched, 100) == 2
    assert S.lcd_layer(sched, 50) == 7
    # 12 - 0.25 * 10 = 9.5 rounds up
    assert S.lcd_layer(sched, 25) == 10
    with pytest.raises(ValueError):
        S.lcd_layer(sched, -1)


def test_lcd_sample_defaults():
    sched = S.LcdSchedule(T=50, L=8)
    rng = np.random.default_rng(1)
    for t in range(51):
        s = sched.sample(t, rng)
        assert 0.2 <= s.r_stu <= 0.9 and s.r_tea <= s.r_stu
        if t == 0:
            assert s.r_tea == s.r_stu


def test_lcd_fixed_layer_ablation():
    sched = S.LcdSchedule(T=10, L=8, fixed_layer=2)
    assert {S.lcd_layer(sched, t) for t in range(11)} == {2}


def test_fixed_schedule():
    f = S.FixedSchedule(T=10)
    s = f.sample(3, np.random.default_rng(0))
    assert (s.r_stu, s.r_tea, s.layer, s.gap) == (8 / 9, 8 / 9, 2, 0.0)


def test_icd_blocks_and_resets():
    sched = S.IcdSchedule(T=120, L=8, l_min=2)
    edges = sched.boundaries()
    assert len(edges) == 8 and edges[0] == 0 and edges[-1] == 120
    rng = np.random.default_rng(0)
    assert sched.sample(0, rng).layer == 8
    assert sched.sample(120, rng).layer == 2
    for b, start in enumerate(edges[:-1]):
        s = sched.sample(int(start), rng)
        assert s.layer == 8 - b
        assert 0.0 <= s.r_stu <= sched.eps
        assert s.gap == 0.0
    # within a block R_max ramps up
    b0 = [sched.block(t) for t in range(edges[0], edges[1])]
    locals_ = [loc for _, loc in b0]
    assert locals_ == sorted(locals_)


def test_icd_gap_follows_global_progress_when_not_reset():
    sched = S.IcdSchedule(T=60, L=4, l_min=2, gap_resets=False)
    s = sched.sample(30, np.random.default_rng(0))
    assert s.gap == pytest.approx(0.15)


def test_icd_reduces_to_tcd_single_block():
    icd = S.IcdSchedule(T=40, L=3, l_min=3)
    tcd = S.TcdSchedule(T=40, fixed_layer=3)
    for t in range(41):
        a = icd.sample(t, np.random.default_rng(t))
        b = tcd.sample(t, np.random.default_rng(t))
        assert a.layer == b.layer == 3
        assert a.r_stu == pytest.approx(b.r_stu, abs=1e-12)
        assert a.r_tea == pytest.approx(b.r_tea, abs=1e-12)


def test_state_invariant():
    with pytest.raises(ValueError):
        S.ScheduleState(0.3, 0.5, 2, 0.0)


@PROPERTY
@given(st.integers(1, 5000), st.floats(0.0, 0.2), st.floats(0.2, 1.0), st.floats(0.0, 0.2))
def test_tcd_monotone(T, eps, r_max, dmin):
    sched = S.TcdSchedule(T=T, eps=min(eps, r_max), r_max_final=r_max, r_min_final=r_max / 2,
                          delta_min=dmin, delta_max=dmin + 0.3)
    ts = np.linspace(0, T, 64)
    b = np.array([sched.bounds(t) for t in ts])
    g = np.array([S.gap(t, T, dmin, dmin + 0.3) for t in ts])
    assert (np.diff(b[:, 0]) >= -1e-15).all()
    assert (np.diff(b[:, 1]) >= -1e-15).all()
    assert (np.diff(g) >= -1e-15).all()
    assert (b[:, 0] <= b[:, 1] + 1e-15).all()


@PROPERTY
@given(st.integers(1, 2000), st.integers(1, 48), st.data())
def test_lcd_monotone(T, L, data):
    l_min = data.draw(st.integers(1, L))
    sched = S.LcdSchedule(T=T, L=L, l_min=l_min)
    layers = [S.lcd_layer(sched, t) for t in np.linspace(0, T, 64)]
    assert layers[0] == L and layers[-1] == l_min
    assert all(a >= b for a, b in zip(layers, layers[1:]))
    assert all(l_min <= x <= L for x in layers)


@PROPERTY
@given(st.sampled_from(["tcd", "lcd", "icd", "fixed"]), st.floats(0.0, 1.0), st.integers(0, 2**31))
def test_teacher_ratio_invariant(kind, frac, seed):
    T = 97
    sched = {"tcd": S.TcdSchedule(T=T), "lcd": S.LcdSchedule(T=T, L=6),
             "icd": S.IcdSchedule(T=T, L=6), "fixed": S.FixedSchedule(T=T)}[kind]
    s = sched.sample(frac * T, np.random.default_rng(seed))
    assert s.r_tea == pytest.approx(max(0.0, s.r_stu - s.gap), abs=1e-15)
    assert 0.0 <= s.r_tea <= s.r_stu <= 1.0
