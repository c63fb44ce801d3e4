import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from progdistill import scalarlab as SL

from conftest import PROPERTY


def quad_problem(**kw):
    return SL.ScalarProblem.uniform(SL.quadratic(), 0.5, 0.1, 0.9, 10, **kw)


def test_quadratic_certificate():
    t0 = time.perf_counter()
    rep = SL.verify_theorem(quad_problem())
    assert time.perf_counter() - t0 < 1.0
    assert rep.tv_direct == pytest.approx(0.81, abs=1e-9)
    assert rep.tv_progressive < 0.81
    assert rep.bound_holds and rep.strict and rep.direct_bound_holds
    assert rep.kappa == pytest.approx(0.882352941, abs=1e-6)
    assert rep.tv_progressive <= rep.contraction_factor * rep.tv_direct + 1e-9


def test_closed_form_minimisers_by_brute_force():
    # minimise (theta - c(r))^2 + lam (theta - c(r - delta))^2 on a fine theta grid
    prob = quad_problem()
    c = prob.center
    theta = np.linspace(-0.2, 1.0, 240_001)
    for r in prob.schedule:
        obj = (theta - c(r)) ** 2 + prob.lam * (theta - c(prob.lagged(r))) ** 2
        assert theta[np.argmin(obj)] == pytest.approx(float(SL.minimizer_progressive(prob, r)), abs=1e-5)
        obj = (theta - c(r)) ** 2
        assert theta[np.argmin(obj)] == pytest.approx(float(SL.minimizer_direct(prob, r)), abs=1e-5)


def test_kappa_matches_closed_form_for_quadratic():
    # for r^2: (2r - d) / (2r + d) maximised at r = r_max - d
    prob = quad_problem()
    r = 0.9 - 0.1
    assert SL.kappa(prob) == pytest.approx((2 * r - 0.1) / (2 * r + 0.1), abs=1e-12)


def test_affine_degenerate_case():
    prob = SL.ScalarProblem.uniform(SL.affine(), 0.5, 0.1, lag="extend")
    rep = SL.verify_theorem(prob)
    assert abs(rep.tv_progressive - rep.tv_direct) <= 1e-12
    assert rep.strict is False
    assert rep.bound_holds


def test_total_variation():
    assert SL.total_variation([0, 1, 0.5, 2]) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        SL.total_variation([1.0])


def test_kappa_domain_errors():
    prob = SL.ScalarProblem.uniform(SL.quadratic(), 0.5, 0.5, 0.9)
    with pytest.raises(ValueError):
        SL.kappa(prob)
    flat = SL.CenterFunction(lambda r: np.zeros_like(r), gamma=0.0, strictly_convex=False)
    with pytest.raises(ValueError):
        SL.kappa(SL.ScalarProblem.uniform(flat, 0.5, 0.1))


def test_assumption_checks_reject_bad_centers():
    dec = SL.CenterFunction(lambda r: -r, gamma=1.0)
    with pytest.raises(SL.AssumptionError) as e:
        SL.verify_theorem(SL.ScalarProblem.uniform(dec, 0.5, 0.1))
    assert "S1" in e.value.failures
    concave = SL.CenterFunction(lambda r: np.sqrt(r + 0.01), gamma=5.0)
    assert "S3" in concave.check(0, 0.9)
    steep = SL.CenterFunction(lambda r: 3 * r, gamma=1.0)
    assert "S2" in steep.check(0, 0.9)


def test_problem_validation():
    with pytest.raises(ValueError):
        SL.ScalarProblem(SL.quadratic(), 1.5, 0.1, np.linspace(0, 0.9, 11))
    with pytest.raises(ValueError):
        SL.ScalarProblem(SL.quadratic(), 0.5, 0.1, np.array([0.1, 0.5]))
    with pytest.raises(ValueError):
        SL.ScalarProblem(SL.quadratic(), 0.5, 0.1, np.array([0.0, 0.5, 0.4]))


def test_per_step_report():
    rep = SL.verify_theorem(quad_problem())
    assert len(rep.steps) == 10
    assert all(s.step_bound_holds for s in rep.steps)
    inside = [s for s in rep.steps if s.in_kappa_interval]
    assert inside and all(s.kappa_t_le_kappa for s in inside)


def test_random_family_100_of_100():
    rng = np.random.default_rng(2024)
    held = 0
    for _ in range(100):
        c = SL.random_convex_center(rng)
        lam = float(rng.uniform(0.05, 0.95))
        delta = float(rng.uniform(0.01, 0.3))
        steps = int(rng.integers(3, 40))
        rep = SL.verify_theorem(SL.ScalarProblem.uniform(c, lam, delta, 0.9, steps))
        held += rep.bound_holds and rep.direct_bound_holds
    assert held == 100


@PROPERTY
@given(st.floats(0.1, 5.0), st.floats(0.0, 2.0), st.floats(0.05, 0.95), st.floats(0.01, 0.3),
       st.integers(2, 30))
def test_bound_property_quadratic(a, b, lam, delta, steps):
    rep = SL.verify_theorem(SL.ScalarProblem.uniform(SL.quadratic(a, b), lam, delta, 0.9, steps),
                            grid_resolution=2001)
    assert rep.bound_holds
    assert rep.tv_progressive <= rep.tv_direct + 1e-12
