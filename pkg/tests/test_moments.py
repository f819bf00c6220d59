import math

import numpy as np
import pytest

from heavybrw.asymptotics import fit, predict
from heavybrw.config import tune_law
from heavybrw.kernel import build_branching, build_kernel
from heavybrw.moments import (
    BoxTooSmall,
    MomentSolver,
    TruncatedLattice,
    convolve,
    m1_local,
    m1_total,
    mn_local,
    mn_total,
    transition_probability,
)
from heavybrw.spectral import beta_c, green


def uniform(t_max, n):
    return np.linspace(0.0, t_max, n + 1)


# --- lattice


def test_lattice_index_roundtrip():
    lat = TruncatedLattice(2, 3)
    assert lat.size == 49
    for i in range(lat.size):
        assert lat.index(lat.point(i)) == i
    assert lat.point(lat.origin) == (0, 0)
    assert lat.contains((3, -3)) and not lat.contains((4, 0))


# --- transition probabilities


def test_initial_condition_and_conservation(k1_half):
    lat = TruncatedLattice(1, 50)
    grid = uniform(10, 100)
    s = transition_probability(k1_half, lat, grid, 0, 0)
    assert s.values[0] == pytest.approx(1.0, abs=1e-12)
    assert transition_probability(k1_half, lat, grid, 3, 0).values[0] == pytest.approx(0.0, abs=1e-12)
    # total box mass from 0 plus the absorbed mass is 1
    assert np.max(np.abs(s.diagnostics["mass"] + s.leak - 1.0)) <= 1e-8
    assert np.all(np.diff(s.leak) >= -1e-14)


def test_degenerate_box(k1_one):
    grid = uniform(2, 20)
    s = transition_probability(k1_one, TruncatedLattice(1, 0), grid)
    assert np.allclose(s.values, np.exp(k1_one.a0 * grid), rtol=1e-12)


def test_rk_matches_eigen(k1_half):
    lat = TruncatedLattice(1, 40)
    grid = uniform(5, 50)
    a = transition_probability(k1_half, lat, grid, 2, 0)
    b = transition_probability(k1_half, lat, grid, 2, 0, solver="rk")
    assert np.max(np.abs(a.values - b.values)) < 1e-9
    assert np.max(np.abs(a.leak - b.leak)) < 1e-9


def test_transition_decay_slope(k1_one):
    grid = np.concatenate([[0.0], np.geomspace(1, 100, 60)])
    s = transition_probability(k1_one, TruncatedLattice(1, 2000), grid)
    rep = fit(s, "power_log", (10, 100))
    assert rep.p_hat == pytest.approx(-1.0, abs=0.1)


def test_volterra_transition_matches_box(k1_three_halves):
    # alpha = 3/2 keeps the boundary leak of a 1000-box below 1e-4 up to t = 20
    grid = np.arange(401) * 0.05
    v = MomentSolver(k1_three_halves, None, None, grid, "volterra").transition(1, 0)
    b = MomentSolver(k1_three_halves, None, TruncatedLattice(1, 1000), grid, "eigen",
                     trunc_check=False).transition(1, 0)
    assert np.max(np.abs(v.values - b.values)) < 1e-5


# --- first moments


def test_beta_zero_local_is_transition(k1_half):
    lat = TruncatedLattice(1, 60)
    grid = uniform(10, 50)
    law = build_branching({0: 1.0, 2: 1.0})
    assert np.array_equal(m1_local(k1_half, law, lat, grid, 2, 0).values,
                          transition_probability(k1_half, lat, grid, 2, 0).values)


def test_beta_zero_total_is_one(k1_half, binary_law):
    grid = np.arange(201) * 0.1
    s = MomentSolver(k1_half, binary_law, None, grid, "volterra").m1_total(3)
    assert np.allclose(s.values, 1.0, atol=1e-12)
    s = m1_total(k1_half, binary_law, TruncatedLattice(1, 400), grid)
    assert np.max(np.abs(s.values + s.leak - 1.0)) < 1e-8


def test_integral_equation_consistency(k1_one):
    # m1(t,x,0) - p(t,x,0) - beta int p(t-s,x,0) m1(s,0,0) ds = 0 and
    # m1(t,x) + leak(t,x) - 1 - beta int m1(s,x,0) ds = 0 on a uniform grid of
    # 1000 steps, where leak is the mean mass absorbed at the box boundary
    law = build_branching({2: 0.6})
    beta = law.beta
    lat = TruncatedLattice(1, 300)
    grid = uniform(5, 1000)
    sol = MomentSolver(k1_one, law, lat, grid, "eigen", trunc_check=False)
    p = MomentSolver(k1_one, None, lat, grid, "eigen", trunc_check=False)
    for x in (0, 2):
        m1 = sol.m1_local(x, 0).values
        conv = convolve(p.transition(x, 0).values, sol.m1_local(0, 0).values, grid)
        assert np.max(np.abs(m1 - p.transition(x, 0).values - beta * conv)) <= 1e-4
        cum = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(grid) * (m1[1:] + m1[:-1]))])
        tot = sol.m1_total(x)
        assert np.max(np.abs(tot.values + tot.leak - 1 - beta * cum)) <= 1e-4


def test_source_roles_symmetric(k1_half):
    law = build_branching(tune_law({0: 1.0, 2: 1.0}, 0.5 * beta_c(k1_half), 2))
    grid = uniform(10, 100)
    sol = MomentSolver(k1_half, law, TruncatedLattice(1, 200), grid, "eigen", trunc_check=False)
    assert np.max(np.abs(sol.m1_local(3, 0).values - sol.m1_local(0, 3).values)) <= 1e-4
    v = MomentSolver(k1_half, law, None, np.arange(201) * 0.05, "volterra")
    assert np.max(np.abs(v.m1_local(3, 0).values - v.m1_local(0, 3).values)) <= 1e-4


def test_total_monotone_for_positive_beta(k1_half):
    law = build_branching(tune_law({0: 1.0, 2: 1.0}, 0.5 * beta_c(k1_half), 2))
    s = MomentSolver(k1_half, law, None, np.arange(801) * 0.05, "volterra").m1_total(1)
    assert np.all(np.diff(s.values) >= 0)


def test_laplace_transform_identity(k1_half):
    # int e^{-lam t} m1(t,x,0) dt = G_lam(x,0) / (1 - beta G_lam(0,0))
    law = build_branching(tune_law({0: 1.0, 2: 1.0}, 0.5 * beta_c(k1_half), 2))
    grid = np.arange(12001) * 0.005
    sol = MomentSolver(k1_half, law, None, grid, "volterra", refine_check=False)
    lam = 1.0
    for x in (0, 2):
        lhs = np.trapezoid(np.exp(-lam * grid) * sol.m1_local(x, 0).values, grid)
        rhs = green(k1_half, lam, x, 0).value / (1 - law.beta * green(k1_half, lam).value)
        assert lhs == pytest.approx(rhs, rel=1e-4)


def test_supercritical_rate(k1_half):
    from heavybrw.spectral import solve_eigenvalue

    beta = 2 * beta_c(k1_half)
    lam0 = solve_eigenvalue(k1_half, beta)
    law = build_branching(tune_law({0: 1.0, 2: 1.0}, beta, 2))
    s = m1_local(k1_half, law, TruncatedLattice(1, 200), uniform(50, 100), 0, 0)
    assert math.log(s.values[-1]) / 50 == pytest.approx(lam0, rel=0.05)


def test_truncation_diff_reported(k1_three_halves):
    law = build_branching({2: 0.2})
    s = m1_local(k1_three_halves, law, TruncatedLattice(1, 400), uniform(20, 40), 0, 0)
    assert s.trunc_diff is not None and s.trunc_diff < 0.01
    assert s.truncation_radius == 400


def test_leak_budget(k1_half):
    grid = uniform(50, 20)
    with pytest.raises(BoxTooSmall):
        transition_probability(k1_half, TruncatedLattice(1, 5), grid, leak_budget=0.01)


# --- higher moments


def test_no_higher_branching_means_equal_moments(k1_half):
    law = build_branching({0: 0.7})  # beta^(r) = 0 for r >= 2
    grid = np.arange(201) * 0.05
    sol = MomentSolver(k1_half, law, None, grid, "volterra")
    for n in (2, 3):
        assert np.array_equal(sol.mn_total(1, n).values, sol.m1_total(1).values)
        assert np.array_equal(sol.mn_local(1, 0, n).values, sol.m1_local(1, 0).values)
    lat = TruncatedLattice(1, 50)
    assert np.array_equal(mn_local(k1_half, law, lat, grid, 0, 0, 3).values,
                          m1_local(k1_half, law, lat, grid, 0, 0).values)


def test_second_moment_initial_and_ordering(k1_one, binary_law):
    grid = np.arange(201) * 0.05
    sol = MomentSolver(k1_one, binary_law, None, grid, "volterra")
    m1, m2, m3 = (sol.mn_local(0, 0, n).values for n in (1, 2, 3))
    assert m2[0] == pytest.approx(1.0) and sol.mn_local(2, 0, 2).values[0] == 0.0
    assert sol.mn_total(0, 2).values[0] == pytest.approx(1.0)
    assert np.all(m2 >= m1 - 1e-8) and np.all(m3 >= m2 - 1e-8)
    t1, t2 = sol.m1_total(0).values, sol.mn_total(0, 2).values
    assert np.all(t2 >= t1 - 1e-8)


def test_second_moment_formula(k1_one, binary_law):
    # m2(t,0,0) = m1 + 2 int m1(t-s,0,0) m1(s,0,0)^2 ds for beta = 0, beta^(2) = 2
    grid = uniform(10, 4000)
    lat = TruncatedLattice(1, 400)
    m1 = transition_probability(k1_one, lat, grid).values
    m2 = mn_local(k1_one, binary_law, lat, grid, 0, 0, 2).values
    assert np.max(np.abs(m2 - m1 - 2 * convolve(m1, m1**2, grid))) < 1e-12


def test_volterra_and_box_agree(k1_three_halves):
    law = build_branching({0: 0.5, 2: 0.6})  # beta = 0.7, beta^(2) = 1.2
    grid = np.arange(801) * 0.025
    v = MomentSolver(k1_three_halves, law, None, grid, "volterra")
    b = MomentSolver(k1_three_halves, law, TruncatedLattice(1, 1500), grid, "eigen", trunc_check=False)
    for get in (lambda s: s.mn_local(1, 0, 2), lambda s: s.mn_total(0, 2), lambda s: s.mn_total(2, 3)):
        a, c = get(v).values[1:], get(b).values[1:]
        assert np.max(np.abs(a - c) / c) < 2e-3


def test_critical_second_total_moment_slope():
    k = build_kernel(1, 0.4)
    law = build_branching(tune_law({0: 1.0, 2: 1.0}, beta_c(k), 2))
    s = MomentSolver(k, law, None, np.arange(5001) * 0.1, "volterra", refine_check=False).mn_total(0, 2)
    rep = fit(s, "power_log", prediction=predict(1, 0.4, "critical", 2, "total"))
    assert rep.p_hat == pytest.approx(3.0, rel=0.15)
    assert rep.verdict == "pass"


def test_volterra_grid_checks(k1_half):
    with pytest.raises(ValueError):
        MomentSolver(k1_half, None, None, np.geomspace(1e-3, 1, 10), "volterra")
    with pytest.raises(ValueError):
        MomentSolver(k1_half, None, None, uniform(1, 10), "eigen")


# --- convolution


def test_convolve_constants():
    t = uniform(3, 30)
    assert np.allclose(convolve(np.ones_like(t), np.ones_like(t), t), t, rtol=0, atol=1e-14)


def test_convolve_linear():
    t = uniform(2, 200)
    out = convolve(t, np.ones_like(t), t)
    assert np.max(np.abs(out - t**2 / 2)) < (t[1] ** 2)


def test_convolve_exponential():
    t = uniform(1, 999)
    out, err = convolve(np.exp(t), np.exp(t), t, return_error=True)
    exact = t * np.exp(t)
    assert np.max(np.abs(out[1:] - exact[1:]) / exact[1:]) < 1e-4
    assert np.all(err >= 0)


def test_convolve_graded_grid():
    t = np.concatenate([[0.0], np.geomspace(1e-3, 2, 400)])
    out = convolve(np.ones_like(t), t, t)
    assert np.max(np.abs(out - t**2 / 2)) < 1e-4


def test_convolve_rejects_mismatch():
    with pytest.raises(ValueError):
        convolve(np.ones(3), np.ones(4), np.arange(3.0))
    with pytest.raises(ValueError):
        convolve(np.ones(3), np.ones(3), np.arange(1.0, 4.0))


def test_functional_total(k1_half, binary_law):
    lat = TruncatedLattice(1, 30)
    s = mn_total(k1_half, binary_law, lat, uniform(1, 10), 0, 2)
    assert s.provenance == "ODE" and s.quantity == "total" and s.n == 2
