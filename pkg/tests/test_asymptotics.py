import math
import time

import numpy as np
import pytest

from heavybrw.asymptotics import (
    BANDS,
    AsymptoticPrediction,
    FitError,
    VerifyDescriptor,
    band_key,
    constant_evaluators,
    estimate_h,
    fit,
    predict,
    q_identifiable,
    summary_line,
    table_cells,
    verify,
)
from heavybrw.config import tune_law
from heavybrw.kernel import build_branching, build_kernel
from heavybrw.moments import MomentSeries, MomentSolver
from heavybrw.spectral import beta_c, solve_eigenvalue

# Frozen reference values (tests/oracles/generate.py): G_0 and the
# Green-difference integral for d=1, alpha=1/2 from the polylog symbol.
G0_HALF = 0.240475500484866121884
DIFF_HALF = {1: 0.163262232772222197034, 3: 0.194817921952045097431}
# Limits of the d=1, alpha=1/2, beta=beta_c/2 moments, obtained by running
# the whole-lattice recursion to t = 400 at steps 0.05 and 0.025 and
# extrapolating in the step (independent of the closed-form evaluators).
C2_TOTAL_REF = {0: 13.8476, 1: 5.1252}
C2_LOCAL_10_REF = 0.14357


def series(t, v, quantity="total", n=1):
    return MomentSeries(quantity, n, np.asarray(t, float), np.asarray(v, float), "ODE", None, {})


@pytest.fixture(scope="module")
def sub_half():
    k = build_kernel(1, 0.5)
    law = build_branching(tune_law({0: 1.0, 2: 1.0}, 0.5 * beta_c(k), 2))
    return k, law, constant_evaluators(k, law, "subcritical")


# --- predictions


def test_prediction_examples():
    p = predict(1, 0.4, "critical", 2, "total")
    assert (p.form, p.p, p.q) == ("power_log", 3.0, 0.0)
    p = predict(1, 1.5, "subcritical", 1, "total")
    assert p.p == pytest.approx(1 / 1.5 - 1) and p.q == 0
    k = build_kernel(1, 0.5)
    law = build_branching(tune_law({0: 1.0, 2: 1.0}, 0.5 * beta_c(k), 2))
    p = predict(1, 0.5, "subcritical", 1, "local", k, law)
    assert p.p == -2.0 and p.constant_status == "known formula"
    cs = constant_evaluators(k, law)
    assert p.evaluator(1, 0) == pytest.approx(cs.C1_local_direct(1, 0), rel=1e-12)


@pytest.mark.parametrize("alpha,n,expected", [
    (1.5, 3, (-1 / 1.5, 0.0)),          # (1/2, 1): -1/alpha
    (2 / 3, 2, (-0.5, 1.0)),            # = 3/2: (-1/2, n - 1)
    (0.6, 2, ((1 / 0.6 - 2) * 3 + 1, 0.0)),  # (3/2, 2)
    (0.5, 3, (2.0, -5.0)),              # = 2: (n - 1, 1 - 2n)
])
def test_critical_local_rows(alpha, n, expected):
    p = predict(1, alpha, "critical", n, "local")
    assert (p.p, p.q) == pytest.approx(expected)


@pytest.mark.parametrize("alpha,n,expected", [
    (0.8, 2, ((1.25 - 1) * 3, 0.0)),    # (1, 3/2)
    (0.4, 4, (7.0, 0.0)),               # (2, inf)
])
def test_critical_total_rows(alpha, n, expected):
    p = predict(1, alpha, "critical", n, "total")
    assert (p.p, p.q) == pytest.approx(expected)


def test_supercritical_prediction():
    p = predict(1, 0.5, "supercritical", 2, "local")
    assert p.form == "exponential" and p.rate_multiple == 2


def test_prediction_errors():
    with pytest.raises(ValueError):
        predict(1, 2.5, "critical", 1, "total")
    with pytest.raises(ValueError):
        predict(1, 0.5, "critical", 0, "total")
    with pytest.raises(ValueError):
        predict(1, 0.5, "nearly", 1, "total")
    with pytest.raises(ValueError):
        predict(1, 0.5, "critical", 1, "density")
    with pytest.raises(ValueError):
        AsymptoticPrediction("power_log", math.inf, 0.0)
    with pytest.raises(ValueError):
        AsymptoticPrediction("power_log", 1.0, 0.0, constant_status="known formula")


def test_table_complete_and_fast():
    start = time.perf_counter()
    preds = [(band, regime, quantity, predict(d, a, regime, n, quantity))
             for band, d, a, regime, quantity, n in table_cells(4)]
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    seen = {(band, regime, quantity) for band, regime, quantity, _ in preds}
    for regime in ("critical", "subcritical", "supercritical"):
        for band in BANDS:
            for quantity in ("local", "total"):
                assert (regime, band, quantity) in {(r, b, q) for b, r, q in seen}
    for _, regime, _, p in preds:
        if regime != "supercritical":
            assert math.isfinite(p.p) and math.isfinite(p.q)


def test_subcritical_order_independent():
    for band, d, a, regime, quantity, n in table_cells(4):
        if regime == "subcritical":
            p = predict(d, a, regime, n, quantity)
            base = predict(d, a, regime, 1, quantity)
            assert (p.form, p.p, p.q) == (base.form, base.p, base.q)


def test_band_keys():
    assert band_key(1.0) == "=1" and band_key(1.5) == "=3/2" and band_key(2.0) == "=2"
    assert band_key(0.7) == "(1/2,1)" and band_key(1.7) == "(3/2,2)" and band_key(9) == "(2,inf)"
    # each row is returned verbatim on its own side of an edge
    below = predict(1, 1 / 1.4999, "critical", 2, "local")
    at = predict(1, 2 / 3, "critical", 2, "local")
    assert below.q == 0 and at.q == 1


# --- constants


def test_g_values(sub_half):
    k, law, cs = sub_half
    assert cs.g(0) == 1.0
    assert cs.g(3) == pytest.approx(cs.g(-3), rel=1e-14)
    assert cs.g(1) == pytest.approx(1 - law.beta * DIFF_HALF[1], rel=1e-10)


def test_first_constants_from_oracle(sub_half):
    k, law, cs = sub_half
    denom = 1 - law.beta * G0_HALF
    assert denom == pytest.approx(0.5, rel=1e-10)
    assert cs.C1(0) == pytest.approx(1 / denom, rel=1e-10)
    for x, diff in DIFF_HALF.items():
        assert cs.C1(x) == pytest.approx((1 - law.beta * diff) / denom, rel=1e-10)


def test_beta_zero_constant():
    k = build_kernel(1, 0.5)
    cs = constant_evaluators(k, build_branching({0: 1.0, 2: 1.0}))
    assert cs.C1(0) == 1.0 and cs.C1(4) == 1.0


def test_chi_two(sub_half):
    k, law, cs = sub_half
    for x in (0, 1):
        assert cs.chi_n(2, x) == pytest.approx(law.factorial_moment(2) * cs.C1(x) ** 2, rel=1e-14)


def test_local_constant_two_forms_agree(sub_half):
    k, law, cs = sub_half
    for x, y in ((0, 0), (1, 0), (3, 1)):
        assert cs.C1_local(x, y) == pytest.approx(cs.C1_local_direct(x, y), rel=1e-12)


def test_higher_total_constant(sub_half):
    k, law, cs = sub_half
    for x, ref in C2_TOTAL_REF.items():
        assert cs.C_n_total(2, x) == pytest.approx(ref, rel=2e-4)
    # the chi_n form disagrees with the recursion limit away from the source
    assert abs(cs.C_n_total_chi(2, 1) / C2_TOTAL_REF[1] - 1) > 0.1


def test_higher_total_constant_against_solver(sub_half):
    k, law, cs = sub_half
    sol = MomentSolver(k, law, None, np.arange(8001) * 0.05, "volterra", refine_check=False)
    for x in (0, 1):
        assert sol.mn_total(x, 2).values[-1] == pytest.approx(cs.C_n_total(2, x), rel=0.02)
        assert sol.m1_total(x).values[-1] == pytest.approx(cs.C1(x), rel=0.02)


def test_higher_local_constant(sub_half):
    k, law, cs = sub_half
    cv = cs.C_n_local(2, 1, 0)
    assert cv.value == pytest.approx(C2_LOCAL_10_REF, rel=1e-3)
    assert cv.error < 1e-2 * cv.value and cv.cutoff == 400.0 and cv.tail_bound >= 0


@pytest.mark.parametrize("alpha", [0.8, 0.4])
def test_critical_constants_converge(alpha):
    k = build_kernel(1, alpha)
    law = build_branching(tune_law({0: 1.0, 2: 1.0}, beta_c(k), 2))
    cs = constant_evaluators(k, law, "critical")
    sol = MomentSolver(k, law, None, np.arange(10001) * 0.1, "volterra", refine_check=False)
    p = predict(1, alpha, "critical", 1, "total")
    t = sol.grid[-1]
    for x in (0, 2):
        ratio = sol.m1_total(x).values[-1] / (cs.critical_total(x) * t**p.p)
        assert ratio == pytest.approx(1.0, rel=0.03)


def test_supercritical_constants():
    k = build_kernel(1, 0.5)
    beta = 2 * beta_c(k)
    law = build_branching(tune_law({0: 1.0, 2: 1.0}, beta, 2))
    cs = constant_evaluators(k, law, "supercritical")
    assert cs.lambda0() == pytest.approx(solve_eigenvalue(k, beta), rel=1e-14)
    assert cs.c(2, 5) == pytest.approx(cs.c(5, 2), rel=1e-14)
    sol = MomentSolver(k, law, None, np.arange(801) * 0.01, "volterra", refine_check=False)
    t = sol.grid[-1]
    m = sol.m1_local(0, 0).values[-1]
    assert m * math.exp(-cs.lambda0() * t) == pytest.approx(cs.c(0, 0), rel=0.05)


def test_estimate_h(k1_one):
    sol = MomentSolver(k1_one, None, None, np.arange(4001) * 0.05, "volterra")
    hv = estimate_h(sol.transition(0, 0), k1_one.ratio)
    assert hv.value == pytest.approx(k1_one.h_constant(), rel=0.02)


def test_divergent_subcritical_inputs():
    k = build_kernel(1, 0.5)
    law = build_branching(tune_law({0: 1.0, 2: 1.0}, 2 * beta_c(k), 2))
    with pytest.raises(ValueError):
        constant_evaluators(k, law).C1(0)
    with pytest.raises(ValueError):
        constant_evaluators(k, law, "hyper")


# --- fitting


def test_fit_power_exact():
    t = np.linspace(1, 100, 200)
    rep = fit(series(t, 3.0 * t**0.25), "power_log")
    assert rep.p_hat == pytest.approx(0.25, abs=1e-10)
    assert rep.q_hat == pytest.approx(0.0, abs=1e-10)


def test_fit_exponential_exact():
    t = np.linspace(0, 20, 100)
    rep = fit(series(t, 2.0 * np.exp(0.3 * t)), "exponential", expected={"rate": 0.3})
    assert rep.rate_hat == pytest.approx(0.3, abs=1e-10) and rep.verdict == "pass"


def test_fit_log_correction():
    t = np.geomspace(math.e**2, math.e**6, 300)
    rep = fit(series(t, t**-1.0 * np.log(t) ** -2.0), "power_log", window=(math.e**2, math.e**6))
    assert rep.q_fitted
    assert rep.p_hat == pytest.approx(-1.0, abs=0.02)
    assert rep.q_hat == pytest.approx(-2.0, abs=0.1)


def test_fit_constant_limit():
    t = np.linspace(1, 100, 400)
    rep = fit(series(t, 1.5 + 1e-4 / t), "constant_limit", expected={"limit": 1.5})
    assert rep.limit_hat == pytest.approx(1.5, rel=1e-4) and rep.verdict == "pass"
    rep = fit(series(t, 1.6 + 0 * t), "constant_limit", expected={"limit": 1.5})
    assert rep.verdict == "fail"


def test_fit_errors():
    t = np.linspace(1, 10, 50)
    with pytest.raises(FitError):
        fit(series(t, np.where(t > 5, 0.0, 1.0)), "power_log")
    with pytest.raises(FitError):
        fit(series(t, t), "power_log", window=(2, 3))
    with pytest.raises(FitError):
        fit(series(t, t), "power_log", window=(5, 10), fit_q=True)
    assert not q_identifiable(5, 10) and q_identifiable(math.e**2, math.e**6)


def test_fit_pins_log_exponent():
    t = np.linspace(10, 30, 200)
    pred = AsymptoticPrediction("power_log", -0.5, 1.0)
    rep = fit(series(t, t**-0.5 * np.log(t)), "power_log", window=(10, 30), prediction=pred)
    assert not rep.q_fitted and rep.q_hat == 1.0
    assert rep.p_hat == pytest.approx(-0.5, abs=1e-10) and rep.verdict == "pass"


def test_report_rows():
    t = np.linspace(1, 50, 100)
    rep = fit(series(t, t**2), "power_log", prediction=AsymptoticPrediction("power_log", 2.0, 0.0))
    row = rep.row()
    assert row["verdict"] == "pass" and row["p_hat"] == pytest.approx(2.0)
    assert summary_line([rep]).startswith("PASS")


# --- verification


def test_verify_beta_zero_total():
    k = build_kernel(1, 0.5)
    reps = verify(k, build_branching({}), VerifyDescriptor(quantities=("total",), t_max=50, step=0.1,
                                                            tolerances={"constant": 0.01}))
    assert len(reps) == 1 and reps[0].verdict == "pass"
    assert reps[0].limit_hat == pytest.approx(1.0, abs=1e-9)


def test_verify_critical_first_total():
    k = build_kernel(1, 0.8)
    law = build_branching(tune_law({0: 1.0, 2: 1.0}, beta_c(k), 2))
    reps = verify(k, law, VerifyDescriptor(t_max=2000, step=0.25))
    assert reps[0].verdict == "pass"
    assert reps[0].p_hat == pytest.approx(0.25, rel=0.15)


def test_verify_supercritical_rate():
    k = build_kernel(1, 0.5)
    beta = 2 * beta_c(k)
    law = build_branching(tune_law({0: 1.0, 2: 1.0}, beta, 2))
    reps = verify(k, law, VerifyDescriptor(quantities=("local", "total"), t_max=50, step=0.05,
                                           window=(25, 50)))
    lam0 = solve_eigenvalue(k, beta)
    for r in reps:
        assert r.verdict == "pass"
        assert r.rate_hat == pytest.approx(lam0, rel=0.05)


def test_verify_critical_suite_higher_orders():
    k = build_kernel(1, 0.4)
    law = build_branching(tune_law({0: 1.0, 2: 1.0}, beta_c(k), 2))
    reps = verify(k, law, VerifyDescriptor(quantities=("total",), n_range=(1, 3), t_max=1000, step=0.1))
    assert [r.verdict for r in reps] == ["pass"] * 3
    for n, r in enumerate(reps, start=1):
        assert r.p_hat == pytest.approx(2 * n - 1, rel=0.15)


def test_verify_descriptor_validation():
    with pytest.raises(ValueError):
        VerifyDescriptor(quantities=("mass",))
    with pytest.raises(ValueError):
        VerifyDescriptor(n_range=(2, 1))
    with pytest.raises(ValueError):
        VerifyDescriptor(method="guess")
