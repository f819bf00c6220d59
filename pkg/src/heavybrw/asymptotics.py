"""Predicted large-time behaviour of the moments and empirical exponent fits.

Forms: power_log C t^p (ln t)^q, exponential C e^(rate t), constant_limit C.
Constants are built from these quantities, with r = d/alpha:

* h: p(t,0,0) ~ h t^(-r).
* gamma: G_0(0,0) - G_lambda(0,0) ~ gamma lambda^(r-1) as lambda -> 0
  (times ln(1/lambda) when r = 2). gamma = h Gamma(2-r)/(r-1) for r in (1,2),
  gamma = h for r = 2, gamma = int_0^inf t p(t,0,0) dt = sum_x G_0(x,0)^2 for r > 2.
* g(x) = 1 - beta int_0^inf (p(t,0,0) - p(t,x,0)) dt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .kernel import BranchingLaw, TransitionKernel, g_n
from .moments import MomentSeries, MomentSolver, TruncatedLattice
from .spectral import (
    DivergentIntegral,
    classify,
    green_difference,
    green_values,
    l2_norm_squared,
    solve_eigenvalue,
)

__all__ = [
    "AsymptoticPrediction",
    "ConstantSet",
    "ConstantValue",
    "FitError",
    "FitReport",
    "VerifyDescriptor",
    "band_key",
    "constant_evaluators",
    "estimate_h",
    "fit",
    "predict",
    "q_identifiable",
    "table_cells",
    "verify",
]

REGIMES = ("subcritical", "critical", "supercritical")
QUANTITIES = ("local", "total")
FORMS = ("power_log", "exponential", "constant_limit")
BANDS = ("(1/2,1)", "=1", "(1,3/2)", "=3/2", "(3/2,2)", "=2", "(2,inf)")
EDGE_TOL = 1e-12
Q_SPAN_MIN = 0.5  # minimum ln(ln t2 / ln t1) for a joint (p, q) fit
MIN_POINTS = 10
DEFAULT_TOL = {"exponent": 0.15, "constant": 0.02, "rate": 0.05}


class FitError(ValueError):
    """The series cannot be fitted on the requested window."""


# ---------------------------------------------------------------------------
# predictions


@dataclass(frozen=True, eq=False)
class AsymptoticPrediction:
    form: str
    p: float = 0.0
    q: float = 0.0
    rate_multiple: int = 0  # exponential rate = rate_multiple * lambda_0
    constant_status: str = "unknown"  # "known formula" | "estimable" | "unknown"
    evaluator: Callable | None = None
    source_theorem: str = ""
    band: str = ""
    regime: str = ""
    quantity: str = ""
    n: int = 1

    def __post_init__(self):
        if self.form not in FORMS:
            raise ValueError(f"unknown form {self.form!r}")
        if not (math.isfinite(self.p) and math.isfinite(self.q)):
            raise ValueError("exponents must be finite")
        if self.constant_status not in ("known formula", "estimable", "unknown"):
            raise ValueError(f"unknown constant status {self.constant_status!r}")
        if self.constant_status == "known formula" and self.evaluator is None:
            raise ValueError("a known-formula constant needs an evaluator")

    def describe(self) -> str:
        if self.form == "exponential":
            k = "" if self.rate_multiple == 1 else f"{self.rate_multiple}*"
            return f"C*exp({k}lambda0*t)"
        if self.form == "constant_limit":
            return "C"
        parts = ["C"]
        if self.p != 0:
            parts.append(f"t^{self.p:g}")
        if self.q != 0:
            parts.append(f"(ln t)^{self.q:g}")
        return "*".join(parts)


def band_key(ratio: float) -> str:
    """Band of d/alpha used by the tables: an open interval or an exact edge."""
    if not math.isfinite(ratio) or ratio <= 0.5:
        raise ValueError(f"d/alpha = {ratio:g} is outside (1/2, inf)")
    for edge, name in ((1.0, "=1"), (1.5, "=3/2"), (2.0, "=2")):
        if abs(ratio - edge) <= EDGE_TOL:
            return name
    if ratio < 1:
        return "(1/2,1)"
    if ratio < 1.5:
        return "(1,3/2)"
    if ratio < 2:
        return "(3/2,2)"
    return "(2,inf)"


def _critical_exponents(r: float, alpha: float, n: int, quantity: str, band: str) -> tuple[float, float]:
    if quantity == "local":
        if band == "(1/2,1)":
            return -1.0 / alpha, 0.0
        if band == "=1":
            return -1.0, 0.0
        if band == "(1,3/2)":
            return r - 2.0, 0.0
        if band == "=3/2":
            return -0.5, n - 1.0
        if band == "(3/2,2)":
            return (r - 2.0) * (2 * n - 1) + n - 1.0, 0.0
        if band == "=2":
            return n - 1.0, 1.0 - 2 * n
        return n - 1.0, 0.0
    if band == "(1/2,1)":
        return (1.0 - 1.0 / alpha) * (n - 1), 0.0
    if band == "=1":
        return 0.0, n - 1.0
    if band in ("(1,3/2)", "=3/2", "(3/2,2)"):
        return (r - 1.0) * (2 * n - 1), 0.0
    if band == "=2":
        return 2.0 * n - 1, 1.0 - 2 * n
    return 2.0 * n - 1, 0.0


def _subcritical_exponents(r: float, alpha: float, quantity: str, band: str) -> tuple[str, float, float]:
    if quantity == "total":
        if band == "(1/2,1)":
            return "power_log", 1.0 / alpha - 1.0, 0.0
        if band == "=1":
            return "power_log", 0.0, -1.0
        return "constant_limit", 0.0, 0.0
    if band == "(1/2,1)":
        return "power_log", 1.0 / alpha - 2.0, 0.0
    if band == "=1":
        return "power_log", -1.0, -2.0
    return "power_log", -r, 0.0


def predict(d: int, alpha: float, regime: str, n: int, quantity: str,
            kernel: TransitionKernel | None = None, law: BranchingLaw | None = None) -> AsymptoticPrediction:
    """Table entry for (regime, band of d/alpha, n, quantity).

    With ``kernel`` and ``law`` the prediction carries an evaluator for its
    constant whenever one exists. Evaluators are lazy.
    """
    if isinstance(d, bool) or int(d) != d or d < 1:
        raise ValueError("d must be a positive integer")
    if not (0 < alpha < 2):
        raise ValueError("alpha must lie in (0, 2)")
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}")
    if quantity not in QUANTITIES:
        raise ValueError(f"quantity must be one of {QUANTITIES}")
    if isinstance(n, bool) or int(n) != n or n < 1:
        raise ValueError("n must be a positive integer")
    n = int(n)
    r = d / alpha
    band = band_key(r)
    cs = None
    if kernel is not None and law is not None:
        if kernel.d != d or abs(kernel.alpha - alpha) > 1e-15:
            raise ValueError("kernel does not match (d, alpha)")
        cs = constant_evaluators(kernel, law, regime)
    common = dict(band=band, regime=regime, quantity=quantity, n=n)

    if regime == "supercritical":
        ev, status = None, "unknown"
        if n == 1 and cs is not None:
            ev = cs.c if quantity == "local" else cs.c_total
            status = "known formula"
        return AsymptoticPrediction("exponential", rate_multiple=n, constant_status=status,
                                    evaluator=ev, source_theorem="supercritical-growth", **common)

    if regime == "critical":
        p, q = _critical_exponents(r, alpha, n, quantity, band)
        ev, status = None, "unknown"
        if n == 1 and cs is not None:
            ev = cs.critical_local if quantity == "local" else cs.critical_total
            status = "known formula"
        tag = "critical-first-moment" if n == 1 else "critical-higher-moments"
        return AsymptoticPrediction("power_log", p, q, constant_status=status, evaluator=ev,
                                    source_theorem=f"{tag}-{quantity}", **common)

    form, p, q = _subcritical_exponents(r, alpha, quantity, band)
    ev, status = None, "unknown"
    if cs is not None:
        if quantity == "total":
            ev = cs.C1 if n == 1 else (lambda x=0, _n=n: cs.C_n_total(_n, x))
            status = "known formula"
        elif n == 1:
            ev, status = cs.C1_local, "known formula"
        else:
            ev = lambda x=0, y=0, _n=n: cs.C_n_local(_n, x, y).value  # noqa: E731
            status = "estimable"
    tag = "subcritical-first-moment" if n == 1 else "subcritical-higher-moments"
    return AsymptoticPrediction(form, p, q, constant_status=status, evaluator=ev,
                                source_theorem=f"{tag}-{quantity}", **common)


def table_cells(n_max: int = 4):
    """Representative (d, alpha) for every band, crossed with regime, quantity and n."""
    reps = {"(1/2,1)": (1, 1.5), "=1": (1, 1.0), "(1,3/2)": (1, 0.8), "=3/2": (1, 2.0 / 3.0),
            "(3/2,2)": (1, 0.6), "=2": (1, 0.5), "(2,inf)": (1, 0.4)}
    for band in BANDS:
        d, a = reps[band]
        for regime in REGIMES:
            for quantity in QUANTITIES:
                for n in range(1, n_max + 1):
                    yield band, d, a, regime, quantity, n


# ---------------------------------------------------------------------------
# constants


@dataclass(frozen=True)
class ConstantValue:
    value: float
    error: float = 0.0
    method: str = ""
    cutoff: float | None = None
    tail_bound: float | None = None


def _gamma_constant(kernel: TransitionKernel) -> float:
    r = kernel.ratio
    h = kernel.h_constant()
    if r <= 1:
        return h * math.gamma(1 - 1 / kernel.alpha) if r < 1 - EDGE_TOL else h
    if r < 2 - EDGE_TOL:
        return h * math.gamma(2 - r) / (r - 1)
    if r <= 2 + EDGE_TOL:
        return h
    d = kernel.d
    return float(green_values(kernel, 0.0, np.zeros((1, d)), power=2)[0][0])


class ConstantSet:
    """Lazy evaluators for the constants of one (kernel, law) pair.

    Methods take lattice points; a scalar 0 denotes the origin in any d.
    """

    def __init__(self, kernel: TransitionKernel, law: BranchingLaw, regime: str | None = None):
        self.kernel = kernel
        self.law = law
        self.beta = law.beta
        self.regime = regime
        self._memo: dict = {}

    # --- helpers

    def _key(self, x) -> tuple:
        a = np.atleast_1d(np.asarray(x, dtype=float))
        if a.size == 1 and self.kernel.d > 1:
            if a[0] != 0:
                raise ValueError("a scalar point only denotes the origin")
            a = np.zeros(self.kernel.d)
        if a.shape != (self.kernel.d,):
            raise ValueError(f"expected a point with {self.kernel.d} coordinates")
        return tuple(int(v) for v in a)

    def _cached(self, key, fn):
        if key not in self._memo:
            self._memo[key] = fn()
        return self._memo[key]

    def _need_transient(self, what: str) -> None:
        if self.kernel.ratio <= 1:
            raise DivergentIntegral(f"{what} diverges for d/alpha <= 1 (recurrent walk)")

    # --- walk constants

    def h(self) -> float:
        return self._cached("h", self.kernel.h_constant)

    def gamma(self) -> float:
        return self._cached("gamma", lambda: _gamma_constant(self.kernel))

    def G0(self, x=0) -> float:
        self._need_transient("G_0")
        k = self._key(x)
        return self._cached(("G0", k), lambda: float(
            green_values(self.kernel, 0.0, np.array([k], dtype=float))[0][0]))

    def g(self, x=0) -> float:
        k = self._key(x)
        if not any(k):
            return 1.0
        return self._cached(("g", k), lambda: 1.0 - self.beta * green_difference(self.kernel, k)[0])

    # --- subcritical

    def _check_sub(self) -> None:
        if self.kernel.ratio > 1 and not 1 - self.beta * self.G0() > 0:
            raise ValueError("subcritical constants need beta < beta_c")
        if self.kernel.ratio <= 1 and not self.beta < 0:
            raise ValueError("subcritical constants need beta < 0 when d/alpha <= 1")

    def C1(self, x=0) -> float:
        """Limit of m_1(t,x)/v_1(t) in the subcritical regime."""
        self._check_sub()
        r, a, b = self.kernel.ratio, self.kernel.alpha, self.beta
        if r > 1 + EDGE_TOL:
            return self.g(x) / (1 - b * self.G0())
        return self.g(x) * (-1.0 / (b * self.gamma() * math.gamma(1 / a)))

    def C1_local(self, x=0, y=0) -> float:
        """Limit of m_1(t,x,y)/u_1(t) in the subcritical regime."""
        self._check_sub()
        r, a, b = self.kernel.ratio, self.kernel.alpha, self.beta
        if r > 1 + EDGE_TOL:
            return self.h() * self.C1(x) * self.C1(y)
        if r < 1 - EDGE_TOL:
            c00 = -1.0 / (b * b * self.h() * math.gamma(1 - 1 / a) * math.gamma(1 / a - 1))
        else:
            c00 = 1.0 / (b * b * self.h())
        return c00 * self.g(x) * self.g(y)

    def C1_local_direct(self, x=0, y=0) -> float:
        """Transient local constant written as (C1(x) + b G0(y) C1(0)) h + b^2 C1(0,0) G0(x) G0(y)."""
        self._need_transient("the transient local constant")
        b, h = self.beta, self.h()
        c00 = self.C1_local(0, 0)
        return (self.C1(x) + b * self.G0(y) * self.C1(0)) * h + b * b * c00 * self.G0(x) * self.G0(y)

    def C_n_total(self, n: int, x=0) -> float:
        """Subcritical limit of m_n(t,x)/v_1(t).

        For d/alpha > 1 this is C1(x) + g_n(C_1(0),..,C_{n-1}(0)) G0(x,0)/(1 - b G0(0,0)),
        the exact limit of the moment recursion.
        """
        if n == 1:
            return self.C1(x)
        if self.kernel.ratio <= 1 + EDGE_TOL:
            return self.C1(x)
        lower = [self.C_n_total(k, 0) for k in range(1, n)]
        return self.C1(x) + g_n(self.law, n, lower) * self.G0(x) / (1 - self.beta * self.G0())

    def chi_n(self, n: int, x=0) -> float:
        """b2/2 sum_i binom(n,i) C_i(x) C_{n-i}(x) built from the chi-form C_i."""
        if n < 2:
            raise ValueError("chi_n needs n >= 2")
        b2 = self.law.factorial_moment(2)
        return b2 / 2 * sum(math.comb(n, i) * self.C_n_total_chi(i, x) * self.C_n_total_chi(n - i, x)
                            for i in range(1, n))

    def C_n_total_chi(self, n: int, x=0) -> float:
        """C1(x) + chi_n(x) int m_1(s,x,0) ds; differs from the recursion limit for x != 0."""
        if n == 1 or self.kernel.ratio <= 1 + EDGE_TOL:
            return self.C1(x)
        return self.C1(x) + self.chi_n(n, x) * self.G0(x) / (1 - self.beta * self.G0())

    def C_n_local(self, n: int, x=0, y=0, t_max: float = 400.0, step: float = 0.05) -> ConstantValue:
        """C1(x,y) + C1(x,0) int_0^inf g_n(m_1(s,0,y),..) ds, integral computed numerically.

        The integral runs to ``t_max`` on the whole lattice with steps ``step``
        and ``2 step``, combined by Richardson extrapolation. The tail beyond
        the cutoff is bounded from the power-law decay of the integrand.
        """
        if n == 1:
            return ConstantValue(self.C1_local(x, y), method="formula")
        key = ("Cnloc", n, self._key(x), self._key(y), t_max, step)
        return self._cached(key, lambda: self._c_n_local(n, self._key(x), self._key(y), t_max, step))

    def _g_integral(self, n, y, t_max, step) -> tuple[float, float]:
        grid = np.arange(int(round(t_max / step)) + 1) * step
        solver = MomentSolver(self.kernel, self.law, None, grid, "volterra",
                              trunc_check=False, refine_check=False)
        lower = [solver.mn_local(0, y, k).values for k in range(1, n)]
        gv = np.asarray(g_n(self.law, n, lower), dtype=float)
        tail, _ = _power_tail(grid, gv)
        return float(np.trapezoid(gv, grid)), tail

    def _c_n_local(self, n, x, y, t_max, step) -> ConstantValue:
        fine, tail = self._g_integral(n, y, t_max, step)
        coarse, _ = self._g_integral(n, y, t_max, 2 * step)
        integral = (4 * fine - coarse) / 3 + tail
        c_x0 = self.C1_local(x, 0)
        value = self.C1_local(x, y) + c_x0 * integral
        err = abs(c_x0) * (abs(fine - coarse) / 3 + tail)
        return ConstantValue(value, error=err, method="volterra integral, Richardson in step",
                             cutoff=float(t_max), tail_bound=tail)

    # --- critical

    def critical_local(self, x=0, y=0) -> float:
        r = self.kernel.ratio
        if r <= 1 + EDGE_TOL:
            return self.h()
        c = self.G0(x) * self.G0(y) / self.gamma()
        if r < 2 - EDGE_TOL:
            c /= math.gamma(r - 1)
        return c

    def critical_total(self, x=0) -> float:
        r = self.kernel.ratio
        if r <= 1 + EDGE_TOL:
            return 1.0
        c = self.G0(x) / self.gamma()
        if r < 2 - EDGE_TOL:
            c /= math.gamma(r)
        return c

    # --- supercritical

    def lambda0(self) -> float:
        def solve():
            lam = solve_eigenvalue(self.kernel, self.beta)
            if lam is None or lam <= 0:
                raise ValueError("no positive eigenvalue: the process is not supercritical")
            return lam
        return self._cached("lambda0", solve)

    def norm2(self) -> float:
        return self._cached("norm2", lambda: l2_norm_squared(self.kernel, self.lambda0()).value)

    def _G_lam(self, x) -> float:
        k = self._key(x)
        return self._cached(("Glam", k), lambda: float(
            green_values(self.kernel, self.lambda0(), np.array([k], dtype=float))[0][0]))

    def c(self, x=0, y=0) -> float:
        """G_lambda0(x,0) G_lambda0(0,y) / ||G_lambda0(.,0)||^2."""
        return self._G_lam(x) * self._G_lam(y) / self.norm2()

    def c_total(self, x=0) -> float:
        return self._G_lam(x) / (self.lambda0() * self.norm2())

    # --- mapping view

    NAMES = ("h", "gamma", "G0", "g", "C1", "C1_local", "C1_local_direct", "C_n_total",
             "C_n_total_chi", "chi_n", "C_n_local", "critical_local", "critical_total",
             "lambda0", "c", "c_total")

    def __getitem__(self, name: str) -> Callable:
        if name not in self.NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def __iter__(self):
        return iter(self.NAMES)

    def __len__(self) -> int:
        return len(self.NAMES)

    def keys(self):
        return self.NAMES


def constant_evaluators(kernel: TransitionKernel, law: BranchingLaw, regime: str | None = None) -> ConstantSet:
    if regime is not None and regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}")
    return ConstantSet(kernel, law, regime)


def _power_tail(grid: np.ndarray, vals: np.ndarray) -> tuple[float, float]:
    """Integral beyond grid[-1] of a power-law fit to the last quartile."""
    t_end = float(grid[-1])
    if vals[-1] == 0:
        return 0.0, -math.inf
    sel = grid >= 0.75 * t_end
    if np.any(vals[sel] <= 0):
        raise DivergentIntegral("integrand is not positive on the tail window")
    slope = float(np.polyfit(np.log(grid[sel]), np.log(vals[sel]), 1)[0])
    if slope >= -1.0:
        raise DivergentIntegral(f"integrand decays like t^{slope:.3g}; the integral diverges")
    return float(vals[-1] * t_end / (-slope - 1.0)), slope


def estimate_h(series: MomentSeries, ratio: float, window: tuple[float, float] | None = None) -> ConstantValue:
    """h from the last quartile of p(t,0,0) t^(d/alpha)."""
    t, v = np.asarray(series.grid), np.asarray(series.values)
    lo, hi = window if window is not None else (t[-1] / 10, t[-1])
    sel = (t >= lo) & (t <= hi) & (t > 0)
    ts = t[sel]
    if ts.size < MIN_POINTS:
        raise FitError("window holds fewer than 10 points")
    scaled = v[sel] * ts ** ratio
    q = scaled[ts >= ts[0] + 0.75 * (ts[-1] - ts[0])]
    return ConstantValue(float(q.mean()), float(np.ptp(q)), "scaled tail mean")


# ---------------------------------------------------------------------------
# fitting


@dataclass(frozen=True, eq=False)
class FitReport:
    form: str
    window: tuple[float, float]
    n_points: int
    residual: float
    p_hat: float | None = None
    q_hat: float | None = None
    q_fitted: bool = False
    rate_hat: float | None = None
    limit_hat: float | None = None
    drift: float | None = None
    prediction: AsymptoticPrediction | None = None
    expected: dict = field(default_factory=dict)
    verdict: str | None = None  # "pass" | "fail" | None when nothing was compared
    tolerance: dict = field(default_factory=dict)
    quantity: str = ""
    n: int = 0
    truncation_diff: float | None = None
    provenance: str = ""
    notes: str = ""

    def __post_init__(self):
        if not self.residual >= 0:
            raise ValueError("residual must be >= 0")
        if self.window[0] > self.window[1]:
            raise ValueError("empty window")

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def row(self) -> dict:
        pred = self.prediction
        return {
            "quantity": self.quantity, "n": self.n, "form": self.form,
            "t1": self.window[0], "t2": self.window[1], "points": self.n_points,
            "p_hat": self.p_hat, "q_hat": self.q_hat, "q_fitted": self.q_fitted,
            "rate_hat": self.rate_hat, "limit_hat": self.limit_hat,
            "p_pred": pred.p if pred is not None else None,
            "q_pred": pred.q if pred is not None else None,
            "expected_rate": self.expected.get("rate"), "expected_limit": self.expected.get("limit"),
            "residual": self.residual, "drift": self.drift, "truncation_diff": self.truncation_diff,
            "provenance": self.provenance, "verdict": self.verdict or "n/a", "notes": self.notes,
        }


def q_identifiable(t1: float, t2: float) -> bool:
    """A log exponent is fitted only when ln t varies by a factor e^0.5 or more."""
    return t1 > 1 and math.log(math.log(t2) / math.log(t1)) >= Q_SPAN_MIN


def _rel_ok(hat: float, target: float, tol: float) -> bool:
    if target == 0:
        return abs(hat) <= tol
    return abs(hat - target) <= tol * abs(target)


def _window(series: MomentSeries, window) -> tuple[np.ndarray, np.ndarray, tuple[float, float]]:
    t = np.asarray(series.grid, dtype=float)
    v = np.asarray(series.values, dtype=float)
    if window is None:
        window = (t[-1] / 10, t[-1])
    lo, hi = float(window[0]), float(window[1])
    if lo > hi:
        raise FitError("window lower end exceeds upper end")
    if lo < t[0] - 1e-12 or hi > t[-1] * (1 + 1e-12) + 1e-12:
        raise FitError(f"window [{lo:g}, {hi:g}] is outside the series grid [{t[0]:g}, {t[-1]:g}]")
    sel = (t >= lo * (1 - 1e-12)) & (t <= hi * (1 + 1e-12))
    if sel.sum() < MIN_POINTS:
        raise FitError(f"window holds {int(sel.sum())} grid points, need at least {MIN_POINTS}")
    return t[sel], v[sel], (lo, hi)


def fit(series: MomentSeries, form: str, window: tuple[float, float] | None = None,
        prediction: AsymptoticPrediction | None = None, fit_q: bool | str = "auto",
        tol: Mapping[str, float] | None = None, expected: Mapping[str, float] | None = None,
        drift_tol: float | None = None) -> FitReport:
    """Fit one asymptotic form on ``window`` (default [T/10, T]).

    power_log regresses ln m on (ln t, ln ln t). With fit_q="auto" the log
    exponent is fitted when the prediction has q != 0 (or there is no
    prediction) and the window makes it identifiable; otherwise q is pinned to
    the predicted value. ``expected`` may hold "rate" or "limit" targets.
    """
    if form not in FORMS:
        raise ValueError(f"form must be one of {FORMS}")
    tol = dict(DEFAULT_TOL, **(tol or {}))
    expected = dict(expected or {})
    t, v, win = _window(series, window)
    common = dict(window=win, n_points=int(t.size), prediction=prediction, tolerance=tol,
                  quantity=series.quantity, n=series.n, truncation_diff=series.trunc_diff,
                  provenance=series.provenance)
    notes = []

    if form == "constant_limit":
        k = max(MIN_POINTS // 2, t.size // 4)
        tail = v[-k:]
        limit = float(tail.mean())
        resid = float(tail.std())
        drift = float(abs(tail[-1] - tail[0]) / abs(limit)) if limit != 0 else math.inf
        verdict = None
        dt = tol["constant"] if drift_tol is None else drift_tol
        if "limit" in expected:
            ok = _rel_ok(limit, expected["limit"], tol["constant"])
            verdict = "pass" if ok else "fail"
        if drift > dt:
            notes.append(f"drift {drift:.3g} over the last quartile")
        return FitReport(form, residual=resid, limit_hat=limit, drift=drift, expected=expected,
                         verdict=verdict, notes="; ".join(notes), **common)

    if np.any(v <= 0):
        raise FitError("nonpositive values in the fit window")
    lv = np.log(v)

    if form == "exponential":
        A = np.vstack([np.ones_like(t), t]).T
        coef, *_ = np.linalg.lstsq(A, lv, rcond=None)
        resid = float(np.sqrt(np.mean((A @ coef - lv) ** 2)))
        rate = float(coef[1])
        if prediction is not None and "rate" not in expected and "lambda0" in expected:
            expected["rate"] = prediction.rate_multiple * expected["lambda0"]
        verdict = None
        if "rate" in expected:
            verdict = "pass" if _rel_ok(rate, expected["rate"], tol["rate"]) else "fail"
        return FitReport(form, residual=resid, rate_hat=rate, expected=expected, verdict=verdict, **common)

    if t[0] <= 0:
        raise FitError("power-law fits need t > 0")
    ident = q_identifiable(win[0], win[1])
    q_pred = prediction.q if prediction is not None else 0.0
    if fit_q == "auto":
        do_q = ident and (prediction is None or q_pred != 0)
    else:
        do_q = bool(fit_q)
        if do_q and not ident:
            raise FitError(f"log exponent is not identifiable on [{win[0]:g}, {win[1]:g}]")
    lt = np.log(t)
    if do_q:
        A = np.vstack([np.ones_like(t), lt, np.log(lt)]).T
        coef, *_ = np.linalg.lstsq(A, lv, rcond=None)
        p_hat, q_hat = float(coef[1]), float(coef[2])
        fitted = A @ coef
    else:
        if q_pred != 0 and t[0] <= 1:
            raise FitError("a pinned log exponent needs t > 1")
        y = lv - (q_pred * np.log(lt) if q_pred != 0 else 0.0)
        A = np.vstack([np.ones_like(t), lt]).T
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        p_hat, q_hat = float(coef[1]), float(q_pred)
        fitted = A @ coef
        if q_pred != 0 or (prediction is None and not ident):
            notes.append("q not identifiable; pinned" if not ident else "q pinned to prediction")
        lv = y
    resid = float(np.sqrt(np.mean((fitted - lv) ** 2)))
    verdict = None
    if prediction is not None:
        ok = _rel_ok(p_hat, prediction.p, tol["exponent"])
        if do_q:
            ok = ok and _rel_ok(q_hat, prediction.q, tol["exponent"])
        verdict = "pass" if ok else "fail"
    return FitReport(form, residual=resid, p_hat=p_hat, q_hat=q_hat, q_fitted=do_q, expected=expected,
                     verdict=verdict, notes="; ".join(notes), **common)


# ---------------------------------------------------------------------------
# verification


@dataclass(frozen=True)
class VerifyDescriptor:
    """What to compute and compare for one regime check."""

    quantities: tuple[str, ...] = ("total",)
    n_range: tuple[int, int] = (1, 1)
    t_max: float = 100.0
    step: float = 0.05
    window: tuple[float, float] | None = None
    method: str = "integral-recursion"  # "ODE" | "integral-recursion" | "monte-carlo"
    x: tuple | int = 0
    y: tuple | int = 0
    box_radius: int = 200
    tolerances: dict = field(default_factory=dict)
    check_constant: bool = True
    critical_tol: float = 1e-9
    trials: int = 10_000
    seed: int = 0
    snapshots: int = 40
    workers: int = 1

    def __post_init__(self):
        for q in self.quantities:
            if q not in QUANTITIES:
                raise ValueError(f"unknown quantity {q!r}")
        lo, hi = self.n_range
        if not (1 <= lo <= hi):
            raise ValueError("n_range must satisfy 1 <= n_min <= n_max")
        if self.method not in ("ODE", "integral-recursion", "monte-carlo"):
            raise ValueError(f"unknown method {self.method!r}")
        if not self.t_max > 0 or not self.step > 0:
            raise ValueError("t_max and step must be positive")


def _series_source(kernel, law, desc: VerifyDescriptor):
    if desc.method == "monte-carlo":
        from .simulate import SimulationConfig, estimate

        times = np.linspace(desc.t_max / desc.snapshots, desc.t_max, desc.snapshots)
        cfg = SimulationConfig(kernel, law, times, desc.trials, desc.seed, start=desc.x,
                               y_points=[desc.y], n_max=desc.n_range[1], workers=desc.workers)
        res = estimate(cfg)

        def get(quantity, n):
            vals = res.total[n - 1] if quantity == "total" else res.local[0, n - 1]
            se = res.total_se[n - 1] if quantity == "total" else res.local_se[0, n - 1]
            return MomentSeries(quantity, n, times, vals, "monte-carlo", None,
                                {"seed": desc.seed, "trials": desc.trials}, error=se)
        return get

    n_steps = int(round(desc.t_max / desc.step))
    if desc.method == "ODE":
        grid = np.linspace(0.0, desc.t_max, n_steps + 1)
        solver = MomentSolver(kernel, law, TruncatedLattice(kernel.d, desc.box_radius), grid, "eigen",
                              refine_check=False)
    else:
        grid = np.arange(n_steps + 1) * desc.step
        solver = MomentSolver(kernel, law, None, grid, "volterra", trunc_check=False, refine_check=False)

    def get(quantity, n):
        if quantity == "total":
            return solver.mn_total(desc.x, n)
        return solver.mn_local(desc.x, desc.y, n)
    return get


def verify(kernel: TransitionKernel, law: BranchingLaw, descriptor: VerifyDescriptor) -> list[FitReport]:
    """classify -> compute series -> predict -> fit -> compare, one report per (n, quantity)."""
    desc = descriptor
    tol = dict(DEFAULT_TOL, **desc.tolerances)
    report = classify(kernel, law, tol=desc.critical_tol, with_constant=False)
    regime = report.classification
    source = _series_source(kernel, law, desc)
    out = []
    for n in range(desc.n_range[0], desc.n_range[1] + 1):
        for quantity in desc.quantities:
            pred = predict(kernel.d, kernel.alpha, regime, n, quantity, kernel, law)
            series = source(quantity, n)
            expected = {}
            if pred.form == "exponential":
                expected["rate"] = n * report.eigenvalue
            elif pred.form == "constant_limit" and desc.check_constant and pred.evaluator is not None:
                expected["limit"] = float(pred.evaluator(desc.x))
            out.append(fit(series, pred.form, desc.window, prediction=pred, tol=tol, expected=expected))
    return out


def summary_line(reports: Sequence[FitReport]) -> str:
    failed = [r for r in reports if r.verdict == "fail"]
    status = "FAIL" if failed else "PASS"
    return f"{status}: {len(reports) - len(failed)}/{len(reports)} reports passed"
