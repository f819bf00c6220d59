"""Lattice Green functions, the critical intensity and the source eigenvalue.

G_lambda(x, y) = (2 pi)^-d int cos<theta, y - x> / (lambda - phi(theta)) d theta
and I_x(lambda) = G_lambda(x, 0).  The rank-one operator A + beta Delta_0 has
a positive eigenvalue lambda_0 exactly when beta I_0(lambda_0) = 1 has a root.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize, special

from .kernel import BranchingLaw, TransitionKernel, ball_points, intensity
from .quadrature import DivergentIntegral, panels_for_scale, rule_for

__all__ = [
    "BracketNotFound",
    "DivergentIntegral",
    "EigenFunction",
    "EigenResidual",
    "GreenEvaluation",
    "QuadratureBudgetExceeded",
    "RegimeReport",
    "SupercriticalConstant",
    "beta_c",
    "band_of",
    "classify",
    "eigenfunction",
    "eigenfunction_residual",
    "green",
    "green_difference",
    "green_values",
    "i0",
    "i0_profile",
    "l2_admissible",
    "l2_norm_squared",
    "solve_eigenvalue",
]

LAMBDA_RANGE = (1e-12, 1e12)
DEFAULT_CRITICAL_TOL = 1e-9


class QuadratureBudgetExceeded(ArithmeticError):
    """The quadrature error estimate exceeds the requested target."""


class BracketNotFound(ValueError):
    """beta I_0(lambda) = 1 has no root in the searched lambda range."""


def default_target(d: int) -> float:
    return 1e-8 if d == 1 else 1e-6


@dataclass(frozen=True)
class GreenEvaluation:
    lam: float
    x: tuple
    y: tuple
    value: float
    quad_error: float


def _points(d: int, pts) -> np.ndarray:
    arr = np.asarray(pts, dtype=float)
    if arr.ndim == 0:
        if d > 1 and arr != 0:
            raise ValueError(f"a scalar point is only accepted for the origin when d = {d}")
        arr = np.full((1, d), float(arr))
    if d == 1 and arr.ndim == 1:
        arr = arr[:, None]
    arr = np.atleast_2d(arr)
    if arr.shape[1] != d:
        raise ValueError(f"points must have {d} coordinates")
    if np.any(arr != np.round(arr)):
        raise ValueError("points must be on the lattice")
    return arr


def _check_lambda(kernel: TransitionKernel, lam: float) -> None:
    if not (lam >= 0 and math.isfinite(lam)):
        raise ValueError(f"lambda must be finite and >= 0, got {lam!r}")
    if lam == 0 and kernel.ratio <= 1:
        raise DivergentIntegral(
            f"G_0 diverges for d/alpha = {kernel.ratio:g} <= 1")


def green_values(kernel: TransitionKernel, lam: float, deltas, order: int = 12,
                 power: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Values of int cos<theta, delta>/(lam - phi)^power for many offsets.

    Returns (values, quad_error) where the error is the larger of the
    difference between the order-``order`` and order-(order - 4) rules and
    the uncertainty of the extrapolated remainder near theta = 0.
    """
    lam = float(lam)
    _check_lambda(kernel, lam)
    deltas = _points(kernel.d, deltas)
    n_geo = panels_for_scale(kernel, lam)
    out = []
    for o in (order, order - 4):
        rule = rule_for(kernel, deltas, o, n_geo)
        vals = 1.0 / (lam - rule.phi) ** power
        out.append(rule.integrate(vals, deltas))
    (v_hi, rem), (v_lo, _) = out
    err = np.maximum(np.abs(v_hi - v_lo), rem)
    return v_hi, err


def green(kernel: TransitionKernel, lam: float, x=0, y=0, target: float | None = None) -> GreenEvaluation:
    """G_lambda(x, y) by radial quadrature with geometric refinement at theta = 0."""
    xa, ya = _points(kernel.d, x), _points(kernel.d, y)
    val, err = green_values(kernel, lam, ya - xa)
    target = default_target(kernel.d) if target is None else target
    if err[0] > target:
        raise QuadratureBudgetExceeded(
            f"quadrature error {err[0]:.3g} exceeds target {target:.3g}")
    return GreenEvaluation(float(lam), tuple(int(v) for v in xa[0]),
                           tuple(int(v) for v in ya[0]), float(val[0]), float(err[0]))


def green_difference(kernel: TransitionKernel, x) -> tuple[float, float]:
    """int_0^inf (p(t,0,0) - p(t,x,0)) dt = (2 pi)^-d int (1 - cos<theta,x>)/(-phi).

    Finite in every band, including d/alpha <= 1 where G_0 itself diverges.
    Returns (value, quad_error).
    """
    xa = _points(kernel.d, x)
    out = []
    for o in (12, 8):
        rule = rule_for(kernel, xa, o)
        vals = rule.one_minus_cos(xa[0]) / (-rule.phi)
        out.append(float(rule.integrate_raw(vals)[0][0]))
    return out[0], abs(out[0] - out[1])


def i0(kernel: TransitionKernel, lam: float) -> float:
    return float(green_values(kernel, lam, np.zeros((1, kernel.d)))[0][0])


def i0_profile(kernel: TransitionKernel, lambdas) -> list[float]:
    lams = np.asarray(lambdas, dtype=float)
    if lams.ndim != 1 or lams.size == 0:
        raise ValueError("lambdas must be a nonempty 1-d grid")
    if np.any(lams <= 0):
        raise ValueError("lambdas must be positive")
    if np.any(np.diff(lams) >= 0):
        raise ValueError("lambdas must be strictly decreasing")
    return [i0(kernel, lam) for lam in lams]


def beta_c(kernel: TransitionKernel) -> float:
    """0 when d/alpha <= 1, else 1/G_0(0,0)."""
    if kernel.ratio <= 1:
        return 0.0
    cache = kernel.__dict__.setdefault("_cache", {})
    if "beta_c" not in cache:
        cache["beta_c"] = 1.0 / i0(kernel, 0.0)
    return cache["beta_c"]


def band_of(ratio: float) -> str:
    if ratio <= 0.5:
        raise ValueError(f"d/alpha = {ratio:g} is outside (1/2, inf)")
    if ratio <= 1:
        return "(1/2,1]"
    if ratio <= 2:
        return "(1,2]"
    return "(2,inf)"


def _is_critical(beta: float, bc: float, tol: float) -> bool:
    return abs(beta - bc) <= tol * max(bc, 1.0)


# ---------------------------------------------------------------------------
# eigenvalue


def solve_eigenvalue(kernel: TransitionKernel, beta: float, method: str = "brentq",
                     bracket: tuple[float, float] | None = None, tol: float = 1e-10,
                     critical_tol: float = DEFAULT_CRITICAL_TOL) -> float | None:
    """Positive root of beta I_0(lambda) = 1, 0 at criticality when d/alpha > 2, else None."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    bc = beta_c(kernel)
    if _is_critical(beta, bc, critical_tol) and not (kernel.ratio <= 1 and beta > 0):
        return 0.0 if kernel.ratio > 2 else None
    if beta <= bc:
        return None

    def F(lam):
        return beta * i0(kernel, lam) - 1.0

    if bracket is None:
        lo, hi = _sweep_bracket(F)
    else:
        lo, hi = map(float, bracket)
        if not (F(lo) >= 0 >= F(hi)):
            raise BracketNotFound(f"[{lo:g}, {hi:g}] does not bracket the root")
    if method == "brentq":
        lam = optimize.brentq(F, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    elif method == "bisect":
        lam = optimize.bisect(F, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=2000)
    elif method == "secant":
        # secant in log(lambda), where F is close to linear
        sol = optimize.root_scalar(lambda u: F(math.exp(u)), x0=math.log(lo), x1=math.log(hi),
                                   method="secant", xtol=1e-15, rtol=1e-15, maxiter=200)
        lam = math.exp(sol.root)
        if not (lo <= lam <= hi):
            lam = optimize.brentq(F, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps)
    else:
        raise ValueError(f"unknown method {method!r}")
    resid = abs(F(lam))
    if resid > tol:
        raise ArithmeticError(f"eigenvalue residual {resid:.3g} above {tol:.3g}")
    return float(lam)


def _sweep_bracket(F: Callable[[float], float]) -> tuple[float, float]:
    """Logarithmic sweep from large to small lambda for a sign change of F."""
    lo_lim, hi_lim = LAMBDA_RANGE
    grid = np.logspace(math.log10(hi_lim), math.log10(lo_lim), 49)
    prev = None
    for lam in grid:
        if F(lam) >= 0:
            if prev is None:
                raise BracketNotFound("beta I_0(lambda) >= 1 already at lambda = 1e12")
            return float(lam), float(prev)
        prev = lam
    raise BracketNotFound("beta I_0(lambda) < 1 on the whole range [1e-12, 1e12]")


def l2_admissible(kernel: TransitionKernel, lam: float) -> bool:
    """Whether G_lambda(., 0) is square summable, i.e. int |lam - phi|^-2 converges."""
    if lam > 0:
        return True
    try:
        green_values(kernel, 0.0, np.zeros((1, kernel.d)), power=2)
    except DivergentIntegral:
        return False
    return True


# ---------------------------------------------------------------------------
# eigenfunction


@dataclass(frozen=True, eq=False)
class EigenFunction:
    """f(x) = G_lambda0(x, 0)/G_lambda0(0, 0) tabulated on |x|_inf <= radius."""

    beta: float
    lam: float
    radius: int
    points: np.ndarray
    values: np.ndarray
    quad_error: np.ndarray

    def __getitem__(self, x) -> float:
        x = tuple(np.atleast_1d(np.asarray(x, dtype=int)).tolist())
        idx = self._index.get(x)
        if idx is None:
            raise KeyError(f"{x} outside the box of radius {self.radius}")
        return float(self.values[idx])

    @property
    def _index(self) -> dict:
        cache = self.__dict__.setdefault("_idx", {})
        if not cache:
            cache.update({tuple(p): i for i, p in enumerate(self.points.tolist())})
        return cache

    def to_dict(self) -> dict:
        return {tuple(p): float(v) for p, v in zip(self.points.tolist(), self.values)}


def cube_points(d: int, radius: int) -> np.ndarray:
    """Lattice points with |x|_inf <= radius in lexicographic order."""
    axis = np.arange(-radius, radius + 1)
    grids = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def eigenfunction(kernel: TransitionKernel, beta: float, lambda0: float, box_radius: int) -> EigenFunction:
    if lambda0 < 0:
        raise ValueError("lambda0 must be >= 0")
    if lambda0 == 0 and kernel.ratio <= 2:
        raise ValueError(
            f"lambda0 = 0 is not an l2 eigenvalue for d/alpha = {kernel.ratio:g} <= 2")
    if box_radius < 0:
        raise ValueError("box_radius must be >= 0")
    pts = cube_points(kernel.d, int(box_radius))
    vals, err = green_values(kernel, lambda0, pts)
    origin = int(np.flatnonzero(np.all(pts == 0, axis=1))[0])
    g00 = vals[origin]
    return EigenFunction(float(beta), float(lambda0), int(box_radius), pts, vals / g00, err / g00)


@dataclass(frozen=True)
class EigenResidual:
    relative: float  # ||(A + beta Delta_0) f - lambda0 f||_2 / ||f||_2 over the box
    truncated: float  # same with A replaced by its restriction to the box
    support_radius: int


def _apply_generator(kernel: TransitionKernel, rows: np.ndarray, cols: np.ndarray,
                     fcols: np.ndarray, chunk: int = 2_000_000) -> np.ndarray:
    """(A f)(x) for x in rows, summing over the points cols carrying f."""
    out = np.zeros(len(rows))
    step = max(1, chunk // max(1, len(cols)))
    for s in range(0, len(rows), step):
        diff = cols[None, :, :] - rows[s:s + step, None, :]
        out[s:s + step] = intensity(kernel, diff) @ fcols
    return out


def eigenfunction_residual(kernel: TransitionKernel, f: EigenFunction,
                           support_radius: int | None = None) -> EigenResidual:
    """Residual of (A + beta Delta_0) f = lambda0 f at the box points.

    A is applied with f known on the larger cube |x|_inf <= support_radius
    (default 10 box radii in d=1, 3 in d >= 2), since f is available
    everywhere from the Green function; the residual of the operator
    restricted to the box is reported alongside.
    """
    d, L = kernel.d, f.radius
    if support_radius is None:
        support_radius = max(L, (10 if d == 1 else 3) * L)
    rows = f.points
    cols = cube_points(d, support_radius)
    fcols, _ = green_values(kernel, f.lam, cols)
    g00 = fcols[np.flatnonzero(np.all(cols == 0, axis=1))[0]]
    fcols = fcols / g00
    origin = np.all(rows == 0, axis=1)

    def resid(cpts, fvals):
        af = _apply_generator(kernel, rows, cpts, fvals)
        af[origin] += f.beta * f.values[origin]
        r = af - f.lam * f.values
        return float(np.linalg.norm(r) / np.linalg.norm(f.values))

    return EigenResidual(resid(cols, fcols), resid(rows, f.values), int(support_radius))


# ---------------------------------------------------------------------------
# l2 norm and the supercritical constant


@dataclass(frozen=True)
class L2Norm:
    value: float
    box_radius: int
    tail: float
    tail_fraction: float
    tail_exponent: float
    parseval: float


def l2_norm_squared(kernel: TransitionKernel, lam: float, box_radius: int | None = None) -> L2Norm:
    """sum_x G_lambda(x, 0)^2 over a cube plus a fitted power-law tail.

    The Parseval value (2 pi)^-d int (lam - phi)^-2 is returned alongside as
    an independent check.
    """
    d = kernel.d
    L = int(box_radius if box_radius is not None else (500 if d == 1 else {2: 24, 3: 8}[d]))
    if lam == 0 and not l2_admissible(kernel, lam):
        raise DivergentIntegral("G_0(., 0) is not square summable for d/alpha <= 2")
    pts = cube_points(d, L)
    vals, _ = green_values(kernel, lam, pts)
    box = math.fsum(vals**2)
    r = np.linalg.norm(pts.astype(float), axis=1)
    sel = (r >= L / 2) & (r <= L) & (vals > 0)
    slope, icpt = np.polyfit(np.log(r[sel]), np.log(vals[sel] ** 2), 1)
    s = -slope
    if s <= d:
        raise DivergentIntegral(f"fitted tail exponent {s:.3g} does not exceed d = {d}")
    amp = math.exp(icpt)
    if d == 1:
        tail = 2 * amp * float(special.zeta(s, L + 1))
    else:
        # lattice shell up to 4 L explicitly, continuum beyond
        outer = ball_points(d, 4 * L).astype(float)
        outer = outer[np.max(np.abs(outer), axis=1) > L]
        tail = amp * math.fsum(np.linalg.norm(outer, axis=1) ** -s)
        area = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
        tail += amp * area * (4 * L + 0.5) ** (d - s) / (s - d)
    total = box + tail
    parseval = float(green_values(kernel, lam, np.zeros((1, d)), power=2)[0][0])
    return L2Norm(total, L, tail, tail / total, s, parseval)


@dataclass(frozen=True, eq=False)
class SupercriticalConstant:
    """c(lambda, x, y) = G_lambda(x,0) G_lambda(0,y) / ||G_lambda(., 0)||^2."""

    kernel: TransitionKernel
    lam: float
    norm: L2Norm

    def __call__(self, x=0, y=0) -> float:
        d = self.kernel.d
        vals, _ = green_values(self.kernel, self.lam, np.vstack([_points(d, x), _points(d, y)]))
        return float(vals[0] * vals[1] / self.norm.value)


# ---------------------------------------------------------------------------
# classification


@dataclass(frozen=True, eq=False)
class RegimeReport:
    ratio: float
    band: str
    beta: float
    beta_c: float
    classification: str
    tol: float
    eigenvalue: float | None = None
    eigenfunction: EigenFunction | None = None
    c_const: SupercriticalConstant | None = None
    notes: dict = field(default_factory=dict)


def classify(kernel: TransitionKernel, law: BranchingLaw, tol: float = DEFAULT_CRITICAL_TOL,
             box_radius: int = 20, with_constant: bool = True) -> RegimeReport:
    if not tol > 0:
        raise ValueError("tol must be > 0")
    beta = law.beta
    bc = beta_c(kernel)
    if _is_critical(beta, bc, tol):
        cls = "critical"
    elif beta > bc:
        cls = "supercritical"
    else:
        cls = "subcritical"
    lam = None
    ef = None
    cc = None
    notes = {}
    if cls == "supercritical":
        lam = solve_eigenvalue(kernel, beta, critical_tol=tol)
        notes["eigen_residual"] = abs(beta * i0(kernel, lam) - 1)
    elif cls == "critical" and kernel.ratio > 2:
        lam = 0.0
    if lam is not None:
        ef = eigenfunction(kernel, beta, lam, box_radius)
        if cls == "supercritical" and with_constant:
            norm = l2_norm_squared(kernel, lam)
            cc = SupercriticalConstant(kernel, lam, norm)
            notes.update(l2_method="box+power-law tail", l2_box=norm.box_radius,
                         l2_tail_fraction=norm.tail_fraction, l2_parseval=norm.parseval)
    return RegimeReport(kernel.ratio, band_of(kernel.ratio), beta, bc, cls, tol, lam, ef, cc, notes)
