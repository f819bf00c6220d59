"""Transition probabilities and particle-number moments.

Two backends compute the first moments:

* ``"eigen"`` / ``"rk"``: the backward equations dm/dt = (A + beta Delta_0) m on
  a box with absorbing boundary.  ``"eigen"`` diagonalizes the symmetric
  generator (split into parts even and odd under x -> -x) and evaluates
  exp(tH) exactly at any time; ``"rk"`` integrates with DOP853.  Mass lost
  through the boundary is tracked as ``leak``.
* ``"volterra"``: the integral equations on the whole lattice,
  m(t,x,0) = p(t,x,0) + beta int_0^t p(t-s,x,0) m(s,0,0) ds, with p from the
  Fourier integral.  m is taken piecewise linear in t and the cell integrals
  of p are exact, so the weights sum to G_0(0,0) and criticality is kept.

Higher moments follow from m_n = m_1 + int m_1(t-s,x,0) g_n(m_1..m_{n-1})(s) ds
evaluated with ``convolve``.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.signal import fftconvolve

from .kernel import BranchingLaw, TransitionKernel, build_branching, g_n, intensity
from .quadrature import panels_for_scale, rule_for
from .spectral import cube_points

__all__ = [
    "BoxPropagator",
    "BoxTooSmall",
    "MomentSeries",
    "MomentSolver",
    "TruncatedLattice",
    "convolve",
    "m1_local",
    "m1_total",
    "mn_local",
    "mn_total",
    "transition_probability",
]

SOLVERS = ("eigen", "rk", "volterra")


class BoxTooSmall(ArithmeticError):
    """Boundary leak exceeds the configured budget."""


# ---------------------------------------------------------------------------
# lattice


@dataclass(frozen=True, eq=False)
class TruncatedLattice:
    """The box |x|_inf <= radius with absorbing boundary."""

    d: int
    radius: int
    boundary: str = "absorbing"

    def __post_init__(self):
        if self.d < 1 or self.radius < 0:
            raise ValueError("need d >= 1 and radius >= 0")
        if self.boundary != "absorbing":
            raise ValueError("only absorbing boundaries are supported")
        pts = cube_points(self.d, self.radius)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "_index", {tuple(p): i for i, p in enumerate(pts.tolist())})

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def origin(self) -> int:
        return self._index[(0,) * self.d]

    def index(self, x) -> int:
        key = _as_point(self.d, x)
        if key not in self._index:
            raise ValueError(f"{key} lies outside the box of radius {self.radius}")
        return self._index[key]

    def point(self, i: int) -> tuple:
        return tuple(int(v) for v in self.points[i])

    def contains(self, x) -> bool:
        return _as_point(self.d, x) in self._index

    def mirror(self) -> np.ndarray:
        """Index of -x for every state x."""
        # lexicographic order on a symmetric cube reverses under x -> -x
        return np.arange(self.size)[::-1].copy()


def _as_point(d: int, x) -> tuple:
    arr = np.atleast_1d(np.asarray(x))
    if arr.size == 1 and d > 1:
        if arr[0] != 0:
            raise ValueError(f"a scalar point is only accepted for the origin when d = {d}")
        arr = np.zeros(d, dtype=int)
    if arr.shape != (d,) or np.any(arr != np.round(arr)):
        raise ValueError(f"expected a lattice point with {d} coordinates, got {x!r}")
    return tuple(int(v) for v in arr)


# ---------------------------------------------------------------------------
# series


@dataclass(frozen=True, eq=False)
class MomentSeries:
    quantity: str  # "local" | "total"
    n: int
    grid: np.ndarray
    values: np.ndarray
    provenance: str  # "ODE" | "integral-recursion" | "monte-carlo"
    truncation_radius: int | None
    params: dict
    leak: np.ndarray | None = None
    trunc_diff: float | None = None
    error: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# box backend


class BoxPropagator:
    """exp(tH) for H = A_box + beta Delta_0, by eigendecomposition.

    The basis e_0, (e_x +- e_{-x})/sqrt 2 block-diagonalizes H into an even
    and an odd symmetric block.
    """

    def __init__(self, kernel: TransitionKernel, lattice: TruncatedLattice, beta: float):
        if lattice.d != kernel.d:
            raise ValueError("lattice and kernel dimensions differ")
        self.kernel, self.lattice, self.beta = kernel, lattice, float(beta)
        n = lattice.size
        self.half = n // 2  # number of +-x pairs; states 0..half-1 are the "negative" halves
        org = lattice.origin
        assert org == self.half
        # representatives: origin, then the states after it (their mirrors precede it)
        reps = np.arange(org, n)
        pts = lattice.points[reps]
        self._reps_pts = pts
        self._blocks: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    # --- blocks

    def _pair_matrices(self) -> tuple[np.ndarray, np.ndarray]:
        p = self._reps_pts
        same = intensity(self.kernel, p[None, :, :] - p[:, None, :])
        cross = intensity(self.kernel, p[None, :, :] + p[:, None, :])
        return same, cross

    def _build(self, parity: str) -> tuple[np.ndarray, np.ndarray]:
        same, cross = self._pair_matrices()
        if parity == "even":
            m = same + cross
            m[0, :] = math.sqrt(2) * same[0, :]
            m[:, 0] = math.sqrt(2) * same[:, 0]
            m[0, 0] = self.kernel.a0 + self.beta
        else:
            m = (same - cross)[1:, 1:]
        return m

    def block(self, parity: str) -> tuple[np.ndarray, np.ndarray]:
        if parity not in self._blocks:
            m = self._build(parity)
            if m.size == 0:
                self._blocks[parity] = (np.zeros(0), np.zeros((0, 0)))
            else:
                self._blocks[parity] = np.linalg.eigh(m)
        return self._blocks[parity]

    def out_rates(self) -> np.ndarray:
        """Absorption rate -sum_{y in box} a(y - x) for every state x."""
        if "rates" in self._blocks:
            return self._blocks["rates"]
        m = self._build("even")
        m[0, 0] -= self.beta
        ones = np.full(len(m), math.sqrt(2))
        ones[0] = 1.0
        y = m @ ones
        r_rep = -y / ones
        r = np.empty(self.lattice.size)
        org = self.lattice.origin
        r[org:] = r_rep
        r[:org] = r_rep[1:][::-1]
        self._blocks["rates"] = r
        return r

    # --- vectors

    def split(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        org = self.lattice.origin
        pos = v[org + 1:]
        neg = v[:org][::-1]
        ve = np.concatenate([[v[org]], (pos + neg) / math.sqrt(2)])
        vo = (pos - neg) / math.sqrt(2)
        return ve, vo

    def apply(self, v: np.ndarray, times, targets, mode: str = "value", lam: float | None = None) -> np.ndarray:
        """(f(H) v)[targets] for f = exp(tH), int_0^t exp(sH) ds, or (lam - H)^-1.

        Returns an array of shape (len(targets), len(times)) (one column for
        the resolvent).
        """
        times = np.atleast_1d(np.asarray(times, dtype=float))
        org = self.lattice.origin
        ve, vo = self.split(np.asarray(v, dtype=float))
        out = np.zeros((len(targets), 1 if mode == "resolvent" else len(times)))
        for parity, vec in (("even", ve), ("odd", vo)):
            if vec.size == 0 or not np.any(vec):
                continue
            w, V = self.block(parity)
            c = V.T @ vec
            rows, scale = [], []
            for t in targets:
                if parity == "even":
                    rows.append(t - org if t >= org else org - t)
                    scale.append(1.0 if t == org else 1 / math.sqrt(2))
                else:
                    if t == org:
                        rows.append(0)
                        scale.append(0.0)
                        continue
                    rows.append((t - org - 1) if t > org else (org - t - 1))
                    scale.append((1.0 if t > org else -1.0) / math.sqrt(2))
            coef = V[rows] * c[None, :] * np.asarray(scale)[:, None]
            if mode == "value":
                fw = np.exp(np.outer(w, times))
            elif mode == "integral":
                wt = np.outer(w, times)
                with np.errstate(divide="ignore", invalid="ignore"):
                    fw = np.where(w[:, None] == 0, times[None, :], np.expm1(wt) / w[:, None])
            elif mode == "resolvent":
                fw = (1.0 / (lam - w))[:, None]
            else:
                raise ValueError(f"unknown mode {mode!r}")
            out += coef @ fw
        return out

    def dense(self) -> np.ndarray:
        """Full generator matrix on the box (for the RK backend and checks)."""
        p = self.lattice.points
        m = intensity(self.kernel, p[None, :, :] - p[:, None, :])
        m[self.lattice.origin, self.lattice.origin] += self.beta
        return m


_PROPAGATORS: OrderedDict = OrderedDict()
_CACHE_SIZE = 4


def box_propagator(kernel: TransitionKernel, lattice: TruncatedLattice, beta: float) -> BoxPropagator:
    key = (id(kernel), lattice.d, lattice.radius, float(beta))
    hit = _PROPAGATORS.get(key)
    if hit is not None and hit.kernel is kernel:
        _PROPAGATORS.move_to_end(key)
        return hit
    prop = BoxPropagator(kernel, lattice, beta)
    _PROPAGATORS[key] = prop
    while len(_PROPAGATORS) > _CACHE_SIZE:
        _PROPAGATORS.popitem(last=False)
    return prop


def _rk_solve(prop: BoxPropagator, v0: np.ndarray, grid: np.ndarray, target: int,
              rtol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Adaptive DOP853 for v' = H v and the absorbed mass w' = H w + r."""
    H = prop.dense()
    r = prop.out_rates()
    n = len(v0)

    def rhs(_t, u):
        v, w = u[:n], u[n:]
        return np.concatenate([H @ v, H @ w + r])

    u0 = np.concatenate([v0, np.zeros(n)])
    sol = solve_ivp(rhs, (0.0, float(grid[-1])), u0, method="DOP853", t_eval=grid,
                    rtol=rtol, atol=1e-14)
    if not sol.success:
        raise ArithmeticError(f"ODE integration failed: {sol.message}")
    return sol.y[target], sol.y[n + target]


# ---------------------------------------------------------------------------
# whole-lattice backend


def _psi1(z: np.ndarray) -> np.ndarray:
    """(e^z - 1)/z."""
    out = np.empty_like(z)
    s = np.abs(z) < 1e-4
    out[~s] = np.expm1(z[~s]) / z[~s]
    zs = z[s]
    out[s] = 1 + zs / 2 + zs * zs / 6
    return out


def _psi2(z: np.ndarray) -> np.ndarray:
    """(e^z (z - 1) + 1)/z^2 = int_0^1 v e^(vz) dv."""
    out = np.empty_like(z)
    s = np.abs(z) < 1e-3
    zz = z[~s]
    out[~s] = (np.exp(zz) * (zz - 1) + 1) / zz**2
    zs = z[s]
    out[s] = 0.5 + zs / 3 + zs * zs / 8 + zs**3 / 30
    return out


class LatticeKernels:
    """Cell integrals of p(t, 0, delta) on the uniform grid t_k = k h.

    For cell k = 1..n: A_k = int_{(k-1)h}^{kh} p du and
    B_k = int_{(k-1)h}^{kh} (u - (k-1)h) p du / h; P_k = p(kh) for k = 0..n.
    """

    def __init__(self, kernel: TransitionKernel, h: float, n: int, chunk: int = 2048):
        self.kernel, self.h, self.n, self.chunk = kernel, float(h), int(n), chunk
        self._cache: dict[tuple, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def get(self, delta) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        key = _as_point(self.kernel.d, delta)
        if key not in self._cache:
            self.prepare([key])
        return self._cache[key]

    def prepare(self, deltas) -> None:
        keys = [k for k in dict.fromkeys(_as_point(self.kernel.d, x) for x in deltas)
                if k not in self._cache]
        if not keys:
            return
        arr = np.array(keys, dtype=float)
        n_geo = panels_for_scale(self.kernel, 1.0 / max(self.h * self.n, 1.0))
        rule = rule_for(self.kernel, arr, 12, n_geo)
        base = rule.weights[:, None] * rule.trig(arr)
        h = self.h
        e1 = h * _psi1(h * rule.phi)
        e2 = h * _psi2(h * rule.phi)
        wa, wb = e1[:, None] * base, e2[:, None] * base
        n = self.n
        A = np.empty((n + 1, len(keys)))
        B = np.empty_like(A)
        P = np.empty_like(A)
        for s in range(0, n + 1, self.chunk):
            kk = np.arange(s, min(n + 1, s + self.chunk))
            E = np.exp(np.outer(kk * h, rule.phi))
            A[kk], B[kk], P[kk] = E @ wa, E @ wb, E @ base
        for j, key in enumerate(keys):
            self._cache[key] = (A[:n, j].copy(), B[:n, j].copy(), P[:, j].copy())


def _cell_weights(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """omega_k with int_0^{t_n} p(t_n - s) m(s) ds = sum_{k<n} omega_k m_{n-k} + B_n m_0."""
    n = len(A)
    w = np.empty(n + 1)
    w[0] = A[0] - B[0]
    w[1:n] = B[:n - 1] + A[1:n] - B[1:n]
    w[n] = B[n - 1]
    return w


def product_convolve(A: np.ndarray, B: np.ndarray, m: np.ndarray) -> np.ndarray:
    """int_0^{t_n} p(t_n - s) m(s) ds for piecewise-linear m, exact in p."""
    n = len(A)
    w = _cell_weights(A, B)
    full = fftconvolve(m, w[:n + 1])[:n + 1] if n > 64 else np.convolve(m, w)[:n + 1]
    out = full.copy()
    # the m_0 term uses B_n instead of omega_n
    out[1:] += (B - w[1:]) * m[0]
    out[0] = 0.0
    return out


def solve_volterra(beta: float, A: np.ndarray, B: np.ndarray, f: np.ndarray, leaf: int = 64) -> np.ndarray:
    """m = f + beta int_0^t p(t-s) m(s) ds on the uniform grid (divide and conquer + FFT)."""
    n = len(A)
    if len(f) != n + 1:
        raise ValueError("forcing must have one more sample than there are cells")
    w = _cell_weights(A, B)
    m = np.zeros(n + 1)
    m[0] = f[0]
    hist = np.zeros(n + 1)
    hist[1:] = B * m[0]
    den = 1.0 - beta * w[0]

    def rec(lo: int, hi: int) -> None:
        if hi - lo <= leaf:
            for k in range(lo, hi):
                m[k] = (f[k] + beta * hist[k]) / den
                hist[k + 1:hi] += w[1:hi - k] * m[k]
            return
        mid = (lo + hi) // 2
        rec(lo, mid)
        c = fftconvolve(m[lo:mid], w[:hi - lo])
        hist[mid:hi] += c[mid - lo:hi - lo]
        rec(mid, hi)

    if n:
        rec(1, n + 1)
    return m


# ---------------------------------------------------------------------------
# convolution


def convolve(f, g, grid, return_error: bool = False):
    """int_0^t f(t - s) g(s) ds on the grid by the trapezoid rule.

    Uniform grids use a discrete convolution; graded grids use trapezoid
    weights at the grid nodes with f(t - s) interpolated linearly.  The error
    estimate compares with the same rule on every other grid point.
    """
    f, g, t = (np.asarray(v, dtype=float) for v in (f, g, grid))
    if not (f.shape == g.shape == t.shape) or t.ndim != 1:
        raise ValueError("f, g and grid must be 1-d arrays of the same length")
    if t[0] != 0:
        raise ValueError("grid must start at t = 0")
    if np.any(np.diff(t) <= 0):
        raise ValueError("grid must be strictly increasing")
    out = _trapezoid_conv(f, g, t)
    if not return_error:
        return out
    if len(t) < 5:
        return out, np.full_like(out, np.nan)
    coarse = _trapezoid_conv(f[::2], g[::2], t[::2])
    diff = np.abs(out[::2] - coarse) / 3
    err = np.interp(t, t[::2], diff)
    return out, err


def _trapezoid_conv(f: np.ndarray, g: np.ndarray, t: np.ndarray) -> np.ndarray:
    n = len(t)
    if n == 1:
        return np.zeros(1)
    dt = np.diff(t)
    if np.allclose(dt, dt[0], rtol=1e-10, atol=0):
        h = dt[0]
        full = np.convolve(f, g)[:n] if n <= 4096 else fftconvolve(f, g)[:n]
        out = h * (full - 0.5 * (f * g[0] + f[0] * g))
        out[0] = 0.0
        return out
    out = np.zeros(n)
    for k in range(1, n):
        s = t[:k + 1]
        fv = np.interp(t[k] - s, t, f)
        out[k] = np.trapezoid(fv * g[:k + 1], s)
    return out


# ---------------------------------------------------------------------------
# solver


def _check_grid(grid) -> np.ndarray:
    t = np.asarray(grid, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("t_grid must be a nonempty 1-d array")
    if t[0] < 0 or np.any(np.diff(t) <= 0):
        raise ValueError("t_grid must be increasing with t >= 0")
    return t


class MomentSolver:
    """Moment series for one (kernel, law, lattice, grid, solver) experiment.

    Lower-order series are cached so m_n costs one convolution per order.
    """

    def __init__(self, kernel: TransitionKernel, law: BranchingLaw | None,
                 lattice: TruncatedLattice | None, t_grid, solver: str = "eigen",
                 trunc_check: bool = True, refine_check: bool = True,
                 leak_budget: float | None = None):
        if solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        self.kernel = kernel
        self.law = law if law is not None else build_branching({})
        self.solver = solver
        self.grid = _check_grid(t_grid)
        self.trunc_check = trunc_check
        self.refine_check = refine_check
        self.leak_budget = leak_budget
        if solver == "volterra":
            t = self.grid
            if t[0] != 0 or len(t) < 2 or not np.allclose(np.diff(t), t[1], rtol=1e-9, atol=0):
                raise ValueError("the volterra solver needs a uniform grid starting at 0")
            self.lattice = lattice
            self.h = float(t[1])
            self._lk = LatticeKernels(kernel, self.h, len(t) - 1)
        else:
            if lattice is None:
                raise ValueError("box solvers need a TruncatedLattice")
            if lattice.d != kernel.d:
                raise ValueError("lattice and kernel dimensions differ")
            self.lattice = lattice
        self._cache: dict = {}
        self._coarse: MomentSolver | None = None
        self._half: MomentSolver | None = None

    # --- reference solvers for the error estimates

    def _half_solver(self) -> MomentSolver | None:
        if self.solver == "volterra" or self.lattice.radius < 2:
            return None
        if self._half is None:
            half = TruncatedLattice(self.lattice.d, self.lattice.radius // 2)
            self._half = MomentSolver(self.kernel, self.law, half, self.grid, self.solver,
                                      trunc_check=False, refine_check=False)
        return self._half

    def _coarse_solver(self) -> MomentSolver | None:
        if self.solver != "volterra" or len(self.grid) < 5:
            return None
        if self._coarse is None:
            n2 = (len(self.grid) - 1) // 2
            self._coarse = MomentSolver(self.kernel, self.law, self.lattice,
                                        np.arange(n2 + 1) * 2 * self.h, "volterra",
                                        trunc_check=False, refine_check=False)
        return self._coarse

    # --- first moments: raw arrays

    def _raw_local(self, x: tuple, y: tuple, beta: float) -> tuple[np.ndarray, np.ndarray | None]:
        key = ("local", x, y, beta)
        if key in self._cache:
            return self._cache[key]
        if self.solver == "volterra":
            res = (self._volterra_moment(x, y, beta, None), None)
        else:
            lat = self.lattice
            ix, iy = lat.index(x), lat.index(y)
            prop = box_propagator(self.kernel, lat, beta)
            v0 = np.zeros(lat.size)
            v0[iy] = 1.0
            r = prop.out_rates()
            if self.solver == "eigen":
                vals = prop.apply(v0, self.grid, [ix])[0]
                leak = prop.apply(r, self.grid, [ix], mode="integral")[0]
            else:
                vals, leak = _rk_solve(prop, v0, self.grid, ix)
            res = (vals, leak)
        self._cache[key] = res
        return res

    def _raw_total(self, x: tuple, beta: float) -> tuple[np.ndarray, np.ndarray | None]:
        key = ("total", x, beta)
        if key in self._cache:
            return self._cache[key]
        if self.solver == "volterra":
            res = (self._volterra_moment(x, None, beta, None), None)
        else:
            lat = self.lattice
            ix = lat.index(x)
            prop = box_propagator(self.kernel, lat, beta)
            v0 = np.ones(lat.size)
            r = prop.out_rates()
            if self.solver == "eigen":
                vals = prop.apply(v0, self.grid, [ix])[0]
                leak = prop.apply(r, self.grid, [ix], mode="integral")[0]
            else:
                vals, leak = _rk_solve(prop, v0, self.grid, ix)
            res = (vals, leak)
        self._cache[key] = res
        return res

    def _volterra_moment(self, x: tuple, y: tuple | None, beta: float, g: np.ndarray | None) -> np.ndarray:
        """Solve m(t,x) = F_x(t) + int_0^t p(t-s,x,0) (beta m(s,0) + g(s)) ds.

        F is p(t,x,y) for a local moment (y given) and 1 for a total one; g is
        the branching forcing of an order >= 2 moment. All convolutions use
        the exact cell weights of p, so the fast initial decay of p needs no
        grid resolution.
        """
        lk = self._lk
        zero = (0,) * self.kernel.d
        if y is None:
            lk.prepare([zero, x])
            ones = np.ones_like(self.grid)
            f0, fx = ones, ones
        else:
            dxy = tuple(b - a for a, b in zip(x, y))
            lk.prepare([zero, x, y, dxy])
            f0, fx = lk.get(y)[2], lk.get(dxy)[2]
        A0, B0, _ = lk.get(zero)
        rhs0 = f0 if g is None else f0 + product_convolve(A0, B0, g)
        m0 = solve_volterra(beta, A0, B0, rhs0) if beta != 0 else rhs0
        if x == zero:
            return m0
        src = beta * m0 if g is None else beta * m0 + g
        if not np.any(src):
            return fx.copy()
        Ax, Bx, _ = lk.get(x)
        return fx + product_convolve(Ax, Bx, src)

    # --- packaging

    def _series(self, quantity: str, n: int, values: np.ndarray, leak, params: dict,
                ref: np.ndarray | None, error=None) -> MomentSeries:
        neg = values < 0
        clipped = float(-values[neg].min()) if np.any(neg) else 0.0
        values = np.where(neg, 0.0, values)
        trunc = None
        if ref is not None:
            nz = np.abs(values) > 0
            trunc = float(np.max(np.abs(values[nz] - ref[nz]) / np.abs(values[nz]))) if np.any(nz) else 0.0
        if leak is not None and self.leak_budget is not None and float(np.max(leak)) > self.leak_budget:
            raise BoxTooSmall(f"boundary leak {float(np.max(leak)):.3g} exceeds budget {self.leak_budget:.3g}")
        prov = "integral-recursion" if self.solver == "volterra" else "ODE"
        radius = None if self.solver == "volterra" else self.lattice.radius
        return MomentSeries(quantity, n, self.grid, values, prov, radius,
                            dict(params, kernel=self.kernel.fingerprint(), law=self.law.spec(),
                                 solver=self.solver),
                            leak, trunc, error, {"clipped": clipped})

    def _refine_error(self, coarse_values: np.ndarray | None, values: np.ndarray) -> np.ndarray | None:
        if coarse_values is None:
            return None
        m = len(coarse_values)
        diff = np.abs(values[: 2 * m - 1:2] - coarse_values)
        return np.interp(self.grid, self.grid[: 2 * m - 1:2], diff)

    def _reference(self, method: str, *args):
        """(values at half radius, coarse-grid values) for the error fields."""
        ref = coarse = None
        if self.trunc_check:
            half = self._half_solver()
            if half is not None and all(half.lattice.contains(a) for a in args[0]):
                ref = getattr(half, method)(*args[1])
        if self.refine_check:
            co = self._coarse_solver()
            if co is not None:
                coarse = getattr(co, method)(*args[1])
        return ref, coarse

    # --- public series

    def transition(self, x=0, y=0) -> MomentSeries:
        d = self.kernel.d
        x, y = _as_point(d, x), _as_point(d, y)
        vals, leak = self._raw_local(x, y, 0.0)
        ref, coarse = self._reference("_values_transition", (x, y), (x, y))
        s = self._series("local", 1, vals.copy(), leak, {"x": x, "y": y, "kind": "transition"},
                         ref, self._refine_error(coarse, vals))
        if self.solver != "volterra":
            lat = self.lattice
            prop = box_propagator(self.kernel, lat, 0.0)
            if self.solver == "eigen":
                s.diagnostics["mass"] = prop.apply(np.ones(lat.size), self.grid, [lat.index(x)])[0]
        return s

    def _values_transition(self, x, y):
        return self._raw_local(x, y, 0.0)[0]

    def _values_local(self, x, y, n):
        return self._local_values(x, y, n)[0]

    def _values_total(self, x, n):
        return self._total_values(x, n)[0]

    def m1_local(self, x=0, y=0) -> MomentSeries:
        return self.mn_local(x, y, 1)

    def m1_total(self, x=0) -> MomentSeries:
        return self.mn_total(x, 1)

    def mn_local(self, x=0, y=0, n: int = 2) -> MomentSeries:
        d = self.kernel.d
        x, y = _as_point(d, x), _as_point(d, y)
        if n < 1:
            raise ValueError("n must be >= 1")
        vals, leak, cerr = self._local_values(x, y, n)
        ref, coarse = self._reference("_values_local", (x, y), (x, y, n))
        err = self._refine_error(coarse, vals)
        if cerr is not None:
            err = cerr if err is None else err + cerr
        return self._series("local", n, vals.copy(), leak, {"x": x, "y": y}, ref, err)

    def mn_total(self, x=0, n: int = 2) -> MomentSeries:
        d = self.kernel.d
        x = _as_point(d, x)
        if n < 1:
            raise ValueError("n must be >= 1")
        vals, leak, cerr = self._total_values(x, n)
        ref, coarse = self._reference("_values_total", (x,), (x, n))
        err = self._refine_error(coarse, vals)
        if cerr is not None:
            err = cerr if err is None else err + cerr
        return self._series("total", n, vals.copy(), leak, {"x": x}, ref, err)

    # --- recursion

    def _local_values(self, x, y, n):
        key = ("mloc", x, y, n)
        if key in self._cache:
            return self._cache[key]
        beta = self.law.beta
        m1, leak = self._raw_local(x, y, beta)
        if n == 1:
            res = (m1, leak, None)
        else:
            zero = (0,) * self.kernel.d
            lower = [self._local_values(zero, y, k)[0] for k in range(1, n)]
            res = self._add_branching(m1, leak, x, lower, n, y)
        self._cache[key] = res
        return res

    def _total_values(self, x, n):
        key = ("mtot", x, n)
        if key in self._cache:
            return self._cache[key]
        beta = self.law.beta
        m1, leak = self._raw_total(x, beta)
        if n == 1:
            res = (m1, leak, None)
        else:
            zero = (0,) * self.kernel.d
            lower = [self._total_values(zero, k)[0] for k in range(1, n)]
            res = self._add_branching(m1, leak, x, lower, n)
        self._cache[key] = res
        return res

    def _add_branching(self, m1, leak, x, lower, n, y=None):
        gv = g_n(self.law, n, lower)
        if np.ndim(gv) == 0 or not np.any(gv):
            return m1, leak, np.zeros_like(m1)
        if self.solver == "volterra":
            vals = self._volterra_moment(x, y, self.law.beta, np.asarray(gv, dtype=float))
            return vals, None, None
        zero = (0,) * self.kernel.d
        mx0 = self._raw_local(x, zero, self.law.beta)[0]
        conv, err = convolve(mx0, gv, self.grid, return_error=True)
        return m1 + conv, leak, err


# ---------------------------------------------------------------------------
# functional interface


def _solver_for(kernel, law, lattice, t_grid, solver, **kw) -> MomentSolver:
    return MomentSolver(kernel, law, lattice, t_grid, solver, **kw)


def transition_probability(kernel, lattice, t_grid, x=0, y=0, solver: str = "eigen", **kw) -> MomentSeries:
    return _solver_for(kernel, None, lattice, t_grid, solver, **kw).transition(x, y)


def m1_local(kernel, law, lattice, t_grid, x=0, y=0, solver: str = "eigen", **kw) -> MomentSeries:
    return _solver_for(kernel, law, lattice, t_grid, solver, **kw).m1_local(x, y)


def m1_total(kernel, law, lattice, t_grid, x=0, solver: str = "eigen", **kw) -> MomentSeries:
    return _solver_for(kernel, law, lattice, t_grid, solver, **kw).m1_total(x)


def mn_local(kernel, law, lattice, t_grid, x=0, y=0, n: int = 2, solver: str = "eigen", **kw) -> MomentSeries:
    if n < 2:
        raise ValueError("mn_local needs n >= 2 (use m1_local)")
    return _solver_for(kernel, law, lattice, t_grid, solver, **kw).mn_local(x, y, n)


def mn_total(kernel, law, lattice, t_grid, x=0, n: int = 2, solver: str = "eigen", **kw) -> MomentSeries:
    if n < 2:
        raise ValueError("mn_total needs n >= 2 (use m1_total)")
    return _solver_for(kernel, law, lattice, t_grid, solver, **kw).mn_total(x, n)
