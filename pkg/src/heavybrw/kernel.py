"""Heavy-tailed lattice kernels, branching laws and the g_n functional.

A kernel stores the jump intensities ``a(z) = H(z/|z|) / |z|**(d + alpha)``
exactly for ``0 < |z| <= R`` (Euclidean norm).  Everything beyond the table
radius is folded into the diagonal ``a0`` through an exact lattice sum when
``H`` is constant (Hurwitz zeta for d = 1, Epstein zeta for d >= 2) and
through a continuum comparison otherwise.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import special

DEFAULT_RADIUS = {1: 100_000, 2: 64, 3: 20}
G_N_MAX_ORDER = 12


class KernelError(ValueError):
    """Invalid kernel or branching-law input."""


# ---------------------------------------------------------------------------
# angular weights


def sphere_area(d: int) -> float:
    """Surface measure of the unit sphere in R^d (2 for d = 1)."""
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


@dataclass(frozen=True)
class AngularWeight:
    """Positive, centrally symmetric weight H on unit directions.

    ``kind`` is ``"constant"`` (H = value), ``"quartic"``
    (H = a + b * sum(u_i**4)) or ``"callable"`` (opaque, not serializable).
    """

    kind: str = "constant"
    params: tuple = (1.0,)
    fn: Callable | None = field(default=None, compare=False, repr=False)

    def __call__(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "constant":
            return np.full(u.shape[:-1], float(self.params[0]))
        if self.kind == "quartic":
            a, b = self.params
            return a + b * np.sum(u**4, axis=-1)
        return np.asarray(self.fn(u), dtype=float)

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    @property
    def cubic_invariant(self) -> bool:
        # invariant under coordinate permutations and sign flips
        return self.kind in ("constant", "quartic")

    def sphere_integral(self, d: int) -> float:
        area = sphere_area(d)
        if self.kind == "constant":
            return float(self.params[0]) * area
        if self.kind == "quartic":
            a, b = self.params
            return area * (a + 3.0 * b / (d + 2))
        dirs, w = sphere_rule(d)
        return float(np.dot(w, self(dirs)))

    def describe(self) -> dict:
        if self.kind == "callable":
            return {"kind": "callable", "name": getattr(self.fn, "__name__", "H")}
        return {"kind": self.kind, "params": [float(p) for p in self.params]}

    @classmethod
    def from_spec(cls, spec) -> "AngularWeight":
        if spec is None:
            return cls()
        if isinstance(spec, AngularWeight):
            return spec
        if isinstance(spec, (int, float)):
            return cls("constant", (float(spec),))
        if callable(spec):
            return cls("callable", (), fn=spec)
        if isinstance(spec, Mapping):
            kind = spec.get("kind", "constant")
            params = tuple(float(p) for p in spec.get("params", (1.0,)))
            if kind == "constant" and len(params) == 1:
                return cls(kind, params)
            if kind == "quartic" and len(params) == 2:
                return cls(kind, params)
            raise KernelError(f"unknown H descriptor {dict(spec)!r}")
        raise KernelError(f"cannot interpret H = {spec!r}")


def sphere_rule(d: int, n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Directions and weights integrating over the unit sphere of R^d."""
    if d == 1:
        return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    if d == 2:
        n = n or 512
        phi = 2 * np.pi * (np.arange(n) + 0.5) / n
        return np.column_stack([np.cos(phi), np.sin(phi)]), np.full(n, 2 * np.pi / n)
    if d == 3:
        # Fibonacci lattice, equal weights
        n = n or 4000
        k = np.arange(n) + 0.5
        zc = 1 - 2 * k / n
        rho = np.sqrt(1 - zc**2)
        ang = np.pi * (1 + 5**0.5) * k
        dirs = np.column_stack([rho * np.cos(ang), rho * np.sin(ang), zc])
        return dirs, np.full(n, 4 * np.pi / n)
    raise KernelError(f"sphere rule not available for d = {d}")


def random_directions(d: int, n: int, seed: int = 0) -> np.ndarray:
    g = np.random.default_rng(seed).standard_normal((n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# lattice sums


def lattice_zeta(d: int, s: float) -> float:
    """Sum of |z|**(-s) over nonzero z in Z^d, for s > d.

    d = 1 is 2*zeta(s).  For d >= 2 the Gaussian splitting of the theta
    function is used; both lattice sums then converge like exp(-pi*n^2).
    """
    if s <= d:
        raise KernelError("lattice sum diverges for s <= d")
    if d == 1:
        return 2.0 * float(special.zeta(s))
    sig = s / 2.0
    a = d / 2.0 - sig  # negative
    pts = _shell_points(d, 7)
    q = np.pi * np.sum(pts.astype(float) ** 2, axis=1)
    upper_sig = special.gammaincc(sig, q) * special.gamma(sig)
    # Gamma(a, q) for a < 0 from Gamma(a + 1, q) = a Gamma(a, q) + q^a e^-q
    upper_a = (special.gammaincc(a + 1, q) * special.gamma(a + 1) - q**a * np.exp(-q)) / a
    total = -1.0 / sig + 1.0 / (sig - d / 2.0)
    total += np.sum(upper_sig * q ** (-sig)) + np.sum(upper_a * q ** (-a))
    return float(total * np.pi**sig / special.gamma(sig))


def _shell_points(d: int, m: int) -> np.ndarray:
    axes = [np.arange(-m, m + 1)] * d
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    return pts[np.any(pts != 0, axis=1)]


def ball_points(d: int, R: int) -> np.ndarray:
    """Nonzero lattice points with Euclidean norm <= R."""
    if d == 1:
        z = np.arange(1, R + 1)
        return np.concatenate([z, -z])[:, None]
    pts = _shell_points(d, R)
    return pts[np.sum(pts.astype(np.int64) ** 2, axis=1) <= R * R]


# ---------------------------------------------------------------------------
# continuum tail profile


class TailProfile:
    """J(a) = int_a^inf u^(-1-alpha) (1 - Lam(u)) du for the radial profile
    Lam of a d-dimensional isotropic cosine average (cos, J0, sinc, ...)."""

    _PANEL = 0.5
    _A_SERIES = 2.0
    _A_MAX = 4096.0

    def __init__(self, d: int, alpha: float):
        self.d, self.alpha = d, alpha
        nu = d / 2.0
        self.j0 = float(-special.gamma(nu) * 2.0 ** (-alpha - 1) * special.gamma(-alpha / 2)
                        / special.gamma((d + alpha) / 2))
        k = np.arange(1, 40)
        self._ck = np.exp(special.gammaln(nu) - k * np.log(4.0) - special.gammaln(k + 1)
                          - special.gammaln(nu + k)) * (-1.0) ** (k + 1)
        self._k = k
        self._x, self._w = np.polynomial.legendre.leggauss(10)
        edges = np.arange(self._A_SERIES, self._A_MAX + self._PANEL, self._PANEL)
        pieces = np.array([self._panel(lo, hi) for lo, hi in zip(edges[:-1], edges[1:])])
        self._edges = edges
        self._cum = self._series(self._A_SERIES) + np.concatenate([[0.0], np.cumsum(pieces)])

    def profile(self, u):
        u = np.asarray(u, dtype=float)
        if self.d == 1:
            return np.cos(u)
        if self.d == 3:
            return np.sinc(u / np.pi)
        nu = self.d / 2.0
        with np.errstate(invalid="ignore", divide="ignore"):
            out = special.gamma(nu) * (2.0 / u) ** (nu - 1) * special.jv(nu - 1, u)
        return np.where(u == 0, 1.0, out)

    def _series(self, a):
        a = np.asarray(a, dtype=float)
        p = 2 * self._k - self.alpha
        return np.sum(self._ck * a[..., None] ** p / p, axis=-1)

    def _integrand(self, u):
        return u ** (-1 - self.alpha) * (1 - self.profile(u))

    def _panel(self, lo, hi):
        u = 0.5 * (hi - lo) * self._x + 0.5 * (hi + lo)
        return 0.5 * (hi - lo) * np.dot(self._w, self._integrand(u))

    def head(self, a):
        """int_0^a of the integrand."""
        a = np.asarray(a, dtype=float)
        out = np.empty_like(a)
        small = a <= self._A_SERIES
        out[small] = self._series(a[small])
        big = ~small & (a <= self._A_MAX)
        if np.any(big):
            ab = a[big]
            idx = np.minimum(((ab - self._A_SERIES) / self._PANEL).astype(int), len(self._cum) - 2)
            lo = self._edges[idx]
            h = ab - lo
            u = 0.5 * h[:, None] * (self._x + 1) + lo[:, None]
            out[big] = self._cum[idx] + 0.5 * h * (self._integrand(u) @ self._w)
        huge = a > self._A_MAX
        out[huge] = self.j0 - a[huge] ** (-self.alpha) / self.alpha
        return out

    def __call__(self, a):
        return self.j0 - self.head(a)


# ---------------------------------------------------------------------------
# transition kernel


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    """Symmetric heavy-tailed intensity matrix a(z) on Z^d.

    ``offsets``/``values`` hold the exactly tabulated entries.  ``tail_mass``
    is the (estimated) intensity of jumps beyond ``table_radius``, already
    included in ``a0``; ``tail_sum_error`` bounds the error of that estimate.
    """

    d: int
    alpha: float
    H: AngularWeight
    table_radius: int
    offsets: np.ndarray
    values: np.ndarray
    a0: float
    tail_mass: float
    tail_sum_error: float
    effective_radius: float

    @property
    def ratio(self) -> float:
        return self.d / self.alpha

    @property
    def total_rate(self) -> float:
        return -self.a0

    def a(self, z) -> float | np.ndarray:
        """Intensity a(z) from the exact formula (a0 at the origin)."""
        z = np.atleast_2d(np.asarray(z, dtype=float).reshape(-1, self.d))
        r = np.linalg.norm(z, axis=1)
        out = np.empty(len(z))
        nz = r > 0
        out[nz] = self.H(z[nz] / r[nz, None]) / r[nz] ** (self.d + self.alpha)
        out[~nz] = self.a0
        return out if out.size > 1 else float(out[0])

    def spec(self) -> dict:
        return {"d": self.d, "alpha": self.alpha, "R": self.table_radius, "H": self.H.describe()}

    def fingerprint(self) -> str:
        return f"d{self.d}-a{self.alpha!r}-R{self.table_radius}-{self.H.describe()}"

    def half_table(self) -> tuple[np.ndarray, np.ndarray]:
        """One representative of each {z, -z} pair."""
        z = self.offsets
        first = np.argmax(z != 0, axis=1)
        keep = z[np.arange(len(z)), first] > 0
        return z[keep], self.values[keep]

    @property
    def _profile(self) -> TailProfile:
        cache = self.__dict__.setdefault("_cache", {})
        key = ("profile", self.d if self.H.is_constant else 1)
        if key not in cache:
            cache[key] = TailProfile(key[1], self.alpha)
        return cache[key]

    def leading_symbol_constant(self, direction=None) -> float:
        """C such that phi(theta) ~ -C |theta|^alpha as theta -> 0 along direction."""
        if self.d == 1:
            return 2 * self.H.params[0] * self._j1()
        if self.H.is_constant:
            return self.H.params[0] * sphere_area(self.d) * TailProfile(self.d, self.alpha).j0
        dirs, w = sphere_rule(self.d)
        direction = np.asarray(direction, float) / np.linalg.norm(direction)
        c = np.abs(dirs @ direction)
        return float(np.dot(w, self.H(dirs) * c**self.alpha) * self._j1())

    def _j1(self) -> float:
        a = self.alpha
        return math.pi / (2 * math.gamma(1 + a) * math.sin(math.pi * a / 2))

    def h_constant(self) -> float:
        """Leading coefficient of p(t,0,0) ~ h t^(-d/alpha), from the small-theta symbol."""
        d, a = self.d, self.alpha
        if self.H.is_constant or d == 1:
            c = self.leading_symbol_constant()
            return sphere_area(d) * math.gamma(d / a) / (a * (2 * math.pi) ** d * c ** (d / a))
        dirs, w = sphere_rule(d, 400 if d == 2 else 1000)
        cs = np.array([self.leading_symbol_constant(u) for u in dirs])
        return float(np.dot(w, cs ** (-d / a)) * math.gamma(d / a) / (a * (2 * math.pi) ** d))


def intensity(kernel: TransitionKernel, offsets: np.ndarray) -> np.ndarray:
    """a(z) for an integer array of offsets with trailing dimension d."""
    z = np.asarray(offsets)
    r = np.sqrt(np.sum(z.astype(float) ** 2, axis=-1))
    out = np.full(r.shape, kernel.a0)
    nz = r > 0
    if kernel.H.is_constant:
        out[nz] = kernel.H.params[0] / r[nz] ** (kernel.d + kernel.alpha)
    else:
        u = z[nz].astype(float) / r[nz][:, None]
        out[nz] = kernel.H(u) / r[nz] ** (kernel.d + kernel.alpha)
    return out


def _validate_H(H: AngularWeight, d: int) -> None:
    dirs = random_directions(d, 1000) if d > 1 else np.array([[1.0], [-1.0]])
    vals = H(dirs)
    if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
        raise KernelError("H not positive")
    if not np.allclose(vals, H(-dirs), rtol=1e-12, atol=0):
        raise KernelError("H not symmetric")


def build_kernel(d: int, alpha: float, H=None, R: int | None = None) -> TransitionKernel:
    """Tabulate a(z) = H(z/|z|)/|z|^(d+alpha) on the ball |z| <= R and fix a0."""
    if int(d) != d or d < 1:
        raise KernelError(f"d must be a positive integer, got {d!r}")
    d = int(d)
    if not (0.0 < alpha < 2.0):
        raise KernelError(f"alpha must lie in (0, 2), got {alpha!r}")
    if d > 3:
        raise KernelError("only d <= 3 is supported")
    R = DEFAULT_RADIUS[d] if R is None else int(R)
    if R < 2:
        raise KernelError(f"table radius R must be >= 2, got {R}")
    H = AngularWeight.from_spec(H)
    _validate_H(H, d)
    if d == 1 and H.kind != "constant":
        # on S^0 a symmetric function is a constant
        H = AngularWeight("constant", (float(H(np.array([[1.0]]))[0]),))

    z = ball_points(d, R)
    r = np.linalg.norm(z.astype(float), axis=1)
    vals = H(z / r[:, None]) / r ** (d + alpha)
    order = np.lexsort(z.T[::-1])
    z, vals = z[order], vals[order]
    tab_sum = math.fsum(vals)
    s = d + alpha

    if d == 1:
        tail = 2.0 * H.params[0] * float(special.zeta(s, R + 1))
        err = 8 * np.finfo(float).eps * (tab_sum + tail)
    elif H.is_constant:
        c = float(H.params[0])
        tail = c * lattice_zeta(d, s) - tab_sum
        err = 64 * np.finfo(float).eps * (tab_sum + tail)
    else:
        const_tail = lattice_zeta(d, s) - math.fsum(1.0 / r**s)
        r_e = (sphere_area(d) / (alpha * const_tail)) ** (1 / alpha)
        tail = H.sphere_integral(d) * r_e ** (-alpha) / alpha
        # lattice/continuum mismatch of the angular modulation, O(1/R)
        err = abs(tail - float(np.mean(H(random_directions(d, 2000)))) * const_tail) + tail / R
    # radius of the continuum ball carrying the same tail mass as the lattice
    area = sphere_area(d) * (H.params[0] if H.is_constant else H.sphere_integral(d) / sphere_area(d))
    r_eff = (area / (alpha * tail)) ** (1 / alpha)

    a0 = -(tab_sum + tail)
    z.setflags(write=False)
    vals.setflags(write=False)
    kernel = TransitionKernel(d=d, alpha=float(alpha), H=H, table_radius=R, offsets=z,
                              values=vals, a0=a0, tail_mass=tail, tail_sum_error=float(err),
                              effective_radius=float(r_eff))
    _check_invariants(kernel)
    return kernel


def _check_invariants(k: TransitionKernel) -> None:
    if not (np.isfinite(k.a0) and k.a0 < 0):
        raise KernelError("a0 must be finite and negative")
    if np.any(k.values < 0):
        raise KernelError("negative intensity")
    # irreducibility: every unit vector is an admissible jump
    for i in range(k.d):
        e = np.zeros(k.d, dtype=k.offsets.dtype)
        e[i] = 1
        if not np.any(np.all(k.offsets == e, axis=1)):
            raise KernelError("support does not generate Z^d")


def row_sum_residual(kernel: TransitionKernel) -> float:
    """|a0 + sum of tabulated a(z) + tail estimate| (zero by construction up to rounding)."""
    return abs(kernel.a0 + math.fsum(kernel.values) + kernel.tail_mass)


def tail_slope(kernel: TransitionKernel) -> float:
    """Least-squares slope of log a(z) against log |z| for R/4 <= |z| <= R."""
    r = np.linalg.norm(kernel.offsets.astype(float), axis=1)
    sel = (r >= kernel.table_radius / 4) & (r <= kernel.table_radius)
    return float(np.polyfit(np.log(r[sel]), np.log(kernel.values[sel]), 1)[0])


# ---------------------------------------------------------------------------
# symbol


def _as_theta(kernel: TransitionKernel, theta) -> tuple[np.ndarray, tuple]:
    th = np.asarray(theta, dtype=float)
    if kernel.d == 1 and (th.ndim == 0 or th.shape[-1] != 1):
        shape = th.shape
        th = th.reshape(-1, 1)
    else:
        if th.shape[-1] != kernel.d:
            raise ValueError(f"theta must have trailing dimension {kernel.d}")
        shape = th.shape[:-1]
        th = th.reshape(-1, kernel.d)
    if np.any(np.abs(th) > np.pi * (1 + 1e-12)):
        raise ValueError("theta must lie in [-pi, pi]^d")
    return th, shape


TAYLOR_CUTOFF = 0.05  # |theta| R below which the table sum is expanded to order 6


def _moment_forms(kernel: TransitionKernel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """sum_z a(z) z^(x 2k) as quadratic forms in theta^(x k), k = 1, 2, 3."""
    cache = kernel.__dict__.setdefault("_cache", {})
    if "moments" not in cache:
        zh, vh = kernel.half_table()
        z = zh.astype(float)
        d = kernel.d
        z2 = np.einsum("ni,nj->nij", z, z).reshape(len(z), d * d)
        z3 = np.einsum("ni,nj->nij", z2, z).reshape(len(z), d ** 3)
        forms = tuple(2.0 * (zk * vh[:, None]).T @ zk for zk in (z, z2, z3))
        cache["moments"] = forms
    return cache["moments"]


def _table_symbol(kernel: TransitionKernel, th: np.ndarray) -> np.ndarray:
    out = np.empty(len(th))
    small = np.linalg.norm(th, axis=1) * kernel.table_radius <= TAYLOR_CUTOFF
    if np.any(small):
        m2, m4, m6 = _moment_forms(kernel)
        t1 = th[small]
        t2 = np.einsum("ni,nj->nij", t1, t1).reshape(len(t1), -1)
        t3 = np.einsum("ni,nj->nij", t2, t1).reshape(len(t1), -1)
        q = [np.einsum("ni,ij,nj->n", t, m, t) for t, m in ((t1, m2), (t2, m4), (t3, m6))]
        out[small] = -q[0] / 2 + q[1] / 24 - q[2] / 720
    big = np.flatnonzero(~small)
    if big.size:
        zh, vh = kernel.half_table()
        zh = zh.astype(float)
        step = max(1, int(2e7 // max(len(vh), 1)))
        for i in range(0, big.size, step):
            rows = big[i:i + step]
            arg = th[rows] @ zh.T
            out[rows] = -4.0 * (np.sin(0.5 * arg) ** 2 @ vh)
    return out


@lru_cache(maxsize=64)
def _series_coeffs(alpha: float, n_terms: int = 40) -> tuple[float, np.ndarray]:
    lead = -math.pi / (2 * math.gamma(1 + alpha) * math.sin(math.pi * alpha / 2))
    j = np.arange(1, n_terms + 1)
    coef = (-1.0) ** j * special.zeta(1 + alpha - 2 * j) / special.factorial(2 * j)
    return lead, coef


def _series_symbol_1d(kernel: TransitionKernel, th: np.ndarray) -> np.ndarray:
    # 2c [Re Li_{1+alpha}(e^{i theta}) - zeta(1+alpha)], expanded around theta = 0
    lead, coef = _series_coeffs(kernel.alpha)
    t = np.abs(th[:, 0])
    t2 = t * t
    poly = np.zeros_like(t)
    for c in coef[::-1]:
        poly = (poly + c) * t2
    return 2 * kernel.H.params[0] * (lead * t**kernel.alpha + poly)


def _tail_correction(kernel: TransitionKernel, th: np.ndarray) -> np.ndarray:
    # continuum estimate of sum_{|z|>R} a(z)(cos<theta,z> - 1)
    r = np.linalg.norm(th, axis=1)
    prof = kernel._profile
    if kernel.H.is_constant:
        c = kernel.H.params[0] * sphere_area(kernel.d)
        return -c * r**kernel.alpha * prof(r * kernel.effective_radius)
    dirs, w = sphere_rule(kernel.d, 256 if kernel.d == 2 else 600)
    hw = kernel.H(dirs) * w
    proj = np.abs(th @ dirs.T)
    vals = proj**kernel.alpha * prof((proj * kernel.effective_radius).ravel()).reshape(proj.shape)
    return -(vals @ hw)


def symbol(kernel: TransitionKernel, theta, method: str = "auto"):
    """phi(theta) = sum_z a(z) cos<theta, z>.

    ``method="table"`` sums the tabulated entries only (with the tabulated
    diagonal, so phi(0) = 0 exactly and phi <= 0); the discarded tail mass
    makes this an approximation that is poor for |theta| << 1/R.
    ``"auto"`` is exact for d = 1 (closed-form expansion) and adds a
    continuum correction for the jumps beyond the table when d >= 2.
    """
    th, shape = _as_theta(kernel, theta)
    if method == "table":
        out = _table_symbol(kernel, th)
    elif method in ("auto", "exact"):
        if kernel.d == 1:
            out = _series_symbol_1d(kernel, th)
        elif method == "exact":
            raise ValueError("exact symbol only available for d = 1")
        else:
            out = _table_symbol(kernel, th) + _tail_correction(kernel, th)
    else:
        raise ValueError(f"unknown symbol method {method!r}")
    out = np.minimum(out, 0.0)
    return float(out[0]) if shape == () else out.reshape(shape)


def symbol_small_theta_bounds(kernel: TransitionKernel, theta_grid) -> tuple[float, float]:
    """Empirical min/max of |phi(theta)| / |theta|^alpha over a grid of small theta."""
    th, _ = _as_theta(kernel, theta_grid)
    norms = np.linalg.norm(th, axis=1)
    if np.any(norms == 0):
        raise ValueError("theta grid must exclude 0")
    ratio = np.abs(symbol(kernel, th)) / norms**kernel.alpha
    lo, hi = float(ratio.min()), float(ratio.max())
    if not np.isfinite(hi) or lo <= 0 or hi / lo > 1e3:
        raise KernelError(f"|phi|/|theta|^alpha not bounded away from 0/inf: [{lo}, {hi}]")
    return lo, hi


# ---------------------------------------------------------------------------
# branching law


@dataclass(frozen=True)
class BranchingLaw:
    """Continuous-time Galton-Watson law at the source with rates b_n (n != 1)."""

    b: Mapping[int, float]
    b1: float
    beta: float
    factorial_moments: tuple[float, ...]

    @property
    def total_rate(self) -> float:
        return -self.b1

    def factorial_moment(self, r: int) -> float:
        if r < 1:
            raise ValueError("r must be >= 1")
        if r <= len(self.factorial_moments):
            return self.factorial_moments[r - 1]
        return _factorial_moment(self.b, self.b1, r)

    def spec(self) -> dict:
        return {"b": {int(k): float(v) for k, v in sorted(self.b.items())}}


def _falling(n: int, r: int) -> int:
    out = 1
    for k in range(r):
        out *= n - k
    return out


def _factorial_moment(b: Mapping[int, float], b1: float, r: int) -> float:
    terms = [_falling(n, r) * v for n, v in b.items()]
    if r == 1:
        terms.append(b1)
    return math.fsum(terms)


def build_branching(b: Mapping | None = None, r_max: int = G_N_MAX_ORDER) -> BranchingLaw:
    b = {} if b is None else b
    clean: dict[int, float] = {}
    for n, v in b.items():
        n_int = int(n)
        if n_int != n or n_int < 0:
            raise KernelError(f"offspring number must be a nonnegative integer, got {n!r}")
        if n_int == 1:
            raise KernelError("b_1 is determined by the other rates; do not give it")
        if not v >= 0:
            raise KernelError(f"negative rate b_{n_int} = {v}")
        if v > 0:
            clean[n_int] = float(v)
    b1 = -math.fsum(clean.values())
    moments = tuple(_factorial_moment(clean, b1, r) for r in range(1, r_max + 1))
    return BranchingLaw(b=dict(sorted(clean.items())), b1=b1, beta=moments[0],
                        factorial_moments=moments)


# ---------------------------------------------------------------------------
# g_n


def compositions(n: int, r: int):
    """Ordered tuples of r positive integers summing to n."""
    if r == 1:
        yield (n,)
        return
    for first in range(1, n - r + 2):
        for rest in compositions(n - first, r - 1):
            yield (first,) + rest


@lru_cache(maxsize=None)
def _g_terms(n: int) -> tuple[tuple[int, int, tuple[int, ...]], ...]:
    """(r, multiplicity * multinomial, sorted parts) grouped over compositions."""
    fact = [math.factorial(k) for k in range(n + 1)]
    grouped: dict[tuple[int, tuple[int, ...]], int] = {}
    for r in range(2, n + 1):
        for comp in compositions(n, r):
            coef = fact[n]
            for i in comp:
                coef //= fact[i]
            key = (r, tuple(sorted(comp)))
            grouped[key] = grouped.get(key, 0) + coef
    return tuple((r, c, parts) for (r, parts), c in sorted(grouped.items()))


def g_n(law: BranchingLaw, n: int, lower_moments: Sequence) -> float | np.ndarray:
    """sum_r beta^(r)/r! sum_{i_1+..+i_r=n} n!/(i_1!..i_r!) m_{i_1}..m_{i_r}.

    ``lower_moments`` holds m_1..m_{n-1}; entries may be arrays (evaluated
    pointwise, e.g. along a time grid).
    """
    if n < 2:
        raise ValueError("g_n needs n >= 2")
    if n > G_N_MAX_ORDER:
        raise ValueError(f"g_n limited to n <= {G_N_MAX_ORDER}")
    if len(lower_moments) != n - 1:
        raise ValueError(f"expected {n - 1} lower moments, got {len(lower_moments)}")
    m = [np.asarray(v, dtype=float) for v in lower_moments]
    total = np.zeros(np.broadcast(*m).shape) if m else 0.0
    for r, coef, parts in _g_terms(n):
        br = law.factorial_moment(r)
        if br == 0:
            continue
        prod = 1.0
        for i in parts:
            prod = prod * m[i - 1]
        total = total + (br / math.factorial(r)) * coef * prod
    return float(total) if np.ndim(total) == 0 else total


def g_n_bruteforce(law: BranchingLaw, n: int, lower_moments: Sequence[float]) -> float:
    """Reference g_n by enumerating every ordered tuple in {1..n}^r."""
    total = 0.0
    for r in range(2, n + 1):
        inner = 0.0
        for tup in itertools.product(range(1, n + 1), repeat=r):
            if sum(tup) != n:
                continue
            coef = math.factorial(n)
            prod = 1.0
            for i in tup:
                coef /= math.factorial(i)
                prod *= lower_moments[i - 1]
            inner += coef * prod
        total += law.factorial_moment(r) / math.factorial(r) * inner
    return total


# ---------------------------------------------------------------------------
# serialization


def kernel_from_spec(spec: Mapping) -> TransitionKernel:
    return build_kernel(spec["d"], spec["alpha"], spec.get("H"), spec.get("R"))


def law_from_spec(spec: Mapping | None) -> BranchingLaw:
    spec = spec or {}
    return build_branching({int(k): float(v) for k, v in (spec.get("b") or {}).items()})
