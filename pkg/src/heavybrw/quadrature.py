"""Quadrature over the Brillouin zone [-pi, pi]^d for integrands singular at 0.

The zone is reduced to the simplex pi >= t_1 >= t_2 >= ... >= t_d >= 0
when the kernel is invariant under signed coordinate permutations (always
true for d = 1), otherwise every image of the simplex is visited.  On the
simplex t_1 = r, t_k = r * v_2 * ... * v_k (Jacobian r^(d-1) v_2^(d-2) ...),
and r is split into geometric panels accumulating at 0 plus uniform
subpanels sized to the oscillation of cos<theta, delta>.  The part
0 < r < r_min is extrapolated from the two innermost panels as a geometric
series, which is exact for integrands ~ r^kappa.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .kernel import TransitionKernel, symbol

N_GEOMETRIC = 48


class DivergentIntegral(ArithmeticError):
    """The requested lattice Green function is infinite."""


@dataclass(frozen=True, eq=False)
class FourierRule:
    nodes: np.ndarray  # (M, d)
    weights: np.ndarray  # (M,), includes Jacobian and (2 pi)^-d
    phi: np.ndarray  # symbol at nodes
    panel: np.ndarray  # geometric panel index, 0 = outermost
    images: np.ndarray | None  # (G, d, d) signed permutations, None if nodes cover the zone
    n_panels: int

    def trig(self, deltas: np.ndarray) -> np.ndarray:
        """(M, n_delta) matrix of sum over images of cos<theta, g delta>."""
        deltas = np.atleast_2d(np.asarray(deltas, dtype=float))
        if self.images is None:
            return np.cos(self.nodes @ deltas.T)
        imgs = np.einsum("gij,nj->gni", self.images, deltas)  # (G, n, d)
        out = np.zeros((len(self.nodes), len(deltas)))
        for g in range(len(imgs)):
            out += np.cos(self.nodes @ imgs[g].T)
        return out

    def one_minus_cos(self, delta: np.ndarray) -> np.ndarray:
        """sum over images of 1 - cos<theta, g delta>, without cancellation."""
        delta = np.asarray(delta, dtype=float).reshape(-1)
        if self.images is None:
            return 2 * np.sin(0.5 * (self.nodes @ delta)) ** 2
        out = np.zeros(len(self.nodes))
        for g in self.images:
            out += 2 * np.sin(0.5 * (self.nodes @ (g @ delta))) ** 2
        return out

    def integrate(self, values: np.ndarray, deltas) -> tuple[np.ndarray, np.ndarray]:
        """Integral of values(theta) * cos<theta, delta> over the zone, / (2 pi)^d.

        Returns (estimate, remainder_error).  The contribution of r < r_min is
        extrapolated from the innermost panel ratio; remainder_error is the
        change in that extrapolation when the next panel pair is used instead.
        Raises DivergentIntegral if the innermost panels do not decay.
        """
        return self.integrate_raw(values[:, None] * self.trig(deltas))

    def integrate_raw(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Like ``integrate`` for integrands already summed over the images."""
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        contrib = self.weights[:, None] * values
        per_panel = np.zeros((self.n_panels, values.shape[1]))
        np.add.at(per_panel, self.panel, contrib)
        inner, outer, prev = per_panel[-1], per_panel[-2], per_panel[-3]
        with np.errstate(divide="ignore", invalid="ignore"):
            rho = np.where((inner == 0) & (outer == 0), 0.0, inner / outer)
            rho_prev = np.where((outer == 0) & (prev == 0), 0.0, outer / prev)
        if np.any(~np.isfinite(rho)) or np.any(rho >= 1 - 1e-3):
            raise DivergentIntegral("integrand is not integrable at theta = 0")
        remainder = inner * rho / (1 - rho)
        rho_prev = np.clip(np.nan_to_num(rho_prev), -0.999, 0.999)
        alt = inner * rho_prev / (1 - rho_prev)
        rem_err = np.abs(remainder - alt) + 1e-14 * np.abs(remainder)
        return per_panel.sum(axis=0) + remainder, rem_err


def signed_permutations(d: int) -> np.ndarray:
    mats = []
    for perm in itertools.permutations(range(d)):
        for signs in itertools.product((1.0, -1.0), repeat=d):
            m = np.zeros((d, d))
            for i, p in enumerate(perm):
                m[i, p] = signs[i]
            mats.append(m)
    return np.array(mats)


def _panels(n_geo: int, budget: float) -> list[tuple[float, float, int]]:
    """(lo, hi, geometric index) covering [pi 2^-n_geo, pi]."""
    out = []
    for k in range(n_geo):
        hi = math.pi * 2.0**-k
        lo = hi / 2
        m = max(1, math.ceil((hi - lo) * (budget + 1) / math.pi))
        edges = np.linspace(lo, hi, m + 1)
        out.extend((a, b, k) for a, b in zip(edges[:-1], edges[1:]))
    return out


def build_rule(kernel: TransitionKernel, budget: float = 0.0, order: int = 12,
               n_geo: int = N_GEOMETRIC) -> FourierRule:
    """Nodes/weights for phase budget |delta|_1 <= budget."""
    d = kernel.d
    x, w = np.polynomial.legendre.leggauss(order)
    rs, rw, pid = [], [], []
    for lo, hi, k in _panels(n_geo, budget):
        rs.append(0.5 * (hi - lo) * x + 0.5 * (hi + lo))
        rw.append(0.5 * (hi - lo) * w)
        pid.append(np.full(order, k))
    r, wr, panel = np.concatenate(rs), np.concatenate(rw), np.concatenate(pid)

    if d == 1:
        nodes = r[:, None]
        weights = wr.copy()
        panel_all = panel
    else:
        nv = order + int(math.ceil(1.5 * budget))
        xv, wv = np.polynomial.legendre.leggauss(nv)
        v, wvv = 0.5 * (xv + 1), 0.5 * wv
        grids = np.meshgrid(*([v] * (d - 1)), indexing="ij")
        wgrids = np.meshgrid(*([wvv] * (d - 1)), indexing="ij")
        vs = np.stack([g.ravel() for g in grids], axis=1)  # (P, d-1)
        wv_tot = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
        # simplex map and its Jacobian (without the r^(d-1) factor)
        cum = np.cumprod(vs, axis=1)
        jac = np.ones(len(vs))
        for j in range(d - 2):
            jac *= vs[:, j] ** (d - 2 - j)
        shape_pts = np.concatenate([np.ones((len(vs), 1)), cum], axis=1)  # (P, d)
        nodes = (r[:, None, None] * shape_pts[None, :, :]).reshape(-1, d)
        weights = (wr[:, None] * r[:, None] ** (d - 1) * (wv_tot * jac)[None, :]).ravel()
        panel_all = np.repeat(panel, len(vs))

    weights = weights / (2 * math.pi) ** d
    images = signed_permutations(d)
    if kernel.H.cubic_invariant:
        phi = symbol(kernel, nodes)
        return FourierRule(nodes, weights, np.asarray(phi), panel_all, images, n_geo)
    full = np.einsum("gij,nj->gni", images, nodes).reshape(-1, d)
    phi = symbol(kernel, full)
    return FourierRule(full, np.tile(weights, len(images)), np.asarray(phi),
                       np.tile(panel_all, len(images)), None, n_geo)


def budget_bucket(deltas) -> float:
    deltas = np.atleast_2d(np.asarray(deltas, dtype=float))
    b = float(np.max(np.sum(np.abs(deltas), axis=1))) if deltas.size else 0.0
    return 0.0 if b == 0 else float(2 ** math.ceil(math.log2(b)))


_RULES: dict = {}


def panels_for_scale(kernel: TransitionKernel, lam: float) -> int:
    """Geometric panel count reaching well inside the scale |theta| ~ lam^(1/alpha)."""
    if lam <= 0:
        return N_GEOMETRIC
    r = (lam / kernel.leading_symbol_constant(np.eye(kernel.d)[0])) ** (1 / kernel.alpha)
    need = math.ceil(math.log2(math.pi / r)) + 16 if r < math.pi else 0
    return int(min(max(N_GEOMETRIC, need), 400))


def rule_for(kernel: TransitionKernel, deltas, order: int = 12,
             n_geo: int = N_GEOMETRIC) -> FourierRule:
    key = (id(kernel), budget_bucket(deltas), order, n_geo)
    hit = _RULES.get(key)
    if hit is not None and hit[0] is kernel:
        return hit[1]
    if len(_RULES) > 64:
        _RULES.clear()
    rule = build_rule(kernel, key[1], order, n_geo)
    _RULES[key] = (kernel, rule)
    return rule
