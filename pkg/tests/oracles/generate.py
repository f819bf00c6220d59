"""Recompute the frozen reference values used by the test suite.

Run with ``python tests/oracles/generate.py``. Each value comes from a method
independent of the package code paths it checks (mpmath polylogarithms and
theta integrals, scipy quad on closed-form symbols, brute-force sums).
"""

import math

import mpmath as mp
import numpy as np
from scipy import integrate

mp.mp.dps = 20


def lattice_zeta_theta(d, s):
    """sum_{z != 0} |z|^(-2s) over Z^d from the Jacobi theta integral."""
    theta = lambda t: mp.jtheta(3, 0, mp.e ** (-mp.pi * t))  # noqa: E731
    f = lambda t: (t ** (s - 1) + t ** (mp.mpf(d) / 2 - s - 1)) * (theta(t) ** d - 1)  # noqa: E731
    val = -1 / mp.mpf(s) - 1 / (mp.mpf(d) / 2 - s) + mp.quad(f, [1, mp.inf])
    return val * mp.pi**s / mp.gamma(s)


def symbol_1d_polylog(alpha, theta):
    """phi(theta) = 2 sum_n n^-(1+alpha) (cos n theta - 1)."""
    s = 1 + alpha
    return 2 * (mp.re(mp.polylog(s, mp.e ** (1j * theta))) - mp.zeta(s))


def green0_1d(alpha):
    """(1/pi) int_0^pi dtheta / (-phi(theta)).

    -phi(theta) = c theta^alpha + O(theta^2) with c = -2 Gamma(-alpha) cos(pi alpha / 2)
    for alpha < 1; the leading term is integrated in closed form and the
    remainder, which is bounded, by mpmath.
    """
    alpha = mp.mpf(alpha)
    c = -2 * mp.gamma(-alpha) * mp.cos(mp.pi * alpha / 2)
    lead = mp.pi ** (1 - alpha) / (c * (1 - alpha))
    f = lambda th: 1 / (-symbol_1d_polylog(alpha, th)) - 1 / (c * th**alpha)  # noqa: E731
    return (lead + mp.quad(f, [0, mp.mpf("1e-4"), mp.mpf("1e-2"), 0.1, 1, mp.pi])) / mp.pi


def green_1d_alpha1(lam, x=0):
    """alpha = 1: phi(theta) = -pi|theta| + theta^2/2 on [-pi, pi]."""
    f = lambda th: math.cos(th * x) / (lam + math.pi * th - th * th / 2)  # noqa: E731
    val, _ = integrate.quad(f, 0, math.pi, limit=400, epsabs=1e-14, epsrel=1e-13,
                            points=[1e-6, 1e-4, 1e-2])
    return val / math.pi


def green_difference_1d(alpha, x):
    """(1/pi) int_0^pi (1 - cos(x theta)) / (-phi(theta)) dtheta."""
    f = lambda th: (1 - mp.cos(x * th)) / (-symbol_1d_polylog(alpha, th))  # noqa: E731
    return mp.quad(f, [0, 0.1, 1, 2, mp.pi]) / mp.pi


if __name__ == "__main__":
    print("a0 d=1 alpha=1:", -2 * mp.zeta(2))
    print("zeta_Z2(3/2)  :", lattice_zeta_theta(2, mp.mpf(1.5)),
          4 * mp.zeta(1.5) * mp.dirichlet(1.5, [0, 1, 0, -1]))
    print("zeta_Z3(2)    :", lattice_zeta_theta(3, 2))
    print("zeta_Z3(1.75) :", lattice_zeta_theta(3, mp.mpf(1.75)))
    print("phi(pi) d=1 alpha=0.5:", symbol_1d_polylog(0.5, mp.pi))
    print("phi(1)  d=1 alpha=1.5:", symbol_1d_polylog(1.5, 1))
    print("G0 d=1 alpha=0.5:", green0_1d(0.5))
    print("G0 d=1 alpha=0.8:", green0_1d(0.8))
    print("G0 d=1 alpha=0.4:", green0_1d(0.4))
    print("G0 d=1 alpha=0.95:", green0_1d(0.95))
    for lam in (0.05, 0.2, 1.0):
        print("G_lam alpha=1", lam, green_1d_alpha1(lam), green_1d_alpha1(lam, 3))
    for x in (1, 3):
        print("green difference alpha=0.5 x=", x, green_difference_1d(0.5, x))
