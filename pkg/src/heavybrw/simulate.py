"""Monte Carlo simulation of the branching random walk.

Particles do not interact, so each trial is simulated depth first: a
particle's whole lifeline is generated before its offspring are taken from a
stack.  Random numbers come from splitmix64 streams keyed by
(master_seed, trial, particle id), with particle ids assigned in the
deterministic depth-first birth order, so every trial is reproducible on its
own and results do not depend on how trials are spread over threads.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .kernel import BranchingLaw, TransitionKernel

__all__ = [
    "JumpSampler",
    "SimulationConfig",
    "SimulationResult",
    "build_jump_sampler",
    "estimate",
    "run_trial",
]

DEFAULT_CAP = 1_000_000
CHUNK = 512
MASK64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# alias sampler


@dataclass(frozen=True, eq=False)
class JumpSampler:
    """Vose alias table over the jumps z != 0 with |z| <= radius."""

    offsets: np.ndarray  # (n, d) int64
    prob: np.ndarray  # (n,) acceptance thresholds
    alias: np.ndarray  # (n,) int64
    weights: np.ndarray  # (n,) normalized target probabilities
    radius: int
    discarded_mass: float  # fraction of the jump rate beyond the radius

    def sample(self, u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
        """Vectorized draws from uniforms (used for testing)."""
        col = np.minimum((u1 * len(self.prob)).astype(np.int64), len(self.prob) - 1)
        idx = np.where(u2 < self.prob[col], col, self.alias[col])
        return self.offsets[idx]


@numba.njit(cache=True)
def _vose(p):
    n = len(p)
    prob = np.zeros(n)
    alias = np.zeros(n, dtype=np.int64)
    scaled = p * n
    small = np.empty(n, dtype=np.int64)
    large = np.empty(n, dtype=np.int64)
    ns = 0
    nl = 0
    for i in range(n):
        if scaled[i] < 1.0:
            small[ns] = i
            ns += 1
        else:
            large[nl] = i
            nl += 1
    while ns > 0 and nl > 0:
        ns -= 1
        s = small[ns]
        nl -= 1
        g = large[nl]
        prob[s] = scaled[s]
        alias[s] = g
        scaled[g] = (scaled[g] + scaled[s]) - 1.0
        if scaled[g] < 1.0:
            small[ns] = g
            ns += 1
        else:
            large[nl] = g
            nl += 1
    for i in range(nl):
        prob[large[i]] = 1.0
        alias[large[i]] = large[i]
    for i in range(ns):
        prob[small[i]] = 1.0
        alias[small[i]] = small[i]
    return prob, alias


def build_jump_sampler(kernel: TransitionKernel, jump_table_radius: int | None = None,
                       renormalize: bool = True) -> JumpSampler:
    """Alias sampler over a(z)/(-a(0)) restricted to |z| <= radius."""
    radius = kernel.table_radius if jump_table_radius is None else int(jump_table_radius)
    if radius > kernel.table_radius:
        raise ValueError(f"jump radius {radius} exceeds the kernel table radius {kernel.table_radius}")
    if radius < kernel.table_radius and not renormalize:
        raise ValueError("a radius below the table radius needs renormalize=True")
    z = kernel.offsets
    r = np.linalg.norm(z.astype(float), axis=1)
    keep = (r > 0) & (r <= radius)
    if not np.any(keep):
        raise ValueError("empty jump support")
    offs = np.ascontiguousarray(z[keep].astype(np.int64))
    vals = kernel.values[keep]
    kept = math.fsum(vals)
    w = vals / kept
    prob, alias = _vose(w)
    return JumpSampler(offs, prob, alias, w, radius, 1.0 - kept / kernel.total_rate)


# ---------------------------------------------------------------------------
# random numbers


@numba.njit(inline="always")
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(inline="always")
def _stream(seed, trial, pid):
    s = _mix(seed + np.uint64(0x9E3779B97F4A7C15))
    s = _mix(s ^ (trial * np.uint64(0xD1B54A32D192ED03)))
    return _mix(s ^ (pid * np.uint64(0x8CB92BA72F3D8DD7)))


@numba.njit(inline="always")
def _next(state):
    state = state + np.uint64(0x9E3779B97F4A7C15)
    return state, _mix(state)


@numba.njit(inline="always")
def _uniform(state):
    state, z = _next(state)
    return state, (z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


# ---------------------------------------------------------------------------
# trial core


@numba.njit(cache=True, nogil=True)
def _run_trial(seed, trial, start, horizon, snaps, ypts, offsets, prob, alias, jump_rate,
               branch_rate, sizes, size_cdf, cap, total, local):
    """Fill total[s] and local[s, j] for one trial; return 1 if capped, else 0."""
    d = start.shape[0]
    n_snap = snaps.shape[0]
    n_y = ypts.shape[0]
    n_tab = prob.shape[0]
    cap_stack = 64
    st_pos = np.empty((cap_stack, d), dtype=np.int64)
    st_time = np.empty(cap_stack)
    st_id = np.empty(cap_stack, dtype=np.uint64)
    top = 0
    st_pos[0, :] = start
    st_time[0] = 0.0
    st_id[0] = np.uint64(0)
    top = 1
    created = 1
    capped = 0
    pos = np.empty(d, dtype=np.int64)
    while top > 0:
        top -= 1
        for k in range(d):
            pos[k] = st_pos[top, k]
        t = st_time[top]
        state = _stream(seed, trial, st_id[top])
        # first snapshot at or after the birth time
        si = 0
        while si < n_snap and snaps[si] < t:
            si += 1
        while True:
            at_origin = True
            for k in range(d):
                if pos[k] != 0:
                    at_origin = False
                    break
            rate = jump_rate + (branch_rate if at_origin else 0.0)
            state, u = _uniform(state)
            t_next = t - math.log1p(-u) / rate
            while si < n_snap and snaps[si] < t_next:
                total[si] += 1
                for j in range(n_y):
                    same = True
                    for k in range(d):
                        if ypts[j, k] != pos[k]:
                            same = False
                            break
                    if same:
                        local[si, j] += 1
                si += 1
            if t_next > horizon or si >= n_snap:
                break
            t = t_next
            state, u = _uniform(state)
            if at_origin and u * rate >= jump_rate:
                # branching event: replace the particle by m offspring at 0
                state, v = _uniform(state)
                m = sizes[sizes.shape[0] - 1]
                for q in range(sizes.shape[0]):
                    if v < size_cdf[q]:
                        m = sizes[q]
                        break
                if created + m > cap:
                    capped = 1
                    return capped
                if top + m > st_time.shape[0]:
                    new = max(2 * st_time.shape[0], top + m)
                    p2 = np.empty((new, d), dtype=np.int64)
                    t2 = np.empty(new)
                    i2 = np.empty(new, dtype=np.uint64)
                    p2[:top] = st_pos[:top]
                    t2[:top] = st_time[:top]
                    i2[:top] = st_id[:top]
                    st_pos, st_time, st_id = p2, t2, i2
                for q in range(m):
                    for k in range(d):
                        st_pos[top, k] = 0
                    st_time[top] = t
                    st_id[top] = np.uint64(created)
                    created += 1
                    top += 1
                break
            state, u1 = _uniform(state)
            state, u2 = _uniform(state)
            col = int(u1 * n_tab)
            if col >= n_tab:
                col = n_tab - 1
            idx = col if u2 < prob[col] else alias[col]
            for k in range(d):
                pos[k] += offsets[idx, k]
    return capped


@numba.njit(cache=True, nogil=True)
def _run_chunk(seed, first, count, start, horizon, snaps, ypts, offsets, prob, alias, jump_rate,
               branch_rate, sizes, size_cdf, cap, totals, locals_, capped):
    for i in range(count):
        capped[i] = _run_trial(seed, np.uint64(first + i), start, horizon, snaps, ypts, offsets,
                               prob, alias, jump_rate, branch_rate, sizes, size_cdf, cap,
                               totals[i], locals_[i])


# ---------------------------------------------------------------------------
# configuration and results


@dataclass(frozen=True, eq=False)
class SimulationConfig:
    kernel: TransitionKernel
    law: BranchingLaw
    snapshot_times: tuple
    trials: int
    master_seed: int
    start: tuple | None = None
    horizon: float | None = None
    population_cap: int = DEFAULT_CAP
    jump_table_radius: int | None = None
    y_points: tuple | None = None
    n_max: int = 2
    capped_policy: str = "exclude"
    workers: int = 1

    def __post_init__(self):
        d = self.kernel.d
        snaps = tuple(float(t) for t in self.snapshot_times)
        horizon = float(self.horizon) if self.horizon is not None else (max(snaps) if snaps else 0.0)
        if not snaps or any(b <= a for a, b in zip(snaps, snaps[1:])):
            raise ValueError("snapshot_times must be a nonempty increasing list")
        if snaps[0] < 0 or snaps[-1] > horizon:
            raise ValueError("snapshot_times must lie in [0, horizon]")
        if int(self.trials) < 1:
            raise ValueError("trials must be >= 1")
        if int(self.population_cap) < 1:
            raise ValueError("population_cap must be >= 1")
        if not (0 <= int(self.master_seed) <= MASK64):
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        if self.capped_policy not in ("exclude", "clamp"):
            raise ValueError("capped_policy must be 'exclude' or 'clamp'")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if int(self.workers) < 1:
            raise ValueError("workers must be >= 1")
        start = (0,) * d if self.start is None else _point(d, self.start)
        ys = ((0,) * d,) if self.y_points is None else tuple(_point(d, y) for y in self.y_points)
        object.__setattr__(self, "snapshot_times", snaps)
        object.__setattr__(self, "horizon", horizon)
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "y_points", ys)
        object.__setattr__(self, "trials", int(self.trials))
        object.__setattr__(self, "master_seed", int(self.master_seed))

    def describe(self) -> dict:
        """Everything that determines the result (the worker count does not)."""
        return {
            "kernel": self.kernel.spec(),
            "law": self.law.spec(),
            "snapshot_times": list(self.snapshot_times),
            "horizon": self.horizon,
            "trials": self.trials,
            "master_seed": self.master_seed,
            "start": list(self.start),
            "population_cap": int(self.population_cap),
            "jump_table_radius": self.jump_table_radius,
            "y_points": [list(y) for y in self.y_points],
            "n_max": self.n_max,
            "capped_policy": self.capped_policy,
        }


def _point(d: int, x) -> tuple:
    arr = np.atleast_1d(np.asarray(x))
    if arr.size == 1 and d > 1 and arr[0] == 0:
        arr = np.zeros(d, dtype=int)
    if arr.shape != (d,) or np.any(arr != np.round(arr)):
        raise ValueError(f"expected a lattice point with {d} coordinates, got {x!r}")
    return tuple(int(v) for v in arr)


@dataclass(frozen=True, eq=False)
class SimulationResult:
    times: np.ndarray
    y_points: tuple
    n_max: int
    total: np.ndarray  # (n_max, n_snap): E mu_t^n
    total_se: np.ndarray
    local: np.ndarray  # (n_y, n_max, n_snap): E mu_t(y)^n
    local_se: np.ndarray
    trials: int
    trials_used: int
    capped_trials: int
    master_seed: int
    discarded_mass: float
    counts_total: np.ndarray = field(repr=False, default=None)
    counts_local: np.ndarray = field(repr=False, default=None)

    def mean_total(self) -> tuple[np.ndarray, np.ndarray]:
        return self.total[0], self.total_se[0]

    def mean_local(self, j: int = 0) -> tuple[np.ndarray, np.ndarray]:
        return self.local[j, 0], self.local_se[j, 0]

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.total, self.total_se, self.local, self.local_se):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(json.dumps([self.trials_used, self.capped_trials]).encode())
        return h.hexdigest()


def _law_arrays(law: BranchingLaw) -> tuple[np.ndarray, np.ndarray, float]:
    if not law.b:
        return np.zeros(1, dtype=np.int64), np.ones(1), 0.0
    sizes = np.array(sorted(law.b), dtype=np.int64)
    rates = np.array([law.b[int(n)] for n in sizes])
    total = float(rates.sum())
    cdf = np.cumsum(rates) / total
    cdf[-1] = 1.0
    return sizes, cdf, total


def run_trial(config: SimulationConfig, trial_index: int, sampler: JumpSampler | None = None):
    """(total counts per snapshot, local counts per snapshot and y, capped flag)."""
    if not (0 <= trial_index < config.trials):
        raise ValueError("trial_index out of range")
    sampler = sampler or build_jump_sampler(config.kernel, config.jump_table_radius)
    n_snap, n_y = len(config.snapshot_times), len(config.y_points)
    total = np.zeros(n_snap, dtype=np.int64)
    local = np.zeros((n_snap, n_y), dtype=np.int64)
    sizes, cdf, brate = _law_arrays(config.law)
    capped = _run_trial(np.uint64(config.master_seed), np.uint64(trial_index),
                        np.array(config.start, dtype=np.int64), config.horizon,
                        np.array(config.snapshot_times), np.array(config.y_points, dtype=np.int64),
                        sampler.offsets, sampler.prob, sampler.alias, config.kernel.total_rate,
                        brate, sizes, cdf, int(config.population_cap), total, local)
    return total, local, bool(capped)


def estimate(config: SimulationConfig, keep_counts: bool = False) -> SimulationResult:
    """Run every trial and aggregate sample moments in trial order."""
    sampler = build_jump_sampler(config.kernel, config.jump_table_radius)
    n_snap, n_y, N = len(config.snapshot_times), len(config.y_points), config.trials
    totals = np.zeros((N, n_snap), dtype=np.int64)
    locals_ = np.zeros((N, n_snap, n_y), dtype=np.int64)
    capped = np.zeros(N, dtype=np.int64)
    sizes, cdf, brate = _law_arrays(config.law)
    args = (np.array(config.start, dtype=np.int64), config.horizon,
            np.array(config.snapshot_times), np.array(config.y_points, dtype=np.int64),
            sampler.offsets, sampler.prob, sampler.alias, config.kernel.total_rate,
            brate, sizes, cdf, int(config.population_cap))
    seed = np.uint64(config.master_seed)

    def work(first):
        count = min(CHUNK, N - first)
        sl = slice(first, first + count)
        _run_chunk(seed, first, count, *args, totals[sl], locals_[sl], capped[sl])

    starts = range(0, N, CHUNK)
    if config.workers == 1:
        for s in starts:
            work(s)
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            list(pool.map(work, starts))

    flagged = capped.astype(bool)
    use = ~flagged if config.capped_policy == "exclude" else np.ones(N, dtype=bool)
    used = int(use.sum())
    tot = totals[use].astype(float)
    loc = locals_[use].astype(float)
    orders = np.arange(1, config.n_max + 1)
    tmom, tse = _moments(tot, orders)  # (n_max, n_snap)
    lmom, lse = _moments(loc, orders)  # (n_max, n_snap, n_y)
    return SimulationResult(
        times=np.array(config.snapshot_times), y_points=config.y_points, n_max=config.n_max,
        total=tmom, total_se=tse, local=np.moveaxis(lmom, -1, 0), local_se=np.moveaxis(lse, -1, 0),
        trials=N, trials_used=used, capped_trials=int(flagged.sum()),
        master_seed=config.master_seed, discarded_mass=sampler.discarded_mass,
        counts_total=totals if keep_counts else None,
        counts_local=locals_ if keep_counts else None)


def _moments(x: np.ndarray, orders: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = len(x)
    shape = (len(orders),) + x.shape[1:]
    if n == 0:
        return np.full(shape, np.nan), np.full(shape, np.nan)
    mom = np.empty(shape)
    se = np.empty(shape)
    for i, k in enumerate(orders):
        v = x**k
        mom[i] = v.mean(axis=0)
        se[i] = v.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else 0.0
    return mom, se
