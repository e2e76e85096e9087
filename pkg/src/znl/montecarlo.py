"""Ensemble estimators, confidence intervals and epsilon sweeps.

Every path owns a PCG64 stream seeded from (master seed, eps index, path index),
and each estimator first fills a per-path array and then reduces it with exact
counts or ``math.fsum``.  How the paths are split across worker threads therefore
cannot change any reported number.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import kstwobign, norm

from . import predict
from .dsl import Scenario
from .errors import (
    IncompatibleHorizons,
    NoExitMajority,
    NonConvergent,
    PreconditionViolated,
    RequiresConstantC,
)
from .field import DriftField, LinearizationCoeffs, classify_case, estimate_c_pm, normal_traces
from .integrate import (
    ArrayNoise,
    Path,
    StreamNoise,
    coeff_arrays,
    integrate_sliding_ode,
    limit_pair_step,
    run_ensemble,
    sde_step,
    step_size,
    time_grid,
)

NO_EXIT_LIMIT = 0.10


@dataclass(frozen=True)
class EstimateWithCI:
    point: float
    lo: float
    hi: float
    n: int
    stderr: float
    level: float = 0.95
    diagnostics: dict = field(default_factory=dict, compare=False)

    def covers(self, value: float) -> bool:
        return self.lo <= value <= self.hi


@dataclass(frozen=True)
class SweepRow:
    eps: float
    estimator: str
    estimate: EstimateWithCI
    predicted: float
    runtime_s: float = 0.0

    @property
    def abs_gap(self) -> float:
        return abs(self.estimate.point - self.predicted)


# --------------------------------------------------------------------------
# Seeds and workers


def path_seed(master: int, eps_index: int, path_index: int) -> int:
    """64-bit seed for one path, a pure function of its coordinates."""
    ss = np.random.SeedSequence([int(master), int(eps_index), int(path_index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def path_seeds(master: int, eps_index: int, n: int) -> np.ndarray:
    return np.array([path_seed(master, eps_index, i) for i in range(n)], dtype=np.uint64)


def default_workers() -> int:
    env = os.environ.get("ZNL_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_chunks(job: Callable[[np.ndarray], None], n: int, workers: int | None = None) -> None:
    """Call ``job(indices)`` on contiguous slices of range(n), possibly in threads."""
    w = max(1, min(workers or default_workers(), n))
    chunks = [c for c in np.array_split(np.arange(n), w) if c.size]
    if len(chunks) == 1:
        job(chunks[0])
        return
    with ThreadPoolExecutor(len(chunks)) as ex:
        for _ in ex.map(job, chunks):
            pass


# --------------------------------------------------------------------------
# Interval arithmetic


def _z(level: float) -> float:
    if not 0 < level < 1:
        raise PreconditionViolated("level must lie in (0, 1)")
    return float(norm.ppf(0.5 + level / 2))


def wilson_ci(successes: int, n: int, level: float = 0.95) -> EstimateWithCI:
    if n < 1 or not 0 <= successes <= n:
        raise PreconditionViolated("need 0 <= successes <= n and n >= 1")
    z = _z(level)
    p = successes / n
    z2n = z * z / n
    center = (p + z2n / 2) / (1 + z2n)
    half = z / (1 + z2n) * math.sqrt(p * (1 - p) / n + z2n / (4 * n))
    lo = 0.0 if successes == 0 else max(0.0, center - half)
    hi = 1.0 if successes == n else min(1.0, center + half)
    return EstimateWithCI(p, min(lo, p), max(hi, p), n, math.sqrt(p * (1 - p) / n), level)


def mean_ci(values, level: float = 0.95) -> EstimateWithCI:
    v = np.asarray(values, dtype=float)
    n = v.size
    if n == 0:
        raise PreconditionViolated("no samples")
    m = math.fsum(v) / n
    var = math.fsum((v - m) ** 2) / (n - 1) if n > 1 else 0.0
    se = math.sqrt(var / n)
    z = _z(level)
    return EstimateWithCI(m, m - z * se, m + z * se, n, se, level)


def median_ci(values, level: float = 0.95) -> EstimateWithCI:
    """Sample median with the distribution-free order-statistic interval."""
    v = np.sort(np.asarray(values, dtype=float))
    n = v.size
    if n == 0:
        raise PreconditionViolated("no samples")
    z = _z(level)
    j = max(0, math.floor(n / 2 - z * math.sqrt(n) / 2) - 1)
    k = min(n - 1, math.ceil(n / 2 + z * math.sqrt(n) / 2) - 1)
    med = float(np.median(v))
    lo, hi = float(min(v[j], med)), float(max(v[k], med))
    return EstimateWithCI(med, lo, hi, n, (hi - lo) / (2 * z), level)


def ks_distance(samples, cdf: Callable) -> float:
    """sup |F_n - F| evaluated on both sides of every jump of F_n."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if n == 0:
        raise PreconditionViolated("no samples")
    F = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


def _resample(p: Path, times: np.ndarray) -> np.ndarray:
    return np.column_stack([np.interp(times, p.times, p.states[:, j]) for j in range(p.d)])


def sup_error(p: Path, q: Path) -> float:
    """Max distance between two paths, on the coarser of their grids."""
    if p.d != q.d:
        raise PreconditionViolated("paths have different dimensions")
    if p.times[-1] != q.times[-1]:
        raise IncompatibleHorizons(f"horizons {p.times[-1]} and {q.times[-1]} differ")
    if p.times.size == q.times.size and np.array_equal(p.times, q.times):
        a, b = p.states, q.states
    else:
        grid = p.times if p.times.size <= q.times.size else q.times
        a, b = _resample(p, grid), _resample(q, grid)
    return float(np.max(np.linalg.norm(a - b, axis=1)))


# --------------------------------------------------------------------------
# Shared set-up


@dataclass
class _Run:
    sc: Scenario
    f: DriftField
    eps: float
    times: np.ndarray
    seeds: np.ndarray
    workers: int | None

    @property
    def x0(self) -> np.ndarray:
        return np.asarray(self.sc.x0, dtype=float)

    def simulate(self, make_observe: Callable[[int], Callable], step=None, X0=None, noise=None):
        """Integrate every path, handing each chunk an observer for its offset."""
        step = step or sde_step(self.f, self.eps)
        base = self.x0 if X0 is None else np.asarray(X0, dtype=float)

        def job(chunk):
            lo = int(chunk[0])
            nz = (StreamNoise(self.seeds[chunk], self.times, self.f.d) if noise is None
                  else ArrayNoise(noise[:, chunk]))
            run_ensemble(step, np.repeat(base[None, :], chunk.size, axis=0), self.times, nz,
                         make_observe(lo))

        run_chunks(job, self.seeds.size, self.workers)


def _setup(sc: Scenario, eps: float, N: int, *, eps_index: int = 0, f: DriftField | None = None,
           workers: int | None = None, T: float | None = None) -> _Run:
    if N < 1:
        raise PreconditionViolated("need at least one path")
    f = f or DriftField.from_scenario(sc)
    T = sc.T if T is None else T
    dt = step_size(f, sc.x0, eps, sc.dt_max, delta=sc.delta, T=sc.T)
    times = time_grid(T, dt, refine_start=sc.on_plane and eps > 0)
    return _Run(sc, f, eps, times, path_seeds(sc.master_seed, eps_index, N), workers)


def normal_drifts(f: DriftField, x0) -> tuple[float, float]:
    """(b_d^+, b_d^-) at time 0 and the start point, as one-sided limits onto H."""
    return normal_traces(f, 0.0, x0)


def _require(f: DriftField, sc: Scenario, tags: Sequence[str], what: str):
    label = classify_case(f, sc.x0, sc.T, sc.delta)
    if label.tag not in tags:
        raise PreconditionViolated(f"{what} needs case {'/'.join(tags)}, scenario is {label.tag}")
    return label


# --------------------------------------------------------------------------
# Estimators


def estimate_selection(sc: Scenario, eps: float, N: int, delta: float | None = None, *,
                       eps_index: int = 0, level: float = 0.95, workers: int | None = None,
                       require_case: bool = True) -> EstimateWithCI:
    """Fraction of paths that leave the slab |x_d| < delta through the top."""
    f = DriftField.from_scenario(sc)
    if require_case:
        _require(f, sc, ("A1",), "selection")
    delta = sc.delta if delta is None else delta
    if delta <= 0:
        raise PreconditionViolated("delta must be > 0")
    run = _setup(sc, eps, N, eps_index=eps_index, f=f, workers=workers)
    side = np.zeros(N, dtype=np.int8)

    def make_observe(lo):
        def observe(k, X, idx, alive):
            out = alive & (np.abs(X[:, -1]) >= delta)
            if out.any():
                side[lo + idx[out]] = np.where(X[out, -1] > 0, 1, -1)
            return out
        return observe

    run.simulate(make_observe)
    exited = int(np.count_nonzero(side))
    up = int(np.count_nonzero(side > 0))
    no_exit = (N - exited) / N
    if no_exit > NO_EXIT_LIMIT:
        raise NoExitMajority(f"{no_exit:.1%} of paths never left the slab |x_d| < {delta} by T={sc.T}")
    est = wilson_ci(up, exited, level)
    return EstimateWithCI(est.point, est.lo, est.hi, est.n, est.stderr, level,
                          {"no_exit_frac": no_exit, "paths": N})


def _fraction_run(sc: Scenario, eps: float, N: int, t: float, pick: Callable, **kw) -> np.ndarray:
    """Per-path left Riemann average over [0, t] of pick(x_d) (a boolean array)."""
    run = _setup(sc, eps, N, T=t, **kw)
    dts = np.diff(run.times)
    acc = np.zeros(N)

    def make_observe(lo):
        def observe(k, X, idx, alive):
            if k < dts.size:
                acc[lo + idx] += pick(X[:, -1]) * dts[k]
            return None
        return observe

    run.simulate(make_observe)
    return acc / t


def estimate_occupation(sc: Scenario, eps: float, N: int, t: float | None = None, *,
                        eps_index: int = 0, level: float = 0.95, workers: int | None = None,
                        require_case: bool = True) -> EstimateWithCI:
    """Ensemble mean of the time share spent in {x_d >= 0} on [0, t]."""
    f = DriftField.from_scenario(sc)
    if require_case:
        _require(f, sc, ("A3",), "occupation")
    t = sc.T if t is None else t
    if t < 0:
        raise PreconditionViolated("t must be >= 0")
    if t == 0:
        v = 1.0 if sc.x0[-1] >= 0 else 0.0
        return EstimateWithCI(v, v, v, N, 0.0, level)
    frac = _fraction_run(sc, eps, N, t, lambda xd: xd >= 0, eps_index=eps_index, f=f,
                         workers=workers)
    return mean_ci(frac, level)


def estimate_one_sided(sc: Scenario, eps: float, N: int, threshold: float = 0.05, *,
                       eps_index: int = 0, level: float = 0.95, workers: int | None = None,
                       require_case: bool = True) -> EstimateWithCI:
    """Fraction of paths whose time share on the non-selected side exceeds ``threshold``."""
    f = DriftField.from_scenario(sc)
    label = _require(f, sc, ("A2plus", "A2minus"), "one-sided exit") if require_case else None
    upward = label is None or label.tag == "A2plus"
    pick = (lambda xd: xd <= 0) if upward else (lambda xd: xd >= 0)
    frac = _fraction_run(sc, eps, N, sc.T, pick, eps_index=eps_index, f=f, workers=workers)
    bad = int(np.count_nonzero(frac > threshold))
    est = wilson_ci(bad, N, level)
    return EstimateWithCI(est.point, est.lo, est.hi, N, est.stderr, level,
                          {"mean_wrong_side": math.fsum(frac) / N})


def _sliding_samples(sc: Scenario, eps: float, N: int, **kw) -> tuple[np.ndarray, np.ndarray]:
    """Per-path sup distance to the sliding solution and max |x_d| up to sigma_delta ^ T."""
    run = _setup(sc, eps, N, **kw)
    x0 = run.x0
    ref = integrate_sliding_ode(run.f, x0[:-1], sc.T, sc.delta, 1.0, times=run.times)
    k_end = ref.times.size - 1
    R = ref.states
    err = np.zeros(N)
    conf = np.zeros(N)

    def make_observe(lo):
        def observe(k, X, idx, alive):
            g = lo + idx[alive]
            Xa = X[alive]
            np.maximum.at(err, g, np.linalg.norm(Xa - R[k], axis=1))
            np.maximum.at(conf, g, np.abs(Xa[:, -1]))
            return np.full(idx.size, k >= k_end)
        return observe

    run.simulate(make_observe)
    return err, conf


def estimate_sliding(sc: Scenario, eps: float, N: int, *, eps_index: int = 0, level: float = 0.95,
                     workers: int | None = None, require_case: bool = True) -> EstimateWithCI:
    """Median sup distance between X^eps and the sliding ODE solution."""
    f = DriftField.from_scenario(sc)
    if require_case:
        _require(f, sc, ("A3", "A3plus", "A3minus"), "sliding")
    err, _ = _sliding_samples(sc, eps, N, eps_index=eps_index, f=f, workers=workers)
    return median_ci(err, level)


def estimate_confinement(sc: Scenario, eps: float, N: int, *, eps_index: int = 0,
                         level: float = 0.95, workers: int | None = None,
                         require_case: bool = True) -> EstimateWithCI:
    """Median of max |x_d| while the sliding solution stays in its delta-ball."""
    f = DriftField.from_scenario(sc)
    if require_case:
        _require(f, sc, ("A3", "A3plus", "A3minus", "A4"), "confinement")
    _, conf = _sliding_samples(sc, eps, N, eps_index=eps_index, f=f, workers=workers)
    return median_ci(conf, level)


def terminal_tangential(sc: Scenario, eps: float, N: int, *, eps_index: int = 0,
                        workers: int | None = None) -> np.ndarray:
    """Samples of the first coordinate of X^eps(T)."""
    run = _setup(sc, eps, N, eps_index=eps_index, workers=workers)
    out = np.empty(N)
    last = run.times.size - 1

    def make_observe(lo):
        def observe(k, X, idx, alive):
            if k == last:
                out[lo + idx] = X[:, 0]
            return None
        return observe

    run.simulate(make_observe)
    return out


def estimate_ks(sc: Scenario, eps: float, N: int, *, eps_index: int = 0, level: float = 0.95,
                workers: int | None = None, require_case: bool = True) -> EstimateWithCI:
    """KS distance of X_1^eps(T) to the arcsine-based limit law (d = 2)."""
    f = DriftField.from_scenario(sc)
    if sc.d != 2:
        raise PreconditionViolated("the terminal-law check needs d = 2")
    if require_case:
        _require(f, sc, ("A4",), "terminal law")
    x0 = np.asarray(sc.x0, dtype=float)
    bp = float(f.plus_batch(0.0, x0[None, :])[0, 0])
    bm = float(f.minus_batch(0.0, x0[None, :])[0, 0])
    samples = terminal_tangential(sc, eps, N, eps_index=eps_index, workers=workers)
    D = ks_distance(samples, lambda x: predict.example_terminal_cdf(x, sc.T, bp, bm, x0[0]))
    # Asymptotic Kolmogorov band: sqrt(n) D has the Kolmogorov law under the null.
    c = float(kstwobign.ppf(level)) / math.sqrt(N)
    return EstimateWithCI(D, max(0.0, D - c), D + c, N, c / _z(level), level,
                          {"kolmogorov_bound": float(kstwobign.ppf(0.95)) / math.sqrt(N)})


def _constant_coeffs(f: DriftField, sc: Scenario, tol: float = 1e-6) -> LinearizationCoeffs:
    xbar0 = np.asarray(sc.x0[:-1], dtype=float)
    probes = [xbar0] + [xbar0 + s * sc.delta / 2 * e for e in np.eye(xbar0.size) for s in (-1, 1)]
    vals = []
    for t in (0.0, sc.T / 2, sc.T):
        for xb in probes:
            try:
                c = estimate_c_pm(f, t, xb)
            except NonConvergent as exc:
                raise RequiresConstantC(f"c+/- not resolvable: {exc}") from exc
            vals.append((c.cplus, c.cminus))
    vals = np.array(vals)
    if np.ptp(vals, axis=0).max() > tol * max(1.0, np.abs(vals).max()):
        raise RequiresConstantC("c+/- vary with (t, xbar); compare terminal laws instead")
    cp, cm = (float(np.round(v, 9)) + 0.0 for v in vals[0])
    return LinearizationCoeffs.constants(cp, cm)


def coupled_convergence_check(sc: Scenario, eps: float, N: int, *, eps_index: int = 0,
                              level: float = 0.95, workers: int | None = None,
                              require_case: bool = True) -> EstimateWithCI:
    """Median sup |(Xbar^eps, X_d^eps / eps) - (Xbar, Y)| under shared noise.

    Both systems are stopped together as soon as either tangential part leaves
    the delta-ball around xbar0 (or at T).
    """
    f = DriftField.from_scenario(sc)
    if require_case:
        _require(f, sc, ("A4",), "coupled convergence")
    if eps <= 0:
        raise PreconditionViolated("eps must be > 0")
    coeffs = _constant_coeffs(f, sc)
    run = _setup(sc, eps, N, eps_index=eps_index, f=f, workers=workers)
    d = sc.d
    xbar0 = run.x0[:-1]
    sde, lim = sde_step(f, eps), limit_pair_step(f, coeff_arrays(coeffs))

    def step(t, dt, S, dW, idx):
        out = np.empty_like(S)
        out[:, :d] = sde(t, dt, S[:, :d], dW, idx)
        out[:, d:] = lim(t, dt, S[:, d:], dW, idx)
        return out

    err = np.zeros(N)

    def make_observe(lo):
        def observe(k, S, idx, alive):
            a = S[alive]
            diff = np.concatenate([a[:, : d - 1] - a[:, d:-1], (a[:, d - 1] / eps - a[:, -1])[:, None]],
                                  axis=1)
            np.maximum.at(err, lo + idx[alive], np.linalg.norm(diff, axis=1))
            return ((np.linalg.norm(S[:, : d - 1] - xbar0, axis=1) >= sc.delta)
                    | (np.linalg.norm(S[:, d:-1] - xbar0, axis=1) >= sc.delta))
        return observe

    run.simulate(make_observe, step=step, X0=np.r_[run.x0, xbar0, 0.0])
    est = median_ci(err, level)
    return EstimateWithCI(est.point, est.lo, est.hi, est.n, est.stderr, level,
                          {"c_plus": coeffs.constant[0], "c_minus": coeffs.constant[1]})


# --------------------------------------------------------------------------
# Pre-hitting coupling across an epsilon grid


@dataclass(frozen=True)
class PrehitResult:
    eps: tuple
    ratios: tuple  # EstimateWithCI of sup-error / eps per eps
    K: float

    @property
    def passed(self) -> bool:
        return all(r.point <= self.K for r in self.ratios)


def prehitting_coupling(sc: Scenario, N: int, eps_grid: Sequence[float] | None = None, *,
                        level: float = 0.95, workers: int | None = None,
                        K_factor: float = 1.5) -> PrehitResult:
    """sup_{t < tau_H} |X^eps - X| / eps for a start off H, one Wiener path per sample.

    Every epsilon uses the same Brownian paths: increments are drawn on the
    finest grid and summed over strides.  K is fitted once as ``K_factor`` times
    the upper confidence bound of the median ratio at the largest epsilon.
    """
    eps_grid = tuple(sc.eps_grid if eps_grid is None else eps_grid)
    if not eps_grid:
        raise PreconditionViolated("empty eps grid")
    x0 = np.asarray(sc.x0, dtype=float)
    if x0[-1] == 0:
        raise PreconditionViolated("pre-hitting coupling needs x0 off H")
    f = DriftField.from_scenario(sc)
    dt0 = step_size(f, x0, eps_grid[0], sc.dt_max, delta=sc.delta, T=sc.T)
    n0 = len(time_grid(sc.T, dt0)) - 1
    strides = [max(1, math.ceil((eps_grid[0] / e) ** 2 * (1 - 1e-12))) for e in eps_grid]
    fine = n0 * int(np.lcm.reduce(strides))
    seeds = path_seeds(sc.master_seed, 0, N)
    sq = math.sqrt(sc.T / fine)
    ratios = []
    for e, s in zip(eps_grid, strides):
        n = n0 * s
        times = time_grid(sc.T, sc.T / n)
        ref = np.empty((n + 1, f.d))
        ref[0] = x0
        rstep = sde_step(f, 0.0)
        k_hit = n + 1
        for k in range(n):
            ref[k + 1] = rstep(times[k], times[k + 1] - times[k], ref[k][None, :], 0.0, None)[0]
            if ref[k + 1, -1] * np.sign(x0[-1]) <= 0:
                k_hit = k + 1
                break
        group = fine // n
        err = np.zeros(N)

        def job(chunk):
            lo = int(chunk[0])
            inc = np.stack([np.random.Generator(np.random.PCG64(int(seeds[i])))
                            .standard_normal((fine, f.d)) for i in chunk], axis=1) * sq
            inc = inc.reshape(n, group, chunk.size, f.d).sum(axis=1)

            def observe(k, X, idx, alive):
                hit = X[:, -1] * np.sign(x0[-1]) <= 0
                live = alive & ~hit
                if k < k_hit:
                    np.maximum.at(err, lo + idx[live], np.linalg.norm(X[live] - ref[k], axis=1))
                return hit | (k + 1 >= k_hit)

            run_ensemble(sde_step(f, e), np.repeat(x0[None, :], chunk.size, axis=0), times,
                         ArrayNoise(inc), observe)

        run_chunks(job, N, workers)
        ratios.append(median_ci(err / e, level))
    K = K_factor * ratios[0].hi
    return PrehitResult(eps_grid, tuple(ratios), K)


# --------------------------------------------------------------------------
# Sweeps

ESTIMATORS: dict[str, Callable[..., EstimateWithCI]] = {
    "selection": estimate_selection,
    "occupation": estimate_occupation,
    "one_sided": estimate_one_sided,
    "sliding": estimate_sliding,
    "confinement": estimate_confinement,
    "ks": estimate_ks,
    "coupled": coupled_convergence_check,
}


def predicted_value(sc: Scenario, estimator: str, f: DriftField | None = None) -> float:
    """Limit value of an estimator's point estimate (nan when no closed form applies)."""
    f = f or DriftField.from_scenario(sc)
    bp, bm = normal_drifts(f, sc.x0)
    if estimator == "selection":
        return predict.selection_probabilities(bp, bm).p_plus if bp > 0 > bm else math.nan
    if estimator == "occupation":
        return predict.occupation_fraction(bp, bm) if bp < 0 < bm else math.nan
    if estimator in ("one_sided", "sliding", "confinement", "ks", "coupled"):
        return 0.0
    raise PreconditionViolated(f"unknown estimator {estimator!r}")


def eps_sweep(sc: Scenario, estimator: str, N: int, *, level: float = 0.95,
              workers: int | None = None, require_case: bool = True,
              eps_grid: Sequence[float] | None = None, options: dict | None = None) -> list[SweepRow]:
    """One row per epsilon, largest first; the eps index feeds the seed split.

    ``eps_grid`` may pick a subset of the scenario grid; seeds still follow each
    value's position in the scenario grid.  ``options`` go to the estimator.
    """
    if estimator not in ESTIMATORS:
        raise PreconditionViolated(f"unknown estimator {estimator!r}; known: {sorted(ESTIMATORS)}")
    grid = sorted(sc.eps_grid if eps_grid is None else eps_grid, reverse=True)
    if not grid:
        raise PreconditionViolated("empty eps grid")
    pred = predicted_value(sc, estimator)
    rows = []
    for e in grid:
        i = sc.eps_grid.index(e) if e in sc.eps_grid else len(sc.eps_grid)
        t0 = time.perf_counter()
        est = ESTIMATORS[estimator](sc, e, N, eps_index=i, level=level, workers=workers,
                                    require_case=require_case, **(options or {}))
        rows.append(SweepRow(float(e), estimator, est, pred, time.perf_counter() - t0))
    return rows


def nonincreasing_within_noise(rows: Sequence[SweepRow], k: float = 2.0) -> bool:
    """abs_gap never rises by more than k combined standard errors between rows."""
    return all(b.abs_gap <= a.abs_gap + k * math.hypot(a.estimate.stderr, b.estimate.stderr)
               for a, b in zip(rows, rows[1:]))
