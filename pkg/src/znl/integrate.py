"""Time stepping for the perturbed SDE and its limit equations.

Everything runs through :func:`run_ensemble`, an explicit Euler(-Maruyama) loop
over a block of paths that share a time grid.  Single-path entry points call it
with one path, so a path integrated alone and the same path integrated inside an
ensemble are bit-identical.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    BranchDoesNotLeave,
    DegenerateDenominator,
    DomainError,
    PreconditionViolated,
    StepTooLarge,
)
from .field import DriftField, LinearizationCoeffs, normal_speed

ETA = 4.0
START_LEVELS = 16
_BLOCK_BUDGET = 1 << 22  # noise values held per block


# --------------------------------------------------------------------------
# Grids and noise


def step_size(f: DriftField, x0, eps: float, dt_max: float = 1e-3, *, eta: float = ETA,
              delta: float = 0.1, T: float = 1.0) -> float:
    """Boundary-layer step rule: eps * sqrt(dt) <= (eps^2 / B) / eta.

    B is the largest normal drift speed near the hyperplane; for B = 1 this is
    dt = (eps / eta)^2.  With no normal drift there is no layer to resolve.
    """
    if eps <= 0:
        return dt_max
    B = normal_speed(f, x0, delta, T)
    if B == 0:
        return dt_max
    return min(dt_max, (eps / (eta * B)) ** 2)


def time_grid(T: float, dt: float, refine_start: bool = False,
              levels: int = START_LEVELS) -> np.ndarray:
    """Uniform grid with step <= dt ending exactly at T.

    With ``refine_start`` the first interval is split dyadically
    (dt/2^levels, dt/2^levels, dt/2^(levels-1), ..., dt/2).  A path started
    exactly on H otherwise spends its whole first step under b+ alone, which
    biases the side it leaves to by O(sqrt(dt)) in boundary-layer units.
    """
    if T <= 0 or dt <= 0:
        raise PreconditionViolated("T and dt must be positive")
    n = max(1, math.ceil(T / dt * (1 - 1e-12)))
    h = T / n
    times = h * np.arange(n + 1, dtype=float)
    times[-1] = T
    if refine_start and levels > 0:
        head = h * np.exp2(-np.arange(levels, 0, -1, dtype=float))
        times = np.concatenate([[0.0], head, times[1:]])
    return times


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class NoiseRecord:
    """Wiener increments for one path; ``increments[:, i] ~ N(0, dt_i)``."""

    seed: int
    increments: np.ndarray  # (d, n_steps)
    dts: np.ndarray

    @classmethod
    def for_grid(cls, seed: int, times, d: int) -> "NoiseRecord":
        dts = np.diff(np.asarray(times, dtype=float))
        z = rng_for(seed).standard_normal((dts.size, d))
        return cls(seed, (z * np.sqrt(dts)[:, None]).T, dts)

    @property
    def n_steps(self) -> int:
        return self.increments.shape[1]

    def w(self) -> np.ndarray:
        """The Wiener path on the grid, shape (n_steps + 1, d)."""
        return np.vstack([np.zeros(self.increments.shape[0]), np.cumsum(self.increments.T, axis=0)])


class StreamNoise:
    """Per-path PCG64 streams, drawn lazily block by block."""

    def __init__(self, seeds: Sequence[int], times: np.ndarray, d: int):
        self.gens = [rng_for(int(s)) for s in seeds]
        self.sq = np.sqrt(np.diff(times))
        self.d = d

    def block(self, idx: np.ndarray, k0: int, k1: int) -> np.ndarray:
        z = np.stack([self.gens[i].standard_normal((k1 - k0, self.d)) for i in idx], axis=1)
        return z * self.sq[k0:k1, None, None]


class ArrayNoise:
    """Precomputed increments of shape (n_steps, N, d)."""

    def __init__(self, increments: np.ndarray):
        self.inc = increments

    def block(self, idx: np.ndarray, k0: int, k1: int) -> np.ndarray:
        return self.inc[k0:k1][:, idx]


# --------------------------------------------------------------------------
# Engine

Step = Callable[[float, float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
Observer = Callable[[int, np.ndarray, np.ndarray, np.ndarray], "np.ndarray | None"]


def run_ensemble(step: Step, X0: np.ndarray, times: np.ndarray, noise, observe: Observer) -> None:
    """Advance all rows of ``X0`` over ``times``.

    ``observe(k, X, idx, alive)`` sees the state at ``times[k]`` for the rows
    ``idx`` (indices into X0) and may return a mask of rows to stop.  Stopped
    rows are frozen and only rows flagged ``alive`` should be recorded.
    """
    X = np.array(X0, dtype=float)
    idx = np.arange(X.shape[0])
    alive = np.ones(X.shape[0], dtype=bool)
    dts = np.diff(times)
    n = dts.size
    width = max(1, X.shape[0] * getattr(noise, "d", X.shape[1]))
    B = int(np.clip(_BLOCK_BUDGET // width, 16, 4096))
    with np.errstate(all="ignore"):
        stop = observe(0, X, idx, alive)
        if stop is not None:
            alive &= ~stop
        k = 0
        while k < n:
            if not alive.all():
                if not alive.any():
                    return
                idx, X = idx[alive], X[alive]
                alive = np.ones(idx.size, dtype=bool)
            all_alive = True
            k1 = min(n, k + B)
            dW = noise.block(idx, k, k1)
            for j in range(k1 - k):
                Xn = step(times[k + j], dts[k + j], X, dW[j], idx)
                X = Xn if all_alive else np.where(alive[:, None], Xn, X)
                stop = observe(k + j + 1, X, idx, alive)
                if stop is not None and stop.any():
                    alive &= ~stop
                    all_alive = False
                    if not alive.any():
                        break
            if not np.isfinite(X[alive]).all():
                raise DomainError(f"non-finite state before t={times[k1]:.6g}")
            k = k1


def sde_step(f: DriftField, eps: float) -> Step:
    def step(t, dt, X, dW, idx):
        return X + f.drift_batch(t, X) * dt + eps * dW
    return step


def limit_pair_step(f: DriftField, cfun: Callable) -> Step:
    """Euler-Maruyama for (X_bar, Y) of the tangent-regime limit system.

    ``cfun(t, XBAR)`` returns the arrays (c+, c-) for every row.
    """
    def step(t, dt, Z, dW, idx):
        xb, y = Z[:, :-1], Z[:, -1]
        P = np.concatenate([xb, np.zeros((xb.shape[0], 1))], axis=1)
        up = y >= 0
        bbar = np.where(up[:, None], f.plus_batch(t, P)[:, :-1], f.minus_batch(t, P)[:, :-1])
        cp, cm = cfun(t, xb)
        out = np.empty_like(Z)
        out[:, :-1] = xb + bbar * dt
        out[:, -1] = y + np.where(up, cp, cm) * y * dt + dW[:, -1]
        return out
    return step


# --------------------------------------------------------------------------
# Paths


@dataclass
class Path:
    times: np.ndarray
    states: np.ndarray  # (n + 1, d)
    stops: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.states.shape[0] != self.times.size:
            if self.times.size == 1 and self.states.shape[1] == 1:
                self.states = self.states.T
            else:
                raise PreconditionViolated("times and states lengths differ")
        if self.times.size == 0 or self.times[0] != 0 or (np.diff(self.times) <= 0).any():
            raise PreconditionViolated("times must start at 0 and increase strictly")

    @property
    def d(self) -> int:
        return self.states.shape[1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(["t"] + [f"x{i + 1}" for i in range(self.d)]) + "\n")
        for t, row in zip(self.times, self.states):
            buf.write(",".join(f"{v:.17g}" for v in (t, *row)) + "\n")
        return buf.getvalue()

    def stops_json(self) -> str:
        return json.dumps({k: self.stops.get(k) for k in sorted(self.stops)}, sort_keys=True)


def _record_states(n_rows: int, n_times: int, d: int):
    out = np.full((n_times, n_rows, d), np.nan)

    def observe(k, X, idx, alive):
        out[k, idx[alive]] = X[alive]
        return None

    return out, observe


def euler_maruyama(f: DriftField, x0, eps: float, T: float, dt: float, noise,
                   *, dt_max: float | None = None, eta: float = ETA, delta: float = 0.1) -> Path:
    """One Euler-Maruyama path of dX = b(t, X) dt + eps dW from x0.

    ``noise`` is a :class:`NoiseRecord` for the grid ``time_grid(T, dt, refine)``
    or an integer seed.  Paths started on H (eps > 0) use the refined first step.
    """
    x0 = np.asarray(x0, dtype=float)
    if eps < 0:
        raise PreconditionViolated("eps must be >= 0")
    if dt_max is not None and dt > dt_max:
        raise StepTooLarge(f"dt={dt} exceeds dt_max={dt_max}")
    if eps > 0:
        limit = step_size(f, x0, eps, math.inf, eta=eta, delta=delta, T=T)
        if dt > limit * (1 + 1e-9):
            raise StepTooLarge(f"dt={dt} exceeds the boundary-layer limit {limit:.3g} at eps={eps}")
    times = time_grid(T, dt, refine_start=eps > 0 and x0[-1] == 0.0)
    n = times.size - 1
    if not isinstance(noise, NoiseRecord):
        noise = NoiseRecord.for_grid(int(noise), times, f.d)
    if noise.n_steps < n or noise.increments.shape[0] != f.d:
        raise PreconditionViolated(f"noise has {noise.n_steps} increments, need {n} in dimension {f.d}")
    if not np.allclose(noise.dts[:n], np.diff(times), rtol=1e-12, atol=0):
        raise PreconditionViolated("noise increments were generated for a different grid")
    states, obs = _record_states(1, times.size, f.d)
    run_ensemble(sde_step(f, eps), x0[None, :], times,
                 ArrayNoise(noise.increments.T[:n, None, :]), obs)
    p = Path(times, states[:, 0, :])
    p.stops["tau_eps_H" if eps > 0 else "tau_H"] = hitting_time_H(p)
    return p


# --------------------------------------------------------------------------
# Stopping times


def hitting_time_H(p: Path) -> float | None:
    """First time x_d reaches 0, linearly interpolated inside the crossing step."""
    xd = p.states[:, -1]
    if xd.size == 0:
        raise PreconditionViolated("empty path")
    touch = xd == 0
    change = np.zeros_like(touch)
    change[:-1] = (np.sign(xd[:-1]) * np.sign(xd[1:])) < 0
    hits = np.flatnonzero(touch | change)
    if hits.size == 0:
        return None
    k = int(hits[0])
    if touch[k]:
        return float(p.times[k])
    t0, t1 = p.times[k], p.times[k + 1]
    return float(t0 + (t1 - t0) * xd[k] / (xd[k] - xd[k + 1]))


def exit_time_ball(p: Path, center, delta: float) -> float | None:
    if delta <= 0:
        raise PreconditionViolated("delta must be > 0")
    dist = np.linalg.norm(p.states - np.asarray(center, dtype=float), axis=1)
    k = np.flatnonzero(dist >= delta)
    return float(p.times[k[0]]) if k.size else None


def exit_time_slab(p: Path, delta: float) -> tuple[float, int] | None:
    """First grid time with |x_d| >= delta, and the side (+1/-1) of the exit."""
    if delta <= 0:
        raise PreconditionViolated("delta must be > 0")
    xd = p.states[:, -1]
    k = np.flatnonzero(np.abs(xd) >= delta)
    if not k.size:
        return None
    return float(p.times[k[0]]), int(np.sign(xd[k[0]]))


# --------------------------------------------------------------------------
# Limit equations


def integrate_branch(f: DriftField, x0, side: int, T: float, dt: float,
                     c_tol: float = 1e-9) -> Path:
    """Euler path under b^side only, stopped when it first returns to H."""
    if side not in (1, -1):
        raise PreconditionViolated("side must be +1 or -1")
    x = np.asarray(x0, dtype=float).copy()
    if x[-1] != 0.0:
        raise PreconditionViolated("branch starts on H")
    fn = f.plus_batch if side > 0 else f.minus_batch
    times = time_grid(T, dt)
    states = [x.copy()]
    left = False
    tau = None
    for k in range(times.size - 1):
        h = times[k + 1] - times[k]
        x_new = x + fn(times[k], x[None, :])[0] * h
        if not np.isfinite(x_new).all():
            raise DomainError(f"non-finite branch state at t={times[k + 1]:.6g}")
        states.append(x_new)
        s_old, s_new = side * x[-1], side * x_new[-1]
        if not left:
            if s_new > c_tol:
                left = True
            elif s_new < -c_tol or k + 1 >= 10:
                raise BranchDoesNotLeave(f"x_d does not leave H to the {'+' if side > 0 else '-'} side")
        elif s_new <= 0:
            tau = float(times[k] + h * s_old / (s_old - s_new))
            x = x_new
            break
        x = x_new
    p = Path(times[: len(states)], np.array(states))
    p.stops["tau_H"] = tau
    return p


def sliding_weights(bd_plus: float, bd_minus: float, c_tol: float = 1e-9) -> tuple[float, float]:
    """Time shares (rho+, rho-) of the two sides in sliding motion along H."""
    den = bd_minus - bd_plus
    if not den >= c_tol:
        raise DegenerateDenominator(f"b_d^- - b_d^+ = {den!r} < {c_tol}")
    rho_plus = bd_minus / den
    return rho_plus, 1.0 - rho_plus


def _sliding_on_grid(f: DriftField, xbar0, times: np.ndarray, delta: float, c_tol: float) -> Path:
    xbar0 = np.atleast_1d(np.asarray(xbar0, dtype=float))
    p = np.r_[xbar0, 0.0]
    center = p.copy()
    states = [p.copy()]
    sigma = None
    for k in range(times.size - 1):
        t, h = times[k], times[k + 1] - times[k]
        bp = f.plus_batch(t, p[None, :])[0]
        bm = f.minus_batch(t, p[None, :])[0]
        rp, rm = sliding_weights(bp[-1], bm[-1], c_tol)
        p = p.copy()
        p[:-1] = p[:-1] + (bp[:-1] * rp + bm[:-1] * rm) * h
        if not np.isfinite(p).all():
            raise DomainError(f"non-finite sliding state at t={times[k + 1]:.6g}")
        states.append(p)
        if np.linalg.norm(p - center) >= delta:
            sigma = float(times[k + 1])
            break
    path = Path(times[: len(states)], np.array(states))
    path.stops["sigma_delta"] = sigma
    return path


def integrate_sliding_ode(f: DriftField, xbar0, T: float, delta: float, dt: float,
                          c_tol: float = 1e-9, *, times=None) -> Path:
    """Averaged motion along H, embedded as (X_bar(t), 0), stopped at sigma_delta or T."""
    grid = time_grid(T, dt) if times is None else np.asarray(times, dtype=float)
    return _sliding_on_grid(f, xbar0, grid, delta, c_tol)


@dataclass(frozen=True)
class CoupledState:
    xbar: np.ndarray
    y: float


@dataclass
class CoupledPath(Sequence):
    times: np.ndarray
    xbar: np.ndarray  # (n + 1, d - 1)
    y: np.ndarray  # (n + 1,)
    stops: dict = field(default_factory=dict)

    def __len__(self):
        return self.times.size

    def __getitem__(self, k):
        return CoupledState(self.xbar[k], float(self.y[k]))


def coeff_arrays(coeffs: LinearizationCoeffs) -> Callable:
    if coeffs.constant is not None:
        cp, cm = coeffs.constant
        return lambda t, xb: (cp, cm)

    def cfun(t, xb):
        cp = np.array([coeffs.cplus(t, row) for row in xb])
        cm = np.array([coeffs.cminus(t, row) for row in xb])
        return cp, cm
    return cfun


def integrate_coupled_limit(f: DriftField, coeffs: LinearizationCoeffs, xbar0, T: float,
                            delta: float, dt: float, noise) -> CoupledPath:
    """Tangent-regime limit pair (X_bar, Y) driven by the d-th noise component."""
    xbar0 = np.atleast_1d(np.asarray(xbar0, dtype=float))
    times = time_grid(T, dt)
    n = times.size - 1
    if not isinstance(noise, NoiseRecord):
        noise = NoiseRecord.for_grid(int(noise), times, f.d)
    if noise.n_steps < n:
        raise PreconditionViolated(f"noise has {noise.n_steps} increments, need {n}")
    Z0 = np.r_[xbar0, 0.0][None, :]
    states, obs = _record_states(1, times.size, f.d)
    sigma = [None]

    def observe(k, Z, idx, alive):
        obs(k, Z, idx, alive)
        out = np.linalg.norm(Z[:, :-1] - xbar0, axis=1) >= delta
        if out[0] and sigma[0] is None:
            sigma[0] = float(times[k])
        return out

    run_ensemble(limit_pair_step(f, coeff_arrays(coeffs)), Z0, times,
                 ArrayNoise(noise.increments.T[:n, None, :]), observe)
    m = int(np.flatnonzero(~np.isnan(states[:, 0, -1]))[-1]) + 1
    cp = CoupledPath(times[:m], states[:m, 0, :-1], states[:m, 0, -1])
    cp.stops["sigma_delta"] = sigma[0]
    return cp


def reflection_map(xi) -> np.ndarray:
    """Skorokhod reflection at 0: r[k] = xi[k] - min_{j<=k} xi[j]."""
    xi = np.asarray(xi, dtype=float)
    if xi.size == 0 or xi[0] != 0:
        raise PreconditionViolated("reflection driver must start at 0")
    return xi - np.minimum.accumulate(xi)
