"""Piecewise drift fields, regime classification and linearisation coefficients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.stats import qmc

from . import dsl
from .errors import DomainError, NonConvergent, PreconditionViolated

TAGS = ("A1", "A2plus", "A2minus", "A3", "A3plus", "A3minus", "A4")
# Tie-break among tags whose margins agree within c_tol: two-sided half-space
# conditions first, conditions that only constrain H last.
_PRIORITY = {tag: i for i, tag in enumerate(("A1", "A3", "A2plus", "A2minus", "A3plus", "A3minus", "A4"))}


@dataclass(frozen=True)
class DriftField:
    d: int
    bplus: tuple
    bminus: tuple
    lipschitz_estimate: float | None = None
    _plus: Callable = field(init=False, repr=False, compare=False)
    _minus: Callable = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.bplus) != self.d or len(self.bminus) != self.d:
            raise PreconditionViolated("drift components must match d")
        object.__setattr__(self, "_plus", dsl.compile_vector(self.bplus, self.d))
        object.__setattr__(self, "_minus", dsl.compile_vector(self.bminus, self.d))

    @classmethod
    def from_text(cls, bplus: Sequence[str], bminus: Sequence[str]) -> "DriftField":
        d = len(bplus)
        return cls(d, tuple(dsl.parse_expr(s, d) for s in bplus),
                   tuple(dsl.parse_expr(s, d) for s in bminus))

    @classmethod
    def from_scenario(cls, sc: dsl.Scenario, *, with_lipschitz: bool = False) -> "DriftField":
        f = cls(sc.d, sc.bplus, sc.bminus)
        if not with_lipschitz:
            return f
        x0 = np.asarray(sc.x0)
        box = (x0 - sc.delta, x0 + sc.delta)
        L = estimate_lipschitz(f, box, 128, times=np.linspace(0.0, sc.T, 3))
        return cls(sc.d, sc.bplus, sc.bminus, L)

    def scaled(self, lam: float) -> "DriftField":
        mul = lambda e: dsl.BinOp("*", dsl.Num(float(lam)), e)  # noqa: E731
        return DriftField(self.d, tuple(map(mul, self.bplus)), tuple(map(mul, self.bminus)))

    def plus_batch(self, t: float, X: np.ndarray) -> np.ndarray:
        return self._plus(t, X)

    def minus_batch(self, t: float, X: np.ndarray) -> np.ndarray:
        return self._minus(t, X)

    def drift_batch(self, t: float, X: np.ndarray) -> np.ndarray:
        """b(t, X) row-wise for X of shape (N, d); x_d = 0 takes b+."""
        up = X[:, -1] >= 0
        if up.all():
            return self._plus(t, X)
        if not up.any():
            return self._minus(t, X)
        return np.where(up[:, None], self._plus(t, X), self._minus(t, X))


def eval_drift(f: DriftField, t: float, x) -> np.ndarray:
    if t < 0:
        raise PreconditionViolated("t must be >= 0")
    x = np.asarray(x, dtype=float)
    exprs = f.bplus if x[-1] >= 0 else f.bminus
    return np.array([dsl.eval_expr(e, t, x) for e in exprs])


# --------------------------------------------------------------------------
# Probing


@dataclass(frozen=True)
class ProbeSpec:
    n_times: int = 8
    n_half: int = 128
    n_plane: int = 32


def _ball_points(n: int, dim: int, skip: int = 1) -> np.ndarray:
    """Deterministic quasi-random points in the unit ball (sup-norm box stretched radially)."""
    if dim == 0:
        return np.zeros((1, 0))
    u = qmc.Halton(dim, scramble=False).random(n + skip)[skip:]
    return u


def _to_ball(v: np.ndarray) -> np.ndarray:
    r2 = np.linalg.norm(v, axis=1)
    rinf = np.abs(v).max(axis=1)
    scale = np.divide(rinf, r2, out=np.ones_like(r2), where=r2 > 0)
    return v * scale[:, None]


@dataclass(frozen=True)
class Probes:
    times: np.ndarray
    upper: np.ndarray
    lower: np.ndarray
    plane: np.ndarray

    @property
    def count(self) -> int:
        return len(self.times) * (len(self.upper) + len(self.lower) + len(self.plane))


def make_probes(x0, delta: float, T: float, spec: ProbeSpec = ProbeSpec()) -> Probes:
    """Probe points in the delta-ball around the projection of x0 onto H."""
    x0 = np.asarray(x0, dtype=float)
    d = x0.size
    center = x0.copy()
    center[-1] = 0.0
    u = _ball_points(spec.n_half, d)
    box = np.concatenate([2.0 * u[:, :-1] - 1.0, u[:, -1:]], axis=1)
    half = _to_ball(box) * delta
    upper = center + half
    lower = center + half * np.r_[np.ones(d - 1), -1.0]
    if d == 1:
        plane = center[None, :]
    else:
        w = 2.0 * _ball_points(spec.n_plane, d - 1) - 1.0
        plane = center + np.concatenate([_to_ball(w) * delta, np.zeros((len(w), 1))], axis=1)
    times = np.linspace(0.0, T, spec.n_times) if spec.n_times > 1 else np.zeros(1)
    return Probes(times, upper, lower, plane)


def _normal_components(f: DriftField, pr: Probes):
    """b_d^+ on upper/plane and b_d^- on lower/plane, each shaped (n_times, n_points)."""
    with np.errstate(all="ignore"):
        up = np.stack([f.plus_batch(t, pr.upper)[:, -1] for t in pr.times])
        lo = np.stack([f.minus_batch(t, pr.lower)[:, -1] for t in pr.times])
        hp = np.stack([f.plus_batch(t, pr.plane)[:, -1] for t in pr.times])
        hm = np.stack([f.minus_batch(t, pr.plane)[:, -1] for t in pr.times])
    for name, arr in (("upper", up), ("lower", lo), ("plane+", hp), ("plane-", hm)):
        if not np.isfinite(arr).all():
            raise DomainError(f"non-finite drift on {name} probes")
    return up, lo, hp, hm


def normal_speed(f: DriftField, x0, delta: float, T: float) -> float:
    """Largest |b_d| seen on probes in the delta-ball around the projection of x0 onto H."""
    up, lo, hp, hm = _normal_components(f, make_probes(x0, delta, T))
    return float(max(np.abs(a).max() for a in (up, lo, hp, hm)))


# --------------------------------------------------------------------------
# Classification


@dataclass(frozen=True)
class CaseLabel:
    tag: str
    margin: float
    delta: float
    T: float
    n_probes: int
    evidence: list = field(default_factory=list)
    nearest: str | None = None

    @property
    def violations(self) -> list:
        return [r for r in self.evidence if not r["ok"]]

    def to_json(self) -> dict:
        out = {"tag": self.tag, "margin": self.margin, "delta": self.delta, "T": self.T,
               "n_probes": self.n_probes, "violations": self.violations}
        if self.nearest is not None:
            out["nearest"] = self.nearest
        return out


def _records(label, values, points, times, part, ok_fn, k=8):
    """The k worst probes of one quantity, as JSON-friendly dicts."""
    flat = values.ravel()
    order = np.argsort(flat, kind="stable")[:k]
    recs = []
    for i in order:
        ti, pi = divmod(int(i), values.shape[1])
        recs.append({"condition": label, "part": part, "t": float(times[ti]),
                     "x": [float(v) for v in points[pi]], "value": float(flat[i]),
                     "ok": bool(ok_fn(flat[i]))})
    return recs


def classify_case(f: DriftField, x0, T: float, delta: float,
                  grid: ProbeSpec = ProbeSpec(), c_tol: float = 1e-9) -> CaseLabel:
    x0 = np.asarray(x0, dtype=float)
    if x0[-1] != 0.0:
        raise PreconditionViolated("classification needs x0 on H (x_d = 0)")
    pr = make_probes(x0, delta, T, grid)
    up, lo, hp, hm = _normal_components(f, pr)

    half_ok = lambda v: v > c_tol  # noqa: E731
    plane_ok = lambda v: v >= -c_tol  # noqa: E731
    # (half-space quantities, plane quantities); each must stay above its threshold.
    conditions = {
        "A1": ([(up, pr.upper, "upper"), (-lo, pr.lower, "lower")], []),
        "A3": ([(-up, pr.upper, "upper"), (lo, pr.lower, "lower")], []),
        "A2plus": ([(up, pr.upper, "upper")], [(hm, "b_d-")]),
        "A2minus": ([(-lo, pr.lower, "lower")], [(-hp, "b_d+")]),
        "A3plus": ([(-up, pr.upper, "upper")], [(-np.abs(hm), "|b_d-|")]),
        "A3minus": ([(lo, pr.lower, "lower")], [(-np.abs(hp), "|b_d+|")]),
        "A4": ([], [(-np.maximum(np.abs(hp), np.abs(hm)), "|b_d+-|")]),
    }

    results = {}
    for tag, (halves, planes) in conditions.items():
        half_min = min((float(q.min()) for q, _, _ in halves), default=np.inf)
        plane_min = min((float(q.min()) for q, _ in planes), default=np.inf)
        holds = (not halves or half_ok(half_min)) and (not planes or plane_ok(plane_min))
        margin = half_min if halves else 0.0
        score = margin if holds else min(half_min, plane_min)
        results[tag] = (holds, margin, score)

    def evidence(tag):
        halves, planes = conditions[tag]
        recs = []
        for q, pts, part in halves:
            recs += _records(tag, q, pts, pr.times, part, half_ok)
        for q, part in planes:
            recs += _records(tag, q, pr.plane, pr.times, f"plane {part}", plane_ok)
        return recs

    holding = [t for t in TAGS if results[t][0]]
    if holding:
        best = max(results[t][1] for t in holding)
        tied = [t for t in holding if results[t][1] >= best - c_tol]
        tag = min(tied, key=_PRIORITY.__getitem__)
        return CaseLabel(tag, results[tag][1], delta, T, pr.count, evidence(tag))
    nearest = max(TAGS, key=lambda t: (results[t][2], -_PRIORITY[t]))
    return CaseLabel("Mixed", results[nearest][2], delta, T, pr.count, evidence(nearest), nearest)


# --------------------------------------------------------------------------
# Linearisation coefficients c+- and the Lipschitz constant


class CoefficientEstimate(NamedTuple):
    cplus: float
    cminus: float
    error: float


def _extrapolate_to_zero(h: np.ndarray, q: np.ndarray) -> tuple[float, float]:
    """Neville's polynomial extrapolation of q(h) to h = 0, with an error estimate."""
    P = list(map(float, q))
    n = len(P)
    lower_first = lower_last = P[0]
    for m in range(1, n):
        for i in range(n - m):
            P[i] = (h[i] * P[i + 1] - h[i + m] * P[i]) / (h[i] - h[i + m])
        if m == n - 2:
            lower_first, lower_last = P[0], P[1]
    value = P[0]
    if n == 1:
        return value, np.inf
    err = max(abs(value - lower_first), abs(value - lower_last))
    return value, err


DEFAULT_H = (1e-2, 5e-3, 2.5e-3, 1.25e-3)


def estimate_c_pm(f: DriftField, t: float, xbar, h_seq: Sequence[float] = DEFAULT_H,
                  tol: float = 1e-6) -> CoefficientEstimate:
    """One-sided limits b_d^+(t,(xbar,h))/h and b_d^-(t,(xbar,-h))/(-h) as h -> 0+."""
    h = np.asarray(h_seq, dtype=float)
    if h.size < 3 or (h <= 0).any() or (np.diff(h) >= 0).any():
        raise PreconditionViolated("h_seq needs >= 3 strictly decreasing positive values")
    xbar = np.atleast_1d(np.asarray(xbar, dtype=float))
    if xbar.size != f.d - 1:
        raise PreconditionViolated(f"xbar must have {f.d - 1} components")
    base = np.repeat(np.r_[xbar, 0.0][None, :], h.size, axis=0)
    pts_up, pts_lo = base.copy(), base.copy()
    pts_up[:, -1] = h
    pts_lo[:, -1] = -h
    with np.errstate(all="ignore"):
        q_up = f.plus_batch(t, pts_up)[:, -1] / h
        q_lo = f.minus_batch(t, pts_lo)[:, -1] / (-h)
    if not (np.isfinite(q_up).all() and np.isfinite(q_lo).all()):
        raise DomainError("non-finite difference quotient")
    cp, ep = _extrapolate_to_zero(h, q_up)
    cm, em = _extrapolate_to_zero(h, q_lo)
    if ep > tol * max(1.0, abs(cp)) or em > tol * max(1.0, abs(cm)):
        raise NonConvergent(f"difference quotients do not settle (errors {ep:.3g}, {em:.3g})")
    return CoefficientEstimate(cp, cm, max(ep, em))


def normal_traces(f: DriftField, t: float, x, h_seq: Sequence[float] = DEFAULT_H,
                  tol: float = 1e-9) -> tuple[float, float]:
    """(b_d^+, b_d^-) at a point of H, each taken as the limit from its own side.

    b+ only acts on {x_d >= 0}, so its value on H is the trace from above
    (likewise b- from below).  For a field continuous up to H this is the plain
    value at x, which is returned unchanged; for something like sgn(x_d), whose
    value on H differs from its limit, the extrapolated limit is used.  When the
    extrapolation does not settle (non-smooth near H) the value at x is kept.
    """
    x = np.asarray(x, dtype=float)
    h = np.asarray(h_seq, dtype=float)
    out = []
    for fn, sign in ((f.plus_batch, 1.0), (f.minus_batch, -1.0)):
        pts = np.repeat(x[None, :], h.size + 1, axis=0)
        pts[1:, -1] = x[-1] + sign * h
        with np.errstate(all="ignore"):
            v = fn(t, pts)[:, -1]
        if not np.isfinite(v).all():
            raise DomainError("non-finite normal drift next to H")
        lim, err = _extrapolate_to_zero(h, v[1:])
        settled = err <= 1e-6 * max(1.0, abs(lim))
        close = abs(v[0] - lim) <= tol * max(1.0, abs(lim))
        out.append(float(lim) if settled and not close else float(v[0]))
    return out[0], out[1]


@dataclass(frozen=True)
class LinearizationCoeffs:
    cplus: Callable[[float, np.ndarray], float]
    cminus: Callable[[float, np.ndarray], float]
    constant: tuple[float, float] | None = None

    @classmethod
    def constants(cls, cplus: float, cminus: float) -> "LinearizationCoeffs":
        return cls(lambda t, xb: cplus, lambda t, xb: cminus, (float(cplus), float(cminus)))

    @classmethod
    def from_field(cls, f: DriftField, h_seq: Sequence[float] = DEFAULT_H) -> "LinearizationCoeffs":
        return cls(lambda t, xb: estimate_c_pm(f, t, xb, h_seq).cplus,
                   lambda t, xb: estimate_c_pm(f, t, xb, h_seq).cminus)


def estimate_lipschitz(f: DriftField, box, n_samples: int, *, times=(0.0,), seed: int = 0) -> float:
    """Largest sampled ratio |b(t,x) - b(t,y)| / |x - y| with x, y in the same closed half-space."""
    if n_samples < 2:
        raise PreconditionViolated("n_samples must be >= 2")
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    rng = np.random.default_rng(seed)
    best = 0.0
    for side, fn in ((1, f.plus_batch), (-1, f.minus_batch)):
        dlo, dhi = (max(lo[-1], 0.0), hi[-1]) if side > 0 else (lo[-1], min(hi[-1], 0.0))
        if dlo > dhi:
            continue
        pts = rng.uniform(lo, hi, size=(n_samples, lo.size))
        pts[:, -1] = rng.uniform(dlo, dhi, size=n_samples)
        dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        iu = np.triu_indices(n_samples, 1)
        keep = dist[iu] > 0
        for t in times:
            vals = fn(float(t), pts)
            diff = np.linalg.norm(vals[:, None, :] - vals[None, :, :], axis=-1)
            if keep.any():
                best = max(best, float((diff[iu][keep] / dist[iu][keep]).max()))
    return best
