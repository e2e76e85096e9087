"""Closed-form limits that the simulations are compared against."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCase, PreconditionViolated

EXP_FLOOR = -745.0  # exp() of anything below this is exactly 0 in double precision


@dataclass(frozen=True)
class SelectionLaw:
    p_plus: float
    p_minus: float


def selection_probabilities(bd_plus: float, bd_minus: float) -> SelectionLaw:
    """Limit probabilities of leaving H upward/downward when both sides repel.

    ``p_minus`` is formed as ``1 - p_plus`` so the pair sums to exactly one.
    """
    if not (bd_plus > 0 and bd_minus < 0):
        raise PreconditionViolated(f"need bd_plus > 0 > bd_minus, got {bd_plus}, {bd_minus}")
    p_plus = bd_plus / (bd_plus - bd_minus)
    return SelectionLaw(p_plus, 1.0 - p_plus)


def _one_minus_exp(a: float) -> float:
    """1 - exp(a) for a <= 0, exact 1 once exp underflows."""
    return 1.0 if a <= EXP_FLOOR else -math.expm1(a)


def exit_prob_two_sided(mu_plus: float, mu_minus: float, delta: float, eps: float) -> float:
    """P(Z hits +delta before -delta) for dZ = mu(Z) dt + eps dW, Z(0) = 0.

    The drift is mu_plus on [0, inf) and mu_minus below.  With the scale
    density s(z) = exp(-2 mu(z) z / eps^2) the answer is A / (A + B) where
    A = int_{-delta}^0 s = (1 - exp(2 delta mu_minus / eps^2)) / (-mu_minus) and
    B = int_0^delta s = (1 - exp(-2 delta mu_plus / eps^2)) / mu_plus.
    Both exponents are negative, so nothing overflows.
    """
    if not (mu_plus > 0 and mu_minus < 0 and delta > 0 and eps > 0):
        raise PreconditionViolated("need mu_plus > 0 > mu_minus and delta, eps > 0")
    k = 2.0 * delta / (eps * eps)
    a = _one_minus_exp(k * mu_minus) / (-mu_minus)
    b = _one_minus_exp(-k * mu_plus) / mu_plus
    return a / (a + b)


def occupation_fraction(bd_plus: float, bd_minus: float) -> float:
    """Share of time spent in {x_d >= 0} while sliding along an attracting H."""
    if not (bd_plus < 0 and bd_minus > 0):
        raise PreconditionViolated(f"need bd_plus < 0 < bd_minus, got {bd_plus}, {bd_minus}")
    return bd_minus / (bd_minus - bd_plus)


def arcsine_cdf(x, T: float):
    """Levy's arcsine law: P(time spent positive by a Brownian path on [0,T] <= x)."""
    if T <= 0:
        raise PreconditionViolated("T must be > 0")
    xa = np.asarray(x, dtype=float)
    if (xa < 0).any() or (xa > T).any() or np.isnan(xa).any():
        raise PreconditionViolated("x must lie in [0, T]")
    out = 2.0 / math.pi * np.arcsin(np.sqrt(xa / T))
    return float(out) if out.ndim == 0 else out


def example_terminal_cdf(x, T: float, bbar_plus: float, bbar_minus: float, xbar0: float = 0.0):
    """CDF of xbar0 + bbar_plus * l + bbar_minus * (T - l), l arcsine-distributed on [0, T]."""
    slope = bbar_plus - bbar_minus
    if slope == 0:
        raise DegenerateCase("bbar_plus == bbar_minus: the terminal law is a point mass")
    xa = np.asarray(x, dtype=float)
    ell = np.clip((xa - xbar0 - bbar_minus * T) / slope, 0.0, T)
    F = np.asarray(arcsine_cdf(ell, T))
    out = F if slope > 0 else 1.0 - F
    return float(out) if out.ndim == 0 else out


def predictions(bd_plus: float, bd_minus: float, delta: float, eps_grid) -> dict:
    """Every closed-form number that applies to the normal drift pair at x0."""
    out: dict = {}
    if bd_plus > 0 and bd_minus < 0:
        law = selection_probabilities(bd_plus, bd_minus)
        out["p_plus"], out["p_minus"] = law.p_plus, law.p_minus
        out["exit_prob"] = {repr(float(e)): exit_prob_two_sided(bd_plus, bd_minus, delta, e)
                            for e in eps_grid}
    if bd_plus < 0 and bd_minus > 0:
        out["occupation_plus"] = occupation_fraction(bd_plus, bd_minus)
    return out
