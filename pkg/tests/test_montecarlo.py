from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from statsmodels.stats.proportion import proportion_confint

from znl.dsl import parse_scenario
from znl.errors import IncompatibleHorizons, NoExitMajority, PreconditionViolated, RequiresConstantC
from znl.integrate import Path
from znl.montecarlo import (
    EstimateWithCI,
    SweepRow,
    coupled_convergence_check,
    eps_sweep,
    estimate_occupation,
    estimate_selection,
    ks_distance,
    median_ci,
    nonincreasing_within_noise,
    path_seed,
    sup_error,
    wilson_ci,
)


def scenario(text: str, **over):
    return parse_scenario(text, {k: str(v) for k, v in over.items()})


A1_SYM = """\
d = 1
x0 = 0
bplus = sgn(x1)
bminus = sgn(x1)
eps = 0.2, 0.1, 0.05
delta = 0.1
"""

A3_SYM = """\
d = 2
x0 = 0, 0
bplus = 1, -1
bminus = 0, 1
eps = 0.04, 0.02
delta = 0.25
T = 0.2
"""


# --- intervals ----------------------------------------------------------------


@pytest.mark.parametrize("k, n", [(50, 100), (0, 100), (100, 100), (3, 17), (999, 1000), (1, 1)])
def test_wilson_matches_statsmodels(k, n):
    ci = wilson_ci(k, n, 0.95)
    lo, hi = proportion_confint(k, n, alpha=0.05, method="wilson")
    assert ci.lo == pytest.approx(lo, abs=1e-12)
    assert ci.hi == pytest.approx(hi, abs=1e-12)
    assert ci.lo <= ci.point <= ci.hi


def test_wilson_examples():
    ci = wilson_ci(50, 100, 0.95)
    assert (round(ci.lo, 3), round(ci.hi, 3)) == (0.404, 0.596)
    assert wilson_ci(0, 100).lo == 0.0
    assert wilson_ci(100, 100).hi == 1.0
    with pytest.raises(PreconditionViolated):
        wilson_ci(5, 4)


def test_wilson_coverage_calibration():
    rng = np.random.default_rng(2024)
    p, n = 0.3, 200
    hits = sum(wilson_ci(int(k), n).covers(p) for k in rng.binomial(n, p, size=1000))
    assert hits >= 930


def test_wilson_width_shrinks_like_root_n():
    widths = [wilson_ci(n // 2, n).hi - wilson_ci(n // 2, n).lo for n in (100, 400, 1600, 6400)]
    for a, b in zip(widths, widths[1:]):
        assert b / a == pytest.approx(0.5, abs=0.02)


def test_median_ci_brackets_median():
    x = np.random.default_rng(0).exponential(size=1001)
    ci = median_ci(x)
    assert ci.lo <= np.median(x) <= ci.hi
    assert ci.lo <= math.log(2) <= ci.hi
    assert ci.stderr == pytest.approx((ci.hi - ci.lo) / (2 * 1.959963984540054))


# --- distances ------------------------------------------------------------------


def test_ks_matches_scipy():
    x = np.random.default_rng(1).normal(size=500)
    assert ks_distance(x, stats.norm.cdf) == pytest.approx(stats.kstest(x, "norm").statistic, abs=1e-14)


def test_ks_examples():
    x = np.random.default_rng(5).uniform(size=10_000)
    assert ks_distance(x, stats.uniform.cdf) < 1.36 / math.sqrt(x.size)
    assert ks_distance(np.full(100, 0.5), stats.uniform.cdf) == pytest.approx(0.5)
    assert ks_distance(x + 0.2, stats.uniform.cdf) >= 0.19
    with pytest.raises(PreconditionViolated):
        ks_distance([], stats.uniform.cdf)


def _line(times, slope, offset):
    t = np.asarray(times, dtype=float)
    return Path(t, np.column_stack([slope * t + offset, -slope * t]))


def test_sup_error_examples():
    t = np.linspace(0, 1, 11)
    p = _line(t, 1.0, 0.0)
    assert sup_error(p, p) == 0.0
    q = Path(t, p.states + np.array([0.3, 0.4]))
    assert sup_error(p, q) == pytest.approx(0.5, abs=1e-15)
    # resampling: fine and coarse linear paths with different slopes
    fine = _line(np.linspace(0, 1, 101), 2.0, 0.0)
    coarse = _line(np.linspace(0, 1, 5), 1.0, 0.1)
    # difference is (t - 0.1, -t), largest at t = 1
    expected = math.hypot(0.9, 1.0)
    assert sup_error(fine, coarse) == pytest.approx(expected, abs=1e-12)
    with pytest.raises(IncompatibleHorizons):
        sup_error(p, _line(np.linspace(0, 2, 11), 1.0, 0.0))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=3, max_size=3))
def test_sup_error_is_a_metric(params):
    t = np.linspace(0, 1, 9)
    a, b, c = (_line(t, s, o) for s, o in params)
    assert sup_error(a, b) == sup_error(b, a)
    assert sup_error(a, c) <= sup_error(a, b) + sup_error(b, c) + 1e-12


# --- seeds and determinism ---------------------------------------------------------


def test_path_seed_pure_and_distinct():
    assert path_seed(1, 2, 3) == path_seed(1, 2, 3)
    seeds = {path_seed(0, e, i) for e in range(3) for i in range(1000)}
    assert len(seeds) == 3000
    assert 0 <= path_seed(2**64 - 1, 0, 0) < 2**64


def test_selection_identical_for_one_and_eight_workers():
    sc = scenario(A1_SYM)
    a = estimate_selection(sc, 0.1, 400, workers=1)
    b = estimate_selection(sc, 0.1, 400, workers=8)
    assert a == b and a.diagnostics == b.diagnostics


def test_occupation_identical_for_one_and_eight_workers():
    sc = scenario(A3_SYM)
    a = estimate_occupation(sc, 0.04, 64, 0.05, workers=1)
    b = estimate_occupation(sc, 0.04, 64, 0.05, workers=8)
    assert a.point == b.point and a.stderr == b.stderr


def test_threads_env_caps_workers(monkeypatch):
    sc = scenario(A1_SYM)
    monkeypatch.setenv("ZNL_THREADS", "3")
    a = estimate_selection(sc, 0.2, 100)
    monkeypatch.setenv("ZNL_THREADS", "1")
    assert estimate_selection(sc, 0.2, 100) == a


# --- estimators ---------------------------------------------------------------------


def test_selection_symmetric_sweep_covers_half():
    rows = eps_sweep(scenario(A1_SYM), "selection", 2000)
    assert [r.eps for r in rows] == [0.2, 0.1, 0.05]
    for r in rows:
        assert r.predicted == 0.5
        assert r.estimate.covers(0.5)
        assert r.abs_gap == abs(r.estimate.point - 0.5)
        assert r.estimate.diagnostics["no_exit_frac"] == 0.0


def test_selection_no_exit_majority():
    with pytest.raises(NoExitMajority):
        estimate_selection(scenario(A1_SYM, T=1e-4), 0.1, 100)


def test_selection_requires_a1():
    with pytest.raises(PreconditionViolated):
        estimate_selection(scenario(A3_SYM), 0.04, 10)


def test_occupation_at_time_zero_is_one():
    est = estimate_occupation(scenario(A3_SYM), 0.04, 10, 0.0)
    assert (est.point, est.lo, est.hi) == (1.0, 1.0, 1.0)


def test_occupation_symmetric_sliding_covers_half():
    est = estimate_occupation(scenario(A3_SYM), 0.04, 100, 0.1)
    assert est.covers(0.5)


def test_sliding_sweep_decreases():
    sc = scenario(A3_SYM)
    rows = eps_sweep(sc, "sliding", 60)
    assert nonincreasing_within_noise(rows)
    assert rows[-1].estimate.point < rows[0].estimate.point


def test_empty_grid_rejected():
    with pytest.raises(PreconditionViolated):
        eps_sweep(scenario(A1_SYM), "selection", 10, eps_grid=[])
    with pytest.raises(PreconditionViolated):
        eps_sweep(scenario(A1_SYM), "nonsense", 10)


A4_COUPLED = """\
d = 2
x0 = 0, 0
bplus = 1, x1*x2^2
bminus = -1, x1*x2^2
eps = 0.04, 0.02
delta = 0.5
T = 0.5
"""


def test_coupled_check_deterministic_single_path():
    sc = scenario(A4_COUPLED)
    a = coupled_convergence_check(sc, 0.02, 1)
    b = coupled_convergence_check(sc, 0.02, 1)
    assert a == b
    assert a.diagnostics == {"c_plus": 0.0, "c_minus": 0.0}


def test_coupled_check_needs_constant_c():
    sc = scenario(A4_COUPLED.replace("bplus = 1, x1*x2^2", "bplus = 1, x1*x2"))
    with pytest.raises(RequiresConstantC):
        coupled_convergence_check(sc, 0.02, 4)


def test_nonincreasing_within_noise():
    def row(p, se):
        return SweepRow(0.1, "x", EstimateWithCI(p, p - se, p + se, 10, se), 0.0)
    assert nonincreasing_within_noise([row(0.3, 0.01), row(0.2, 0.01), row(0.21, 0.01)])
    assert not nonincreasing_within_noise([row(0.1, 0.01), row(0.2, 0.01)])
