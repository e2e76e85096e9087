"""Scenario-declared checks and the bundled demo scenarios.

A scenario lists ``checks``; each one runs an estimator over (part of) the
epsilon grid and compares against the closed-form limit.  Thresholds come from
``expect_*`` keys, with the defaults below.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Callable

from .dsl import Scenario
from .field import CaseLabel, DriftField, classify_case
from .montecarlo import SweepRow, eps_sweep, nonincreasing_within_noise, prehitting_coupling

DEFAULT_EXPECT = {
    "one_sided_max": 0.02,
    "one_sided_threshold": 0.05,
    "sliding_max": 0.05,
    "coupled_max": 0.05,
    "confinement_factor": 5.0,
    "ks_bias": 0.03,
    "ks_coefficient": 1.36,
}


@dataclass
class CheckResult:
    name: str
    passed: bool | None  # None means report-only
    detail: str
    rows: list = field(default_factory=list)


@dataclass
class VerifyReport:
    scenario: str
    label: CaseLabel
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed is not False for c in self.checks)

    @property
    def rows(self) -> list[SweepRow]:
        return [r for c in self.checks for r in c.rows]

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "case": self.label.to_json(),
            "passed": self.passed,
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail, "rows": c.rows}
                       for c in self.checks],
        }


def _expect(sc: Scenario, key: str) -> float:
    return float(sc.expect.get(key, DEFAULT_EXPECT[key]))


def _smallest(sc: Scenario, k: int = 1) -> list[float]:
    return sorted(sc.eps_grid)[:k]


def _check_selection(sc, N, kw):
    rows = eps_sweep(sc, "selection", N, eps_grid=_smallest(sc, 2), **kw)
    ok = all(r.estimate.covers(r.predicted) for r in rows)
    return ok, "CI covers p+ = {:.6g} at the two smallest eps".format(rows[0].predicted), rows


def _check_occupation(sc, N, kw):
    t = sc.expect.get("occupation_t", sc.T)
    rows = eps_sweep(sc, "occupation", N, eps_grid=_smallest(sc), options={"t": t}, **kw)
    r = rows[-1]
    return r.estimate.covers(r.predicted), f"CI covers rho+ = {r.predicted:.6g} on [0, {t:g}]", rows


def _check_one_sided(sc, N, kw):
    thr, cap = _expect(sc, "one_sided_threshold"), _expect(sc, "one_sided_max")
    rows = eps_sweep(sc, "one_sided", N, eps_grid=_smallest(sc), options={"threshold": thr}, **kw)
    return rows[-1].estimate.point <= cap, f"share of paths with wrong-side time > {thr:g} is <= {cap:g}", rows


def _check_decreasing(name, cap_key):
    def check(sc, N, kw):
        cap = _expect(sc, cap_key)
        rows = eps_sweep(sc, name, N, **kw)
        ok = nonincreasing_within_noise(rows) and rows[-1].estimate.point <= cap
        return ok, f"median sup-error non-increasing within 2 stderr and <= {cap:g} at the smallest eps", rows
    return check


def _check_confinement(sc, N, kw):
    k = _expect(sc, "confinement_factor")
    rows = eps_sweep(sc, "confinement", N, eps_grid=_smallest(sc), **kw)
    r = rows[-1]
    return r.estimate.point <= k * r.eps, f"median max |x_d| <= {k:g} eps", rows


def _check_ks(sc, N, kw):
    rows = eps_sweep(sc, "ks", N, eps_grid=_smallest(sc), **kw)
    bound = _expect(sc, "ks_coefficient") / math.sqrt(N) + _expect(sc, "ks_bias")
    return rows[-1].estimate.point <= bound, f"KS distance <= {bound:.6g}", rows


def _check_prehit(sc, N, kw):
    res = prehitting_coupling(sc, N, level=kw.get("level", 0.95), workers=kw.get("workers"))
    ratios = ", ".join(f"{e:g}: {r.point:.4g}" for e, r in zip(res.eps, res.ratios))
    return res.passed, f"median sup-error/eps ({ratios}) <= K = {res.K:.4g}", []


CHECK_RUNNERS: dict[str, Callable] = {
    "selection": _check_selection,
    "occupation": _check_occupation,
    "one_sided": _check_one_sided,
    "sliding": _check_decreasing("sliding", "sliding_max"),
    "coupled": _check_decreasing("coupled", "coupled_max"),
    "confinement": _check_confinement,
    "ks": _check_ks,
    "prehit": _check_prehit,
}


def verify_scenario(sc: Scenario, N: int | None = None, *, level: float = 0.95,
                    workers: int | None = None) -> VerifyReport:
    """Run every declared check; out-of-theory scenarios are reported without verdicts."""
    N = N or sc.n_paths
    f = DriftField.from_scenario(sc)
    report_only = sc.theory == "none"
    x0 = list(sc.x0)
    label = classify_case(f, x0, sc.T, sc.delta) if sc.on_plane else CaseLabel(
        "Mixed", 0.0, sc.delta, sc.T, 0, [], None)
    checks = []
    if sc.expect_case is not None:
        ok = label.tag == sc.expect_case
        checks.append(CheckResult("case", None if report_only else ok,
                                  f"classified {label.tag}, expected {sc.expect_case}"))
    kw = {"level": level, "workers": workers, "require_case": not report_only}
    for name in sc.checks:
        ok, detail, rows = CHECK_RUNNERS[name](sc, N, kw)
        checks.append(CheckResult(name, None if report_only else bool(ok), detail, rows))
    return VerifyReport(sc.name, label, checks)


DEMOS: dict[str, str] = {
    "a1_sym": """\
# Symmetric repelling hyperplane: b = sgn(x), both exits equally likely.
name = a1_sym
d = 1
x0 = 0
bplus = sgn(x1)
bminus = sgn(x1)
eps = 0.08, 0.04, 0.02
delta = 0.1
T = 1
n_paths = 10000
seed = 1
expect_case = A1
checks = selection
""",
    "a1_asym": """\
# Asymmetric repelling hyperplane: speeds 2 up and 1 down select "up" with probability 2/3.
name = a1_asym
d = 1
x0 = 0
bplus = 2
bminus = -1
eps = 0.08, 0.04, 0.02
delta = 0.1
T = 1
n_paths = 10000
seed = 2
expect_case = A1
checks = selection
""",
    "a2_plus": """\
# Both sides push upward: the path crosses H once and never returns.
name = a2_plus
d = 2
x0 = 0, 0
bplus = 1, 1
bminus = 0, 0.5
eps = 0.04, 0.02, 0.01
delta = 0.1
T = 0.5
n_paths = 1000
seed = 3
expect_case = A2plus
checks = one_sided
""",
    "a3_sliding": """\
# Attracting hyperplane: the path slides along H with tangential speed 1/2.
name = a3_sliding
d = 2
x0 = 0, 0
bplus = 1, -1
bminus = 0, 1
eps = 0.04, 0.02, 0.01
delta = 0.25
T = 0.5
n_paths = 200
seed = 4
expect_case = A3
checks = occupation, sliding, confinement
expect_occupation_t = 0.05
""",
    "a4_example": """\
# Tangent field: the limit moves by the time w_d spends positive (arcsine law).
name = a4_example
d = 2
x0 = 0, 0
bplus = 1, 0
bminus = 0, 0
eps = 0.04, 0.02, 0.01
delta = 2
T = 1
n_paths = 10000
seed = 5
expect_case = A4
checks = ks, coupled
""",
    "bafico_baldi": """\
# Non-Lipschitz b = 2 sgn(x) sqrt|x|: outside the theory, reported only.
name = bafico_baldi
d = 1
x0 = 0
bplus = 2*sgn(x1)*sqrt(abs(x1))
bminus = 2*sgn(x1)*sqrt(abs(x1))
eps = 0.08, 0.04, 0.02
delta = 0.1
T = 1
n_paths = 2000
seed = 6
theory = none
checks = selection
""",
}


def write_demos(directory) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for name, text in DEMOS.items():
        p = os.path.join(directory, name + ".scn")
        with open(p, "w", encoding="utf-8") as fh:
            fh.write(text)
        paths.append(p)
    return paths
