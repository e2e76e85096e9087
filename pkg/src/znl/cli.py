"""``znl`` command line: classify, simulate, predict, verify, sweep, demo.

Exit codes: 0 on success, 1 when a verification check fails, 2 on bad input.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import predict as _predict
from .dsl import Scenario, load_scenario
from .errors import ConfigError, InvalidValue, ZNLError
from .field import DriftField, classify_case
from .integrate import Path, euler_maruyama, exit_time_ball, exit_time_slab, step_size
from .montecarlo import ESTIMATORS, eps_sweep, normal_drifts, path_seed
from .report import dumps, sweep_csv
from .verify import verify_scenario, write_demos

VERBS = ("classify", "simulate", "predict", "verify", "sweep", "demo")


@dataclass
class Command:
    verb: str
    scenario_path: str | None = None
    output_path: str | None = None
    overrides: dict = field(default_factory=dict)
    format: str | None = None
    paths: int | None = None
    seed: int | None = None
    level: float = 0.95
    estimator: str | None = None


def resolve_scenario_path(path: str) -> str:
    """``demo/a1_sym`` finds ``demo/a1_sym.scn`` when the bare path does not exist."""
    if not os.path.exists(path) and not os.path.splitext(path)[1] and os.path.exists(path + ".scn"):
        return path + ".scn"
    return path


def _load(c: Command) -> Scenario:
    if not c.scenario_path:
        raise ConfigError(f"'{c.verb}' needs a scenario")
    path = resolve_scenario_path(c.scenario_path)
    if not os.path.exists(path):
        raise ConfigError(f"scenario file not found: {c.scenario_path}")
    overrides = dict(c.overrides)
    if c.seed is not None:
        overrides["seed"] = str(c.seed)
    return load_scenario(path, overrides)


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _classify(c: Command) -> int:
    sc = _load(c)
    label = classify_case(DriftField.from_scenario(sc), sc.x0, sc.T, sc.delta)
    _emit(dumps(label.to_json()) + "\n", c.output_path)
    return 0


def _simulate(c: Command) -> int:
    sc = _load(c)
    f = DriftField.from_scenario(sc)
    n = c.paths or 1
    x0 = np.asarray(sc.x0, dtype=float)
    results = []
    for ei, eps in enumerate(sc.eps_grid):
        dt = step_size(f, x0, eps, sc.dt_max, delta=sc.delta, T=sc.T)
        for i in range(n):
            p = euler_maruyama(f, x0, eps, sc.T, dt, path_seed(sc.master_seed, ei, i),
                               dt_max=sc.dt_max, delta=sc.delta)
            p.stops["sigma_delta"] = exit_time_ball(p, x0, sc.delta)
            slab = exit_time_slab(p, sc.delta)
            p.stops["sigma_eps_Hdelta"] = None if slab is None else slab[0]
            results.append((ei, i, eps, p))
    if c.output_path is None:
        if len(results) != 1:
            raise ConfigError("several paths requested: pass --out DIR (or --set eps=... --paths 1)")
        _emit(results[0][3].to_csv(), None)
        return 0
    if len(results) == 1 and c.output_path.endswith(".csv"):
        _write_path(results[0][3], c.output_path)
        return 0
    os.makedirs(c.output_path, exist_ok=True)
    for ei, i, eps, p in results:
        _write_path(p, os.path.join(c.output_path, f"path_e{ei}_p{i}.csv"))
    return 0


def _write_path(p: Path, target: str) -> None:
    _emit(p.to_csv(), target)
    _emit(dumps(p.stops) + "\n", os.path.splitext(target)[0] + ".json")


def _predict_cmd(c: Command) -> int:
    sc = _load(c)
    f = DriftField.from_scenario(sc)
    bp, bm = normal_drifts(f, sc.x0)
    out = {"scenario": sc.name, "bd_plus": bp, "bd_minus": bm,
           **_predict.predictions(bp, bm, sc.delta, sc.eps_grid)}
    if sc.on_plane:
        out["case"] = classify_case(f, sc.x0, sc.T, sc.delta).tag
    _emit(dumps(out) + "\n", c.output_path)
    return 0


def _verify(c: Command) -> int:
    sc = _load(c)
    rep = verify_scenario(sc, c.paths, level=c.level)
    if (c.format or "csv") == "json":
        _emit(dumps(rep.to_json()) + "\n", c.output_path)
    else:
        _emit(sweep_csv(rep.rows), c.output_path)
    for chk in rep.checks:
        verdict = {True: "PASS", False: "FAIL", None: "REPORT"}[chk.passed]
        print(f"{verdict} {chk.name}: {chk.detail}", file=sys.stderr)
    return 0 if rep.passed else 1


def _sweep(c: Command) -> int:
    sc = _load(c)
    name = c.estimator or next((k for k in sc.checks if k in ESTIMATORS), None)
    if name is None:
        raise ConfigError("no estimator given (--estimator) and none declared in checks")
    if name not in ESTIMATORS:
        raise InvalidValue(f"unknown estimator {name!r}; known: {sorted(ESTIMATORS)}")
    rows = eps_sweep(sc, name, c.paths or sc.n_paths, level=c.level,
                     require_case=sc.theory != "none")
    if (c.format or "csv") == "json":
        _emit(dumps(rows) + "\n", c.output_path)
    else:
        _emit(sweep_csv(rows), c.output_path)
    return 0


def _demo(c: Command) -> int:
    for p in write_demos(c.output_path or "demo"):
        print(p)
    return 0


HANDLERS = {"classify": _classify, "simulate": _simulate, "predict": _predict_cmd,
            "verify": _verify, "sweep": _sweep, "demo": _demo}


def run_command(c: Command) -> int:
    if c.verb not in HANDLERS:
        print(f"error: unknown verb {c.verb!r}", file=sys.stderr)
        return 2
    try:
        return HANDLERS[c.verb](c)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ZNLError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="znl", description="Zero-noise selection lab for drifts that jump across x_d = 0.")
    ap.add_argument("verb", choices=VERBS)
    ap.add_argument("target", nargs="?", help="scenario file (or output directory for demo)")
    ap.add_argument("--scenario", help="scenario file")
    ap.add_argument("--out", help="output file or directory")
    ap.add_argument("--format", choices=("csv", "json"))
    ap.add_argument("--set", action="append", metavar="K=V", help="override a scenario key")
    ap.add_argument("--paths", type=int, help="number of paths")
    ap.add_argument("--seed", type=int, help="master seed")
    ap.add_argument("--level", type=float, default=0.95, help="confidence level")
    ap.add_argument("--estimator", choices=sorted(ESTIMATORS), help="statistic for sweep")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        ns = ap.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        overrides = _parse_set(ns.set)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if ns.paths is not None and ns.paths < 1:
        print("error: --paths must be >= 1", file=sys.stderr)
        return 2
    if not 0 < ns.level < 1:
        print("error: --level must lie in (0, 1)", file=sys.stderr)
        return 2
    scenario = ns.scenario or (ns.target if ns.verb != "demo" else None)
    out = ns.out or (ns.target if ns.verb == "demo" else None)
    cmd = Command(ns.verb, scenario, out, overrides, ns.format, ns.paths, ns.seed, ns.level,
                  ns.estimator)
    return run_command(cmd)


if __name__ == "__main__":
    sys.exit(main())
