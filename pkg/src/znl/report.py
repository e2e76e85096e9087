"""Deterministic text output: sweep CSV and a JSON writer with fixed float formatting."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .montecarlo import EstimateWithCI, SweepRow

SWEEP_HEADER = ("eps", "estimator", "point", "lo", "hi", "n", "predicted", "abs_gap",
                "no_exit_frac", "runtime_s")


def fmt_csv(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else format(float(v), ".10g")
    return str(v)


def sweep_csv(rows: Iterable[SweepRow]) -> str:
    lines = [",".join(SWEEP_HEADER)]
    for r in rows:
        e = r.estimate
        lines.append(",".join(fmt_csv(v) for v in (
            r.eps, r.estimator, e.point, e.lo, e.hi, e.n, r.predicted, r.abs_gap,
            e.diagnostics.get("no_exit_frac"), r.runtime_s)))
    return "\n".join(lines) + "\n"


def _json_float(v: float) -> str:
    if math.isnan(v) or math.isinf(v):
        return "null"
    s = format(v, ".17g")
    return s if any(c in s for c in ".en") else s + ".0"


def _str(s: str) -> str:
    import json
    return json.dumps(s, ensure_ascii=False)


def to_jsonable(obj):
    """Recursively turn estimates, rows and numpy values into plain containers."""
    if isinstance(obj, EstimateWithCI):
        return {"point": obj.point, "lo": obj.lo, "hi": obj.hi, "n": obj.n,
                "stderr": obj.stderr, "level": obj.level,
                **({"diagnostics": to_jsonable(obj.diagnostics)} if obj.diagnostics else {})}
    if isinstance(obj, SweepRow):
        return {"eps": obj.eps, "estimator": obj.estimator, "estimate": to_jsonable(obj.estimate),
                "predicted": obj.predicted, "abs_gap": obj.abs_gap, "runtime_s": obj.runtime_s}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON with sorted keys and every float written with 17 significant digits."""
    obj = to_jsonable(obj)
    pad, inner = " " * (indent * _level), " " * (indent * (_level + 1))
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return _json_float(obj)
    if isinstance(obj, str):
        return _str(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{_str(k)}: {dumps(obj[k], indent, _level + 1)}" for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        items = [inner + dumps(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")
