"""Scenario files and the drift expression language.

Expressions are arithmetic over ``t`` and ``x1..xd``::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?          # right associative
    atom   := NUMBER | 't' | 'x' INT | FUNC '(' args ')' | '(' expr ')'

Functions: sin cos exp sqrt abs sgn tanh (one argument), min max (two).
``sgn(0) == 0``.  There are no conditionals; the only discontinuity in a
scenario is the switch between ``bplus`` and ``bminus`` across ``x_d = 0``.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Union

import numpy as np

from .errors import (
    DimensionMismatch,
    DomainError,
    ExprSyntaxError,
    InvalidValue,
    MissingKey,
    UnknownIdentifier,
)

MAX_DEPTH = 100

FUNCTIONS = {
    "sin": 1, "cos": 1, "exp": 1, "sqrt": 1, "abs": 1, "sgn": 1, "tanh": 1,
    "min": 2, "max": 2,
}


# --------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # 1-based, x1..xd


@dataclass(frozen=True)
class TimeVar:
    pass


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


Expr = Union[Num, Var, TimeVar, Neg, BinOp, Call]


def max_var_index(e: Expr) -> int:
    if isinstance(e, Var):
        return e.index
    if isinstance(e, Neg):
        return max_var_index(e.arg)
    if isinstance(e, BinOp):
        return max(max_var_index(e.left), max_var_index(e.right))
    if isinstance(e, Call):
        return max((max_var_index(a) for a in e.args), default=0)
    return 0


# --------------------------------------------------------------------------
# Tokenizer / parser

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


@dataclass
class _Tok:
    kind: str  # num, name, op, eof
    text: str
    offset: int  # byte offset


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    n = len(text)

    def boff(i):
        return len(text[:i].encode("utf-8"))

    while True:
        while pos < n and text[pos].isspace():
            pos += 1
        if pos >= n:
            toks.append(_Tok("eof", "", boff(n)))
            return toks
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            raise ExprSyntaxError(boff(pos), "number, identifier or operator")
        kind = m.lastgroup
        toks.append(_Tok(kind, m.group(kind), boff(m.start(kind))))
        pos = m.end()


class _Parser:
    # Every method returns (node, tree depth); both the recursion of the parser
    # and the depth of the tree are capped so evaluation never overflows the stack.
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0
        self.nesting = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def _advance(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def _at(self, chars: str) -> bool:
        return self.tok.kind == "op" and self.tok.text in chars

    def _expect(self, text: str) -> None:
        if self._at(text):
            self.i += 1
        else:
            raise ExprSyntaxError(self.tok.offset, repr(text))

    def _node(self, node: Expr, depth: int, offset: int):
        if depth > MAX_DEPTH:
            raise ExprSyntaxError(offset, f"expression depth <= {MAX_DEPTH}")
        return node, depth

    def parse(self) -> Expr:
        e, _ = self.expr()
        if self.tok.kind != "eof":
            raise ExprSyntaxError(self.tok.offset, "operator or end of input")
        return e

    def expr(self):
        left, dl = self.term()
        while self._at("+-"):
            tok = self._advance()
            right, dr = self.term()
            left, dl = self._node(BinOp(tok.text, left, right), 1 + max(dl, dr), tok.offset)
        return left, dl

    def term(self):
        left, dl = self.unary()
        while self._at("*/"):
            tok = self._advance()
            right, dr = self.unary()
            left, dl = self._node(BinOp(tok.text, left, right), 1 + max(dl, dr), tok.offset)
        return left, dl

    def unary(self):
        self.nesting += 1
        if self.nesting > MAX_DEPTH:
            raise ExprSyntaxError(self.tok.offset, f"nesting depth <= {MAX_DEPTH}")
        try:
            if self._at("-"):
                tok = self._advance()
                arg, da = self.unary()
                return self._node(Neg(arg), 1 + da, tok.offset)
            return self.power()
        finally:
            self.nesting -= 1

    def power(self):
        base, db = self.atom()
        if self._at("^"):
            tok = self._advance()
            exp, de = self.unary()
            return self._node(BinOp("^", base, exp), 1 + max(db, de), tok.offset)
        return base, db

    def atom(self):
        tok = self.tok
        if tok.kind == "num":
            self._advance()
            value = float(tok.text)
            if not math.isfinite(value):
                raise ExprSyntaxError(tok.offset, "finite number")
            return Num(value), 1
        if tok.kind == "name":
            self._advance()
            name = tok.text
            if name == "t":
                return TimeVar(), 1
            m = re.fullmatch(r"x([1-9][0-9]*)", name)
            if m:
                return Var(int(m.group(1))), 1
            if name in FUNCTIONS:
                self._expect("(")
                args = [self.expr()]
                while self._at(","):
                    self._advance()
                    args.append(self.expr())
                if len(args) != FUNCTIONS[name]:
                    raise ExprSyntaxError(self.tok.offset, f"{FUNCTIONS[name]} argument(s) to {name}")
                self._expect(")")
                depth = 1 + max(da for _, da in args)
                return self._node(Call(name, tuple(a for a, _ in args)), depth, tok.offset)
            raise UnknownIdentifier(name)
        if self._at("("):
            self._advance()
            e = self.expr()
            self._expect(")")
            return e
        raise ExprSyntaxError(tok.offset, "number, variable, function or '('")


def parse_expr(text: str, d: int | None = None) -> Expr:
    """Parse ``text``; with ``d`` given, reject variables beyond ``x{d}``."""
    e = _Parser(text).parse()
    if d is not None and max_var_index(e) > d:
        raise UnknownIdentifier(f"x{max_var_index(e)}")
    return e


def pretty(e: Expr) -> str:
    """Fully parenthesised text that reparses to an equivalent AST."""
    if isinstance(e, Num):
        return repr(e.value) if e.value >= 0 else f"(-{repr(-e.value)})"
    if isinstance(e, Var):
        return f"x{e.index}"
    if isinstance(e, TimeVar):
        return "t"
    if isinstance(e, Neg):
        return f"(-{pretty(e.arg)})"
    if isinstance(e, BinOp):
        return f"({pretty(e.left)} {e.op} {pretty(e.right)})"
    if isinstance(e, Call):
        return f"{e.name}({', '.join(pretty(a) for a in e.args)})"
    raise TypeError(f"not an expression: {e!r}")


# --------------------------------------------------------------------------
# Evaluation


def _sgn(v: float) -> float:
    return 1.0 if v > 0 else (-1.0 if v < 0 else 0.0)


_SCALAR_FUNCS: dict[str, Callable] = {
    "sin": math.sin, "cos": math.cos, "exp": math.exp, "sqrt": math.sqrt,
    "abs": abs, "sgn": _sgn, "tanh": math.tanh, "min": min, "max": max,
}


def _eval(e: Expr, t: float, x) -> float:
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        return float(x[e.index - 1])
    if isinstance(e, TimeVar):
        return float(t)
    if isinstance(e, Neg):
        return -_eval(e.arg, t, x)
    if isinstance(e, BinOp):
        a = _eval(e.left, t, x)
        b = _eval(e.right, t, x)
        op = e.op
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            if b == 0.0:
                raise DomainError("division by zero")
            return a / b
        try:
            return math.pow(a, b)
        except (ValueError, OverflowError, ZeroDivisionError) as exc:
            raise DomainError(f"{a!r} ^ {b!r}: {exc}") from None
    if isinstance(e, Call):
        args = [_eval(a, t, x) for a in e.args]
        try:
            return float(_SCALAR_FUNCS[e.name](*args))
        except (ValueError, OverflowError) as exc:
            raise DomainError(f"{e.name}{tuple(args)}: {exc}") from None
    raise TypeError(f"not an expression: {e!r}")


def eval_expr(e: Expr, t: float, x) -> float:
    """Evaluate at scalar time ``t`` and point ``x``; non-finite results raise."""
    v = _eval(e, t, x)
    if not math.isfinite(v):
        raise DomainError(f"non-finite value {v!r}")
    return v


_NP_FUNCS = {
    "sin": "_np.sin", "cos": "_np.cos", "exp": "_np.exp", "sqrt": "_np.sqrt",
    "abs": "_np.abs", "sgn": "_np.sign", "tanh": "_np.tanh",
    "min": "_np.minimum", "max": "_np.maximum",
}


def _codegen(e: Expr) -> str:
    if isinstance(e, Num):
        return f"({e.value!r})"
    if isinstance(e, Var):
        return f"x[:, {e.index - 1}]"
    if isinstance(e, TimeVar):
        return "t"
    if isinstance(e, Neg):
        return f"(-{_codegen(e.arg)})"
    if isinstance(e, BinOp):
        a, b = _codegen(e.left), _codegen(e.right)
        if e.op == "^":
            return f"_np.power({a}, {b})"
        return f"({a} {e.op} {b})"
    if isinstance(e, Call):
        return f"{_NP_FUNCS[e.name]}({', '.join(_codegen(a) for a in e.args)})"
    raise TypeError(f"not an expression: {e!r}")


def compile_vector(exprs: tuple, d: int) -> Callable[[float, np.ndarray], np.ndarray]:
    """Vectorised evaluator: ``f(t, X)`` with ``X`` of shape (N, d) -> (N, len(exprs)).

    Domain errors surface as nan/inf in the output; callers check finiteness.
    """
    lines = ["def _f(t, x, out):"]
    for j, e in enumerate(exprs):
        if max_var_index(e) > d:
            raise UnknownIdentifier(f"x{max_var_index(e)}")
        lines.append(f"    out[:, {j}] = {_codegen(e)}")
    lines.append("    return out")
    ns: dict = {"_np": np}
    exec(compile("\n".join(lines), "<drift>", "exec"), ns)
    inner = ns["_f"]
    m = len(exprs)

    def f(t: float, X: np.ndarray) -> np.ndarray:
        return inner(t, X, np.empty((X.shape[0], m)))

    return f


# --------------------------------------------------------------------------
# Scenario files

CHECKS = ("selection", "one_sided", "occupation", "sliding", "confinement",
          "ks", "coupled", "prehit")
CASE_TAGS = ("A1", "A2plus", "A2minus", "A3", "A3plus", "A3minus", "A4", "Mixed")

_REQUIRED = ("d", "x0", "bplus", "bminus", "eps")
_KNOWN = _REQUIRED + ("T", "delta", "dt_max", "n_paths", "seed",
                      "name", "theory", "expect_case", "checks")


@dataclass(frozen=True)
class Scenario:
    d: int
    x0: tuple
    bplus: tuple
    bminus: tuple
    eps_grid: tuple
    T: float = 1.0
    delta: float = 0.1
    dt_max: float = 1e-3
    n_paths: int = 10000
    master_seed: int = 0
    name: str = ""
    theory: str = "hyperplane"
    expect_case: str | None = None
    checks: tuple = ()
    expect: Mapping[str, float] = field(default_factory=dict)
    bplus_text: tuple = ()
    bminus_text: tuple = ()

    @property
    def on_plane(self) -> bool:
        return self.x0[-1] == 0.0


def _real(key: str, text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise InvalidValue(f"{key}: not a real number: {text!r}") from None
    if not math.isfinite(v):
        raise InvalidValue(f"{key}: must be finite, got {text!r}")
    return v


def _int(key: str, text: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise InvalidValue(f"{key}: not an integer: {text!r}") from None


def _list(text: str) -> list[str]:
    row = next(csv.reader([text], skipinitialspace=True))
    return [s.strip() for s in row]


def _read_pairs(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidValue(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise InvalidValue(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def _check_key(key: str) -> None:
    if key not in _KNOWN and not key.startswith("expect_"):
        raise InvalidValue(f"unknown key {key!r}")


def parse_scenario(text: str, overrides: Mapping[str, str] | None = None) -> Scenario:
    """Parse the ``key = value`` scenario format; ``overrides`` replace file values."""
    pairs = _read_pairs(text)
    for key, value in (overrides or {}).items():
        _check_key(key)
        pairs[key] = value
    for key in pairs:
        _check_key(key)
    for key in _REQUIRED:
        if key not in pairs:
            raise MissingKey(key)

    d = _int("d", pairs["d"])
    if d < 1:
        raise InvalidValue("d must be >= 1")
    x0 = tuple(_real("x0", s) for s in _list(pairs["x0"]))
    if len(x0) != d:
        raise DimensionMismatch(f"x0 has {len(x0)} components, d={d}")

    exprs = {}
    for key in ("bplus", "bminus"):
        texts = _list(pairs[key])
        if len(texts) != d:
            raise DimensionMismatch(f"{key} has {len(texts)} components, d={d}")
        exprs[key] = (tuple(texts), tuple(parse_expr(s, d) for s in texts))

    eps = tuple(_real("eps", s) for s in _list(pairs["eps"]))
    if not eps or any(e <= 0 for e in eps) or any(a <= b for a, b in zip(eps, eps[1:])):
        raise InvalidValue("eps must be positive and strictly decreasing")

    kw: dict = {}
    for key in ("T", "delta", "dt_max"):
        if key in pairs:
            v = _real(key, pairs[key])
            if v <= 0:
                raise InvalidValue(f"{key} must be > 0")
            kw[key] = v
    if "n_paths" in pairs:
        kw["n_paths"] = _int("n_paths", pairs["n_paths"])
        if kw["n_paths"] < 1:
            raise InvalidValue("n_paths must be >= 1")
    if "seed" in pairs:
        s = _int("seed", pairs["seed"])
        if not 0 <= s < 2**64:
            raise InvalidValue("seed must fit in 64 unsigned bits")
        kw["master_seed"] = s
    if "name" in pairs:
        kw["name"] = pairs["name"]
    if "theory" in pairs:
        if pairs["theory"] not in ("hyperplane", "none"):
            raise InvalidValue("theory must be 'hyperplane' or 'none'")
        kw["theory"] = pairs["theory"]
    if "expect_case" in pairs:
        if pairs["expect_case"] not in CASE_TAGS:
            raise InvalidValue(f"expect_case must be one of {CASE_TAGS}")
        kw["expect_case"] = pairs["expect_case"]
    if "checks" in pairs:
        checks = tuple(c for c in _list(pairs["checks"]) if c)
        bad = [c for c in checks if c not in CHECKS]
        if bad:
            raise InvalidValue(f"unknown checks {bad}; known: {CHECKS}")
        kw["checks"] = checks
    kw["expect"] = {
        k[len("expect_"):]: _real(k, v)
        for k, v in pairs.items()
        if k.startswith("expect_") and k != "expect_case"
    }

    return Scenario(
        d=d, x0=x0,
        bplus=exprs["bplus"][1], bminus=exprs["bminus"][1],
        bplus_text=exprs["bplus"][0], bminus_text=exprs["bminus"][0],
        eps_grid=eps, **kw,
    )


def load_scenario(path, overrides: Mapping[str, str] | None = None) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read(), overrides)
