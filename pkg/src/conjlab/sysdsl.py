"""Arithmetic expression language and system-definition loader.

A system is the pair ``x' = A(t) x`` / ``y' = A(t) y + f(t, y)``.  Entries of
``A`` and components of ``f`` are written as small arithmetic expressions in
the variables ``t`` and ``y1 .. yn``::

    0.1*exp(-0.5*t)*sin(y1)

Precedence, loosest first: ``+ -``, ``* /``, unary ``-``, ``^``.  The power
operator is right-associative, so ``-2^2`` is ``-(2^2)`` and ``2^3^2`` is
``2^(3^2)``.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

FUNCTIONS = {
    "sin": 1, "cos": 1, "tan": 1, "tanh": 1, "exp": 1,
    "log": 1, "abs": 1, "sqrt": 1, "min": 2, "max": 2,
}
CONSTANTS = {"pi": math.pi}
PROJECTOR_TOL = 1e-12


class DslError(ValueError):
    """Base class for expression and config errors."""


class ExprSyntaxError(DslError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownIdentifierError(DslError):
    def __init__(self, name, offset):
        super().__init__(f"unknown identifier {name!r} at offset {offset}")
        self.name = name
        self.offset = offset


class ArityError(DslError):
    def __init__(self, name, expected, got, offset):
        super().__init__(
            f"{name}() takes {expected} argument(s), got {got} (offset {offset})"
        )
        self.offset = offset


class DomainError(ArithmeticError):
    """Raised when an expression is evaluated outside its domain."""


class ConfigError(DslError):
    """Malformed or inconsistent system configuration."""


# --------------------------------------------------------------------------
# AST

@dataclass(frozen=True)
class Num:
    value: float

    def __post_init__(self):
        if not (math.isfinite(self.value) and self.value >= 0.0):
            raise ValueError("numeric literals are finite and nonnegative")


@dataclass(frozen=True)
class Const:
    name: str


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


Expr = Union[Num, Const, Var, Neg, BinOp, Call]

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}
_NEG_PREC = 3
_ATOM_PREC = 5


def _prec(node):
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return _NEG_PREC
    return _ATOM_PREC


def free_variables(node) -> set:
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Neg):
        return free_variables(node.operand)
    if isinstance(node, BinOp):
        return free_variables(node.left) | free_variables(node.right)
    if isinstance(node, Call):
        out = set()
        for a in node.args:
            out |= free_variables(a)
        return out
    return set()


def to_source(node) -> str:
    """Print an AST with the minimum parentheses needed to reparse it."""
    if isinstance(node, Num):
        return repr(float(node.value))
    if isinstance(node, (Const, Var)):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}({', '.join(to_source(a) for a in node.args)})"
    if isinstance(node, Neg):
        inner = to_source(node.operand)
        if _prec(node.operand) < _NEG_PREC:
            inner = f"({inner})"
        return f"-{inner}"
    p = _PREC[node.op]
    left, right = to_source(node.left), to_source(node.right)
    if node.op == "^":
        if _prec(node.left) <= p:
            left = f"({left})"
        if _prec(node.right) < _NEG_PREC:
            right = f"({right})"
        return f"{left}^{right}"
    if _prec(node.left) < p:
        left = f"({left})"
    if _prec(node.right) <= p:
        right = f"({right})"
    return f"{left} {node.op} {right}"


# --------------------------------------------------------------------------
# parser

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)
_YVAR = re.compile(r"y([1-9]\d*)")


class _Parser:
    def __init__(self, src, dim):
        self.src = src
        self.dim = dim
        self.tokens = []
        pos = 0
        while True:
            m = _TOKEN.match(src, pos)
            if m is None or m.end() == pos:
                rest = src[pos:]
                if rest.strip() == "":
                    break
                bad = pos + (len(rest) - len(rest.lstrip()))
                raise ExprSyntaxError(f"unexpected character {src[bad]!r}", self._byte(bad))
            kind = m.lastgroup
            self.tokens.append((kind, m.group(kind), m.start(kind)))
            pos = m.end()
        self.i = 0

    def _byte(self, char_index):
        return len(self.src[:char_index].encode("utf-8"))

    def peek(self):
        if self.i < len(self.tokens):
            return self.tokens[self.i]
        return ("end", None, len(self.src))

    def take(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, pos = self.take()
        if text != value:
            what = "end of input" if kind == "end" else repr(text)
            raise ExprSyntaxError(f"expected {value!r}, found {what}", self._byte(pos))

    def parse(self):
        node = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected {text!r}", self._byte(pos))
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[1] == "-":
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        kind, text, pos = self.take()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            if self.peek()[1] == "(":
                return self.call(text, pos)
            return self.identifier(text, pos)
        if text == "(":
            node = self.expr()
            self.expect(")")
            return node
        what = "end of input" if kind == "end" else repr(text)
        raise ExprSyntaxError(f"unexpected {what}", self._byte(pos))

    def call(self, name, pos):
        if name not in FUNCTIONS:
            raise UnknownIdentifierError(name, self._byte(pos))
        self.expect("(")
        args = [self.expr()]
        while self.peek()[1] == ",":
            self.take()
            args.append(self.expr())
        self.expect(")")
        if len(args) != FUNCTIONS[name]:
            raise ArityError(name, FUNCTIONS[name], len(args), self._byte(pos))
        return Call(name, tuple(args))

    def identifier(self, name, pos):
        if name == "t":
            return Var("t")
        if name in CONSTANTS:
            return Const(name)
        m = _YVAR.fullmatch(name)
        if m and (self.dim is None or int(m.group(1)) <= self.dim):
            return Var(name)
        raise UnknownIdentifierError(name, self._byte(pos))


def parse_expression(src: str, dim: int | None = None) -> Expr:
    """Parse ``src`` into an AST.

    With ``dim`` given, only ``y1 .. y{dim}`` are accepted as state variables.
    """
    if not src or not src.strip():
        raise ExprSyntaxError("empty expression", 0)
    return _Parser(src, dim).parse()


# --------------------------------------------------------------------------
# scalar evaluation

def _checked_pow(x, p):
    if x == 0.0 and p < 0:
        raise DomainError("zero raised to a negative power")
    if x < 0.0 and not float(p).is_integer():
        raise DomainError("negative base with non-integer exponent")
    return math.pow(x, p)


def _checked_log(x):
    if x <= 0.0:
        raise DomainError(f"log of non-positive value {x!r}")
    return math.log(x)


def _checked_sqrt(x):
    if x < 0.0:
        raise DomainError(f"sqrt of negative value {x!r}")
    return math.sqrt(x)


_SCALAR_FUNCS = {
    "sin": math.sin, "cos": math.cos, "tan": math.tan, "tanh": math.tanh,
    "exp": math.exp, "log": _checked_log, "abs": abs, "sqrt": _checked_sqrt,
    "min": min, "max": max,
}


def _bindings(t, y):
    env = {"t": float(t)}
    for k, v in enumerate(np.atleast_1d(np.asarray(y, dtype=float)), start=1):
        env[f"y{k}"] = float(v)
    return env


def _eval(node, env):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Const):
        return CONSTANTS[node.name]
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise DslError(f"no binding for variable {node.name!r}") from None
    if isinstance(node, Neg):
        return -_eval(node.operand, env)
    if isinstance(node, Call):
        return _SCALAR_FUNCS[node.func](*(_eval(a, env) for a in node.args))
    a, b = _eval(node.left, env), _eval(node.right, env)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    if node.op == "/":
        if b == 0.0:
            raise DomainError("division by zero")
        return a / b
    return _checked_pow(a, b)


def eval_expression(ast: Expr, t: float, y=()) -> float:
    """Evaluate ``ast`` in double precision at ``(t, y)``."""
    try:
        value = _eval(ast, _bindings(t, y))
    except OverflowError as exc:
        raise DomainError(f"overflow: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, DslError):
            raise
        raise DomainError(str(exc)) from None
    if not math.isfinite(value):
        raise DomainError(f"non-finite result {value!r}")
    return float(value)


# --------------------------------------------------------------------------
# vectorized evaluation

_NP_FUNCS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "tanh": np.tanh,
    "exp": np.exp, "log": np.log, "abs": np.abs, "sqrt": np.sqrt,
    "min": np.minimum, "max": np.maximum,
}


def _np_pow(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any((a == 0.0) & (b < 0)):
        raise FloatingPointError("zero raised to a negative power")
    return np.power(a, b)


def _np_div(a, b):
    if np.any(np.asarray(b) == 0.0):
        raise FloatingPointError("division by zero")
    return np.divide(a, b)


def _np_log(x):
    if np.any(np.asarray(x) <= 0.0):
        raise FloatingPointError("log of non-positive value")
    return np.log(x)


def _build(node) -> Callable:
    if isinstance(node, Num):
        v = node.value
        return lambda env: v
    if isinstance(node, Const):
        v = CONSTANTS[node.name]
        return lambda env: v
    if isinstance(node, Var):
        name = node.name
        return lambda env: env[name]
    if isinstance(node, Neg):
        inner = _build(node.operand)
        return lambda env: -inner(env)
    if isinstance(node, Call):
        fn = _np_log if node.func == "log" else _NP_FUNCS[node.func]
        args = [_build(a) for a in node.args]
        if len(args) == 1:
            a0 = args[0]
            return lambda env: fn(a0(env))
        a0, a1 = args
        return lambda env: fn(a0(env), a1(env))
    left, right = _build(node.left), _build(node.right)
    op = {"+": np.add, "-": np.subtract, "*": np.multiply,
          "/": _np_div, "^": _np_pow}[node.op]
    return lambda env: op(left(env), right(env))


def compile_vector_field(exprs, dim: int) -> Callable:
    """Compile component expressions into ``F(t, Y) -> array``.

    ``t`` broadcasts against the trailing axes of ``Y`` (shape ``(dim, ...)``);
    the result has shape ``(len(exprs), *broadcast_shape)``.
    """
    parts = [_build(e) for e in exprs]

    def field(t, Y):
        Y = np.asarray(Y, dtype=float)
        t = np.asarray(t, dtype=float)
        env = {"t": t}
        for k in range(dim):
            env[f"y{k + 1}"] = Y[k]
        shape = np.broadcast_shapes(t.shape, Y.shape[1:])
        out = np.empty((len(parts),) + shape)
        try:
            with np.errstate(divide="raise", invalid="raise", over="raise"):
                for i, p in enumerate(parts):
                    out[i] = p(env)
        except FloatingPointError as exc:
            raise DomainError(str(exc)) from None
        return out

    return field


def compile_matrix(rows, dim: int) -> Callable:
    """Compile an n x n grid of t-only expressions into ``A(t) -> (..., n, n)``."""
    flat = [e for row in rows for e in row]
    field = compile_vector_field(flat, dim)
    n = len(rows)

    def matrix(t):
        t = np.asarray(t, dtype=float)
        vals = field(t, np.zeros((dim,) + t.shape))
        return np.moveaxis(vals.reshape((n, n) + t.shape), (0, 1), (-2, -1))

    return matrix


# --------------------------------------------------------------------------
# single-point fast path: expressions become Python source, compiled once

def _checked_div(a, b):
    if b == 0.0:
        raise DomainError("division by zero")
    return a / b


_PY_NAMESPACE = {
    "_sin": math.sin, "_cos": math.cos, "_tan": math.tan, "_tanh": math.tanh,
    "_exp": math.exp, "_log": _checked_log, "_abs": abs, "_sqrt": _checked_sqrt,
    "_min": min, "_max": max, "_pow": _checked_pow, "_div": _checked_div,
}


def to_python(node) -> str:
    """Python source for ``node`` over the names ``t, y1..yn`` (fully parenthesized)."""
    if isinstance(node, Num):
        return repr(float(node.value))
    if isinstance(node, Const):
        return repr(CONSTANTS[node.name])
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{to_python(node.operand)})"
    if isinstance(node, Call):
        return f"_{node.func}({', '.join(to_python(a) for a in node.args)})"
    a, b = to_python(node.left), to_python(node.right)
    if node.op == "/":
        return f"_div({a}, {b})"
    if node.op == "^":
        return f"_pow({a}, {b})"
    return f"({a} {node.op} {b})"


def compile_point_functions(A_rows, f_exprs, dim):
    """Single-point ``A(t)``, ``f(t, y)`` and ``A(t) y + f(t, y)`` as compiled Python.

    These avoid the per-call overhead of the array path inside ODE
    right-hand sides, where one point is evaluated at a time.
    """
    names = ", ".join(f"y{k + 1}" for k in range(dim))
    unpack = f"    {names}, = y\n"
    A_src = ", ".join("[" + ", ".join(to_python(e) for e in row) + "]" for row in A_rows)
    f_src = ", ".join(to_python(e) for e in f_exprs)
    rhs_terms = []
    for i, row in enumerate(A_rows):
        terms = [f"({to_python(e)})*y{j + 1}" for j, e in enumerate(row)
                 if not (isinstance(e, Num) and e.value == 0.0)]
        terms.append(to_python(f_exprs[i]))
        rhs_terms.append(" + ".join(terms))
    src = (
        "def A_point(t):\n"
        f"    return _np.array([{A_src}])\n"
        "def f_point(t, y):\n" + unpack +
        f"    return _np.array([{f_src}])\n"
        "def rhs_point(t, y):\n" + unpack +
        f"    return _np.array([{', '.join(rhs_terms)}])\n"
    )
    ns = dict(_PY_NAMESPACE, _np=np)
    exec(compile(src, "<system>", "exec"), ns)

    def guard(fn):
        def wrapped(*args):
            try:
                out = fn(*args)
            except (ValueError, ZeroDivisionError, OverflowError) as exc:
                if isinstance(exc, DomainError):
                    raise
                raise DomainError(str(exc)) from None
            return out
        return wrapped

    return guard(ns["A_point"]), guard(ns["f_point"]), guard(ns["rhs_point"])


# --------------------------------------------------------------------------
# system definitions

@dataclass(frozen=True)
class SystemDefinition:
    dim: int
    A: tuple
    f: tuple
    P0: np.ndarray
    horizon: float
    constants: dict = field(default_factory=dict)
    numerics: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "_A", compile_matrix(self.A, self.dim))
        object.__setattr__(self, "_f", compile_vector_field(self.f, self.dim))
        A_pt, f_pt, rhs_pt = compile_point_functions(self.A, self.f, self.dim)
        object.__setattr__(self, "A_point", A_pt)
        object.__setattr__(self, "f_point", f_pt)
        object.__setattr__(self, "rhs_point", rhs_pt)

    def A_at(self, t):
        """A(t) for scalar or array ``t``; shape ``(*t.shape, n, n)``."""
        return self._A(t)

    def f_at(self, t, Y):
        return self._f(t, Y)

    @property
    def is_linear(self) -> bool:
        """True when every component of f is the literal constant 0."""
        return all(isinstance(e, Num) and e.value == 0.0 for e in self.f)


_NUMERIC_KEYS = {"step", "tol_ode", "tol_fixedpoint", "tail_tol"}
_CONSTANT_KEYS = {"K", "alpha", "mu", "K0", "a", "eps", "L_f", "theta",
                  "M", "delta", "b", "c"}


def _as_matrix(raw, name, dim):
    if not isinstance(raw, list) or len(raw) != dim or any(
        not isinstance(r, list) or len(r) != dim for r in raw
    ):
        raise ConfigError(f"{name} must be a {dim}x{dim} array (dimension mismatch)")
    return raw


def load_system(config_text: str) -> SystemDefinition:
    """Build a validated :class:`SystemDefinition` from JSON text."""
    try:
        cfg = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    for key in ("dim", "A", "f", "P0", "horizon"):
        if key not in cfg:
            raise ConfigError(f"missing field {key!r}")
    dim = cfg["dim"]
    if not isinstance(dim, int) or isinstance(dim, bool) or dim < 1:
        raise ConfigError("dim must be a positive integer")
    A_src = _as_matrix(cfg["A"], "A", dim)
    if not isinstance(cfg["f"], list) or len(cfg["f"]) != dim:
        raise ConfigError(f"f must have {dim} entries (dimension mismatch)")
    P0 = np.asarray(_as_matrix(cfg["P0"], "P0", dim), dtype=float)
    horizon = float(cfg["horizon"])
    if not horizon > 0:
        raise ConfigError("horizon must be positive")

    A = []
    for row in A_src:
        parsed = []
        for src in row:
            node = parse_expression(str(src), dim)
            if free_variables(node) - {"t"}:
                raise ConfigError(f"A entry {src!r} depends on the state")
            parsed.append(node)
        A.append(tuple(parsed))
    f = tuple(parse_expression(str(src), dim) for src in cfg["f"])

    if np.linalg.norm(P0 @ P0 - P0) > PROJECTOR_TOL:
        raise ConfigError("P0 is not a projector (P0 @ P0 != P0)")

    constants = dict(cfg.get("constants") or {})
    unknown = set(constants) - _CONSTANT_KEYS
    if unknown:
        raise ConfigError(f"unknown constants: {sorted(unknown)}")
    numerics = dict(cfg.get("numerics") or {})
    unknown = set(numerics) - _NUMERIC_KEYS
    if unknown:
        raise ConfigError(f"unknown numerics: {sorted(unknown)}")
    return SystemDefinition(dim, tuple(A), f, P0, horizon,
                            {k: float(v) for k, v in constants.items()},
                            {k: float(v) for k, v in numerics.items()})


def load_system_file(path) -> SystemDefinition:
    with open(path, encoding="utf-8") as fh:
        return load_system(fh.read())
