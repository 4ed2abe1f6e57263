"""A small arithmetic language for coefficients and drivers.

Grammar, loosest binding first::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := ('-' | '+') unary | power
    power   := primary ('^' unary)?          # right-associative
    primary := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Evaluation is vectorized over numpy arrays.
"""

from __future__ import annotations

import difflib
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError

FUNCTIONS = {
    "exp": (1, 1),
    "log": (1, 1),
    "sin": (1, 1),
    "cos": (1, 1),
    "abs": (1, 1),
    "max": (2, None),
    "min": (2, None),
}

PREC_ADD, PREC_MUL, PREC_UNARY, PREC_POW, PREC_ATOM = 1, 2, 3, 4, 5


class ExpressionError(ConfigurationError):
    """Syntax or name error, located by line and column (both 1-based)."""

    def __init__(self, message, src="", pos=0):
        line = src.count("\n", 0, pos) + 1
        col = pos - (src.rfind("\n", 0, pos) + 1) + 1
        self.line, self.column, self.pos = line, col, pos
        super().__init__(f"line {line}, column {col}: {message}")


class EvaluationError(DomainError):
    """An expression left its domain (division by zero, log of a non-positive number, ...)."""


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Num:
    value: float

    prec = PREC_ATOM


@dataclass(frozen=True)
class Var:
    name: str

    prec = PREC_ATOM


@dataclass(frozen=True)
class Unary:
    op: str
    operand: object

    prec = PREC_UNARY


@dataclass(frozen=True)
class Binary:
    op: str
    left: object
    right: object

    @property
    def prec(self):
        return {"+": PREC_ADD, "-": PREC_ADD, "*": PREC_MUL, "/": PREC_MUL, "^": PREC_POW}[self.op]


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple

    prec = PREC_ATOM


# ---------------------------------------------------------------------------
# tokenizer and parser

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


def _tokenize(src: str):
    tokens = []
    pos = 0
    while pos < len(src):
        if src[pos:].strip() == "":
            break
        m = _TOKEN.match(src, pos)
        if m is None or m.end() == pos:
            bad = pos + len(src[pos:]) - len(src[pos:].lstrip())
            raise ExpressionError(f"unexpected character {src[bad]!r}", src, bad)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(src)))
    return tokens


class _Parser:
    def __init__(self, src: str, variables):
        self.src = src
        self.variables = tuple(variables)
        self.tokens = _tokenize(src)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text):
        kind, val, pos = self.take()
        if val != text or kind != "op":
            found = "end of input" if kind == "end" else repr(val)
            raise ExpressionError(f"expected {text!r}, found {found}", self.src, pos)

    def fail(self, tok, what="unexpected"):
        kind, val, pos = tok
        found = "end of input" if kind == "end" else repr(val)
        raise ExpressionError(f"{what} {found}", self.src, pos)

    def parse(self):
        if not self.src.strip():
            raise ExpressionError("empty expression", self.src, 0)
        node = self.expr()
        if self.peek()[0] != "end":
            self.fail(self.peek())
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[0] == "op" and self.peek()[1] in ("-", "+"):
            op = self.take()[1]
            return Unary(op, self.unary())
        return self.power()

    def power(self):
        base = self.primary()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return Binary("^", base, self.unary())
        return base

    def primary(self):
        tok = self.take()
        kind, val, pos = tok
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                return self.call(val, pos)
            if val in FUNCTIONS:
                raise ExpressionError(f"function {val!r} needs arguments, e.g. {val}(x)", self.src, pos)
            if val not in self.variables:
                raise ExpressionError(self._unknown(val, self.variables), self.src, pos)
            return Var(val)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        self.fail(tok)

    def call(self, name, pos):
        if name not in FUNCTIONS:
            raise ExpressionError(self._unknown(name, tuple(FUNCTIONS), "function"), self.src, pos)
        self.expect("(")
        args = [self.expr()]
        while self.peek()[1] == "," and self.peek()[0] == "op":
            self.take()
            args.append(self.expr())
        self.expect(")")
        lo, hi = FUNCTIONS[name]
        if len(args) < lo or (hi is not None and len(args) > hi):
            want = str(lo) if hi == lo else f"at least {lo}"
            raise ExpressionError(f"{name} takes {want} argument(s), got {len(args)}", self.src, pos)
        return Call(name, tuple(args))

    @staticmethod
    def _unknown(name, choices, what="identifier"):
        msg = f"unknown {what} {name!r}"
        close = difflib.get_close_matches(name, list(choices) + (list(FUNCTIONS) if what != "function" else []), n=1)
        if close:
            msg += f"; did you mean {close[0]!r}?"
        elif choices:
            msg += f" (declared: {', '.join(choices)})"
        return msg


def parse_expression(src: str, variables=()) -> "Expression":
    """Parse ``src`` over the declared ``variables``."""
    if not isinstance(src, str):
        raise ExpressionError(f"expression must be a string, got {type(src).__name__}")
    return Expression(_Parser(src, variables).parse(), tuple(variables), src)


# ---------------------------------------------------------------------------
# printing


def _fmt_num(v: float) -> str:
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def to_source(node) -> str:
    """Canonical text with the fewest parentheses that reparse to the same tree."""
    if isinstance(node, Num):
        s = _fmt_num(node.value)
        return f"({s})" if node.value < 0 else s
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.name}({', '.join(to_source(a) for a in node.args)})"
    if isinstance(node, Unary):
        return node.op + _wrap(node.operand, PREC_UNARY)
    if isinstance(node, Binary):
        if node.op == "^":
            return f"{_wrap(node.left, PREC_ATOM)}^{_wrap(node.right, PREC_UNARY)}"
        p = node.prec
        # left-associative: an equal-precedence right child needs parentheses
        return f"{_wrap(node.left, p)} {node.op} {_wrap(node.right, p + 1)}"
    raise TypeError(f"not an expression node: {node!r}")


def _wrap(node, min_prec):
    s = to_source(node)
    return s if node.prec >= min_prec else f"({s})"


# ---------------------------------------------------------------------------
# evaluation


def _check(out, node, what):
    if np.any(~np.isfinite(out)):
        raise EvaluationError(f"{what} in {to_source(node)!r} produced a non-finite value")
    return out


def _eval(node, env):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, Unary):
        v = _eval(node.operand, env)
        return -v if node.op == "-" else v
    if isinstance(node, Binary):
        a = _eval(node.left, env)
        b = _eval(node.right, env)
        with np.errstate(all="ignore"):
            if node.op == "+":
                return a + b
            if node.op == "-":
                return a - b
            if node.op == "*":
                return a * b
            if node.op == "/":
                if np.any(np.asarray(b) == 0):
                    raise EvaluationError(f"division by zero in {to_source(node)!r}")
                return np.true_divide(a, b)
            out = np.power(np.asarray(a, dtype=float), b)
            return _check(out, node, "power")
    if isinstance(node, Call):
        args = [_eval(a, env) for a in node.args]
        with np.errstate(all="ignore"):
            if node.name == "log":
                if np.any(np.asarray(args[0]) <= 0):
                    raise EvaluationError(f"log of a non-positive number in {to_source(node)!r}")
                return np.log(args[0])
            if node.name == "exp":
                return _check(np.exp(args[0]), node, "exp")
            if node.name == "sin":
                return np.sin(args[0])
            if node.name == "cos":
                return np.cos(args[0])
            if node.name == "abs":
                return np.abs(args[0])
            fold = np.maximum if node.name == "max" else np.minimum
            out = args[0]
            for a in args[1:]:
                out = fold(out, a)
            return out
    raise TypeError(f"not an expression node: {node!r}")


def free_variables(node) -> frozenset:
    if isinstance(node, Var):
        return frozenset({node.name})
    if isinstance(node, Unary):
        return free_variables(node.operand)
    if isinstance(node, Binary):
        return free_variables(node.left) | free_variables(node.right)
    if isinstance(node, Call):
        return frozenset().union(*(free_variables(a) for a in node.args))
    return frozenset()


def fold_constants(node):
    """Replace every variable-free subtree by its value (errors propagate)."""
    if isinstance(node, (Num, Var)):
        return node
    if not free_variables(node):
        return Num(float(_eval(node, {})))
    if isinstance(node, Unary):
        return Unary(node.op, fold_constants(node.operand))
    if isinstance(node, Binary):
        return Binary(node.op, fold_constants(node.left), fold_constants(node.right))
    return Call(node.name, tuple(fold_constants(a) for a in node.args))


class Expression:
    """Parsed expression bound to its declared variable names."""

    def __init__(self, ast, variables, source=None):
        self.ast = ast
        self.variables = tuple(variables)
        self.source = source if source is not None else to_source(ast)

    @property
    def free_variables(self) -> frozenset:
        return free_variables(self.ast)

    @property
    def is_constant(self) -> bool:
        return not self.free_variables

    def canonical(self) -> str:
        return to_source(self.ast)

    def folded(self) -> "Expression":
        return Expression(fold_constants(self.ast), self.variables)

    def __call__(self, *args, **kwargs):
        env = dict(zip(self.variables, args))
        env.update(kwargs)
        missing = self.free_variables - env.keys()
        if missing:
            raise DomainError(f"missing values for {sorted(missing)}")
        env = {k: np.asarray(v, dtype=float) if not np.isscalar(v) else float(v) for k, v in env.items()}
        out = _eval(self.ast, env)
        shape = np.broadcast_shapes(*(np.shape(v) for v in env.values())) if env else ()
        return np.broadcast_to(np.asarray(out, dtype=float), shape) if shape else float(out)

    def __eq__(self, other):
        return isinstance(other, Expression) and self.ast == other.ast

    def __hash__(self):
        return hash(self.ast)

    def __str__(self):
        return self.canonical()

    def __repr__(self):
        return f"Expression({self.canonical()!r})"
