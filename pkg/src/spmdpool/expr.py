"""The workload expression language: ``y = f(x)``.

Grammar (loosest binding first)::

    statement := [ident '='] expr
    expr      := term (('+' | '-') term)*          left-assoc
    term      := unary (('*' | '/') unary)*        left-assoc
    unary     := '-' unary | power
    power     := atom ('^' ['-'] atom)*            LEFT-assoc
    atom      := number | ident '(' expr ')' | ident | '(' expr ')'

``^`` is left-associative and binds tighter than unary minus, the way the
MATLAB-style workload strings were written: ``2^3^2 == 64``, ``-x^2 == -(x^2)``
and ``x^-1.2345`` is legal. Evaluation is element-wise binary64 with
correctly rounded elementary functions (see :mod:`spmdpool._crmath`).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Union

import numpy as np

from spmdpool import _crmath

__all__ = [
    "BinOp",
    "Binary",
    "Call",
    "ComputeSpec",
    "ExprError",
    "ExprNode",
    "ExprSyntaxError",
    "Func",
    "Neg",
    "Number",
    "UnknownFunction",
    "UnknownVariable",
    "Variable",
    "WORKLOAD",
    "evaluate_range",
    "evaluate_scalar",
    "free_variables",
    "parse",
]

#: The floating-point workload used throughout the benchmark experiments.
WORKLOAD = "y = 5432.060708*cos((sin(x^9.876))^-1.2345)"


class ExprError(ValueError):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    """Malformed expression text.

    ``offset`` is the UTF-8 byte offset of the offending token and
    ``expected`` a short description of what the parser wanted there.
    """

    def __init__(self, offset: int, expected: str, found: str) -> None:
        self.offset = offset
        self.expected = expected
        self.found = found
        super().__init__(f"at byte {offset}: expected {expected}, found {found}")


class UnknownFunction(ExprError):
    def __init__(self, name: str, offset: int) -> None:
        self.name = name
        self.offset = offset
        super().__init__(f"unknown function {name!r} at byte {offset}")


class UnknownVariable(ExprError):
    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"unknown variable {name}")


class BinOp(str, Enum):
    ADD = "+"
    SUB = "-"
    MUL = "*"
    DIV = "/"
    POW = "^"


class Func(str, Enum):
    SIN = "sin"
    COS = "cos"
    TAN = "tan"
    EXP = "exp"
    LOG = "log"
    SQRT = "sqrt"
    ABS = "abs"


@dataclass(frozen=True)
class Number:
    value: float


@dataclass(frozen=True)
class Variable:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: ExprNode


@dataclass(frozen=True)
class Binary:
    op: BinOp
    left: ExprNode
    right: ExprNode


@dataclass(frozen=True)
class Call:
    func: Func
    arg: ExprNode


ExprNode = Union[Number, Variable, Neg, Binary, Call]


@dataclass(frozen=True)
class ComputeSpec:
    target: str
    body: ExprNode


# ---------------------------------------------------------------------------
# lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t]+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z][A-Za-z0-9_]*)
  | (?P<op>[-+*/^()=])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str  # "num" | "ident" | "op" | "eof"
    text: str
    offset: int  # byte offset


def _tokenize(source: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    byte = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise ExprSyntaxError(byte, "a number, name, operator or parenthesis", repr(source[pos]))
        kind = m.lastgroup
        text = m.group()
        if kind != "ws":
            tokens.append(_Token(kind, text, byte))
        pos = m.end()
        byte += len(text.encode("utf-8"))
    tokens.append(_Token("eof", "", byte))
    return tokens


# ---------------------------------------------------------------------------
# parser


class _Parser:
    def __init__(self, source: str) -> None:
        self.tokens = _tokenize(source)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def peek(self, k: int = 1) -> _Token:
        return self.tokens[min(self.i + k, len(self.tokens) - 1)]

    def advance(self) -> _Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def at(self, text: str) -> bool:
        return self.tok.kind == "op" and self.tok.text == text

    def fail(self, expected: str):
        t = self.tok
        found = "end of input" if t.kind == "eof" else repr(t.text)
        raise ExprSyntaxError(t.offset, expected, found)

    def expect(self, text: str) -> _Token:
        if not self.at(text):
            self.fail(repr(text))
        return self.advance()

    def statement(self) -> ComputeSpec:
        target = "y"
        if self.tok.kind == "ident" and self.peek().kind == "op" and self.peek().text == "=":
            target = self.advance().text
            self.advance()
        body = self.expr()
        if self.tok.kind != "eof":
            self.fail("an operator or end of input")
        return ComputeSpec(target, body)

    def expr(self) -> ExprNode:
        node = self.term()
        while self.at("+") or self.at("-"):
            op = BinOp(self.advance().text)
            node = Binary(op, node, self.term())
        return node

    def term(self) -> ExprNode:
        node = self.unary()
        while self.at("*") or self.at("/"):
            op = BinOp(self.advance().text)
            node = Binary(op, node, self.unary())
        return node

    def unary(self) -> ExprNode:
        if self.at("-"):
            self.advance()
            return Neg(self.unary())
        return self.power()

    def power(self) -> ExprNode:
        node = self.atom()
        while self.at("^"):
            self.advance()
            if self.at("-"):
                self.advance()
                exponent: ExprNode = Neg(self.atom())
            else:
                exponent = self.atom()
            node = Binary(BinOp.POW, node, exponent)
        return node

    def atom(self) -> ExprNode:
        t = self.tok
        if t.kind == "num":
            self.advance()
            value = float(t.text)
            if not math.isfinite(value):
                raise ExprSyntaxError(t.offset, "a finite number literal", repr(t.text))
            return Number(value)
        if t.kind == "ident":
            self.advance()
            if self.at("("):
                try:
                    func = Func(t.text)
                except ValueError:
                    raise UnknownFunction(t.text, t.offset) from None
                self.advance()
                arg = self.expr()
                self.expect(")")
                return Call(func, arg)
            return Variable(t.text)
        if self.at("("):
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        self.fail("a number, variable, function call or '('")


def parse(source: str) -> ComputeSpec:
    """Parse ``[ident =] expr``; the target defaults to ``y``.

    Raises :class:`ExprSyntaxError` or :class:`UnknownFunction`. Variables
    other than ``x`` are accepted here and rejected at evaluation time.
    """
    return _Parser(source).statement()


# ---------------------------------------------------------------------------
# evaluation


def free_variables(node: ExprNode) -> set[str]:
    if isinstance(node, Variable):
        return {node.name}
    if isinstance(node, Number):
        return set()
    if isinstance(node, Neg):
        return free_variables(node.operand)
    if isinstance(node, Call):
        return free_variables(node.arg)
    return free_variables(node.left) | free_variables(node.right)


_FUNCS = {
    Func.SIN: _crmath.sin,
    Func.COS: _crmath.cos,
    Func.TAN: _crmath.tan,
    Func.EXP: _crmath.exp,
    Func.LOG: _crmath.log,
    Func.SQRT: np.sqrt,
    Func.ABS: np.abs,
}

_BINOPS = {
    BinOp.ADD: np.add,
    BinOp.SUB: np.subtract,
    BinOp.MUL: np.multiply,
    BinOp.DIV: np.divide,
    BinOp.POW: _crmath.power,
}

# Elements per evaluation block; bounds the extended-precision temporaries.
CHUNK = 1 << 18


def _eval(node: ExprNode, x: np.ndarray) -> np.ndarray:
    if isinstance(node, Number):
        return np.full(x.shape, node.value)
    if isinstance(node, Variable):
        return x
    if isinstance(node, Neg):
        return np.negative(_eval(node.operand, x))
    if isinstance(node, Call):
        return _FUNCS[node.func](_eval(node.arg, x))
    return _BINOPS[node.op](_eval(node.left, x), _eval(node.right, x))


def _check_variables(spec: ComputeSpec) -> None:
    unknown = sorted(free_variables(spec.body) - {"x"})
    if unknown:
        raise UnknownVariable(unknown[0])


def evaluate_range(spec: ComputeSpec, xs: Iterable[float] | np.ndarray) -> np.ndarray:
    """Evaluate ``spec`` element-wise over ``xs``; returns a float64 array."""
    _check_variables(spec)
    xs = np.ascontiguousarray(xs, dtype=np.float64).reshape(-1)
    out = np.empty_like(xs)
    with np.errstate(all="ignore"):
        for start in range(0, xs.size, CHUNK):
            block = xs[start : start + CHUNK]
            out[start : start + block.size] = _eval(spec.body, block)
    return out


def evaluate_scalar(spec: ComputeSpec, x: float) -> float:
    return float(evaluate_range(spec, [x])[0])
