"""Arithmetic mini-language for defining scalar fields on grid nodes.

Grammar (no implicit multiplication, ``^`` binds right):

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := unary ('^' factor)?
    unary  := '-'? atom
    atom   := number | ident | ident '(' expr ')' | '(' expr ')'

Identifiers are the coordinate names ``x1`` .. ``x6``, the sphere angles
``eta``, ``theta``, ``phi``, the constant ``pi``, and the unary functions
``sin``, ``cos``, ``exp``, ``log``, ``sqrt``, ``abs``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt", "abs")
COORD_NAMES = ("x1", "x2", "x3", "x4", "x5", "x6", "eta", "theta", "phi")
CONSTANTS = {"pi": math.pi}


class ExprSyntaxError(ValueError):
    """Malformed source text; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ExprDomainError(ValueError):
    """Evaluation left the real domain; carries the first offending node."""

    def __init__(self, message: str, node_index: int):
        super().__init__(f"{message} (node index {node_index})")
        self.node_index = node_index


class ExprNameError(ValueError):
    """Unknown identifier or coordinate not present on the target grid."""

    def __init__(self, message: str, offset: int = -1):
        if offset >= 0:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / ^
    left: "Node"
    right: "Node"


Node = Num | Var | Neg | Call | BinOp


@dataclass(frozen=True)
class FieldExpr:
    """Parsed expression plus its canonical source form."""

    root: Node
    source: str

    def __str__(self) -> str:
        return self.source

    @property
    def free_names(self) -> frozenset[str]:
        return _free_names(self.root)


def _free_names(node: Node) -> frozenset[str]:
    if isinstance(node, Num):
        return frozenset()
    if isinstance(node, Var):
        return frozenset() if node.name in CONSTANTS else frozenset({node.name})
    if isinstance(node, Neg):
        return _free_names(node.arg)
    if isinstance(node, Call):
        return _free_names(node.arg)
    return _free_names(node.left) | _free_names(node.right)


_TOKEN_CHARS = set("+-*/^()")


def _tokenize(src: str) -> list[tuple[str, str, int]]:
    """Return (kind, text, offset) triples; kinds: num, ident, op."""
    toks = []
    i, n = 0, len(src)
    while i < n:
        c = src[i]
        if c.isspace():
            i += 1
            continue
        if c in _TOKEN_CHARS:
            toks.append(("op", c, i))
            i += 1
            continue
        if c.isdigit() or c == ".":
            j = i
            seen_dot = False
            while j < n and (src[j].isdigit() or (src[j] == "." and not seen_dot)):
                seen_dot = seen_dot or src[j] == "."
                j += 1
            # exponent part like 1e-3 / 2.5E+10
            if j < n and src[j] in "eE":
                k = j + 1
                if k < n and src[k] in "+-":
                    k += 1
                if k < n and src[k].isdigit():
                    while k < n and src[k].isdigit():
                        k += 1
                    j = k
            text = src[i:j]
            try:
                float(text)
            except ValueError:
                raise ExprSyntaxError(f"malformed number {text!r}", i) from None
            toks.append(("num", text, i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (src[j].isalnum() or src[j] == "_"):
                j += 1
            toks.append(("ident", src[i:j], i))
            i = j
            continue
        raise ExprSyntaxError(f"unexpected character {c!r}", i)
    toks.append(("end", "", n))
    return toks


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.toks = _tokenize(src)
        self.pos = 0

    def peek(self) -> tuple[str, str, int]:
        return self.toks[self.pos]

    def advance(self) -> tuple[str, str, int]:
        t = self.toks[self.pos]
        self.pos += 1
        return t

    def expect_op(self, ch: str) -> None:
        kind, text, off = self.peek()
        if kind != "op" or text != ch:
            raise ExprSyntaxError(f"expected {ch!r}", off)
        self.advance()

    def parse(self) -> Node:
        node = self.expr()
        kind, text, off = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"trailing input starting at {text!r}", off)
        return node

    def expr(self) -> Node:
        node = self.term()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "+-":
                self.advance()
                node = BinOp(text, node, self.term())
            else:
                return node

    def term(self) -> Node:
        node = self.factor()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "*/":
                self.advance()
                node = BinOp(text, node, self.factor())
            else:
                return node

    def factor(self) -> Node:
        node = self.unary()
        kind, text, _ = self.peek()
        if kind == "op" and text == "^":
            self.advance()
            # right-associative: recurse into factor
            return BinOp("^", node, self.factor())
        return node

    def unary(self) -> Node:
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.advance()
            return Neg(self.unary())
        return self.atom()

    def atom(self) -> Node:
        kind, text, off = self.advance()
        if kind == "num":
            return Num(float(text))
        if kind == "ident":
            if text in FUNCTIONS:
                self.expect_op("(")
                arg = self.expr()
                self.expect_op(")")
                return Call(text, arg)
            if text in CONSTANTS or text in COORD_NAMES:
                return Var(text)
            raise ExprNameError(f"unknown identifier {text!r}", off)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        what = repr(text) if text else "end of input"
        raise ExprSyntaxError(f"expected a value, found {what}", off)


def parse_expr(src: str) -> FieldExpr:
    """Parse source text into a FieldExpr; raises ExprSyntaxError/ExprNameError."""
    root = _Parser(src).parse()
    return FieldExpr(root, to_string(root))


# Precedence levels used for minimal-paren printing.
_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 3}


def to_string(node: Node) -> str:
    """Render a syntax tree back to canonical source (parse/print roundtrip)."""
    return _render(node, 0)


def _render(node: Node, parent_prec: int) -> str:
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}({_render(node.arg, 0)})"
    if isinstance(node, Neg):
        inner = _render(node.arg, 4)
        s = f"-{inner}"
        return f"({s})" if parent_prec >= 3 else s
    op = node.op
    prec = _PREC[op]
    if op == "^":
        # right-associative: left operand must bind tighter than ^
        left = _render(node.left, prec + 1)
        right = _render(node.right, prec)
    else:
        left = _render(node.left, prec)
        # '-' and '/' are left-associative: parenthesize same-prec right side
        right = _render(node.right, prec + 1)
    s = f"{left} {op} {right}"
    return f"({s})" if prec < parent_prec or (parent_prec == 3 and prec <= 3) else s


def evaluate(expr: FieldExpr | Node, env: dict[str, np.ndarray], nnodes: int) -> np.ndarray:
    """Evaluate over node arrays in env (name -> shape (nnodes,) array).

    Any non-finite result (division by zero, log/sqrt out of domain, overflow)
    raises ExprDomainError naming the first offending node.
    """
    node = expr.root if isinstance(expr, FieldExpr) else expr
    with np.errstate(all="ignore"):
        out = _eval(node, env, nnodes)
    out = np.asarray(out, dtype=float)
    if out.ndim == 0:
        out = np.full(nnodes, float(out))
    bad = ~np.isfinite(out)
    if bad.any():
        idx = int(np.argmax(bad))
        raise ExprDomainError("expression left the real domain", idx)
    return out


def _eval(node: Node, env: dict[str, np.ndarray], nnodes: int) -> np.ndarray:
    if isinstance(node, Num):
        return np.full(nnodes, node.value)
    if isinstance(node, Var):
        if node.name in CONSTANTS:
            return np.full(nnodes, CONSTANTS[node.name])
        if node.name not in env:
            raise ExprNameError(
                f"coordinate {node.name!r} is not available on this grid "
                f"(have {sorted(env)})"
            )
        return env[node.name]
    if isinstance(node, Neg):
        return -_eval(node.arg, env, nnodes)
    if isinstance(node, Call):
        a = _eval(node.arg, env, nnodes)
        if node.func == "sin":
            return np.sin(a)
        if node.func == "cos":
            return np.cos(a)
        if node.func == "exp":
            return np.exp(a)
        if node.func == "abs":
            return np.abs(a)
        if node.func == "log":
            out = np.full_like(a, np.nan)
            ok = a > 0
            np.log(a, where=ok, out=out)
            return out
        if node.func == "sqrt":
            out = np.full_like(a, np.nan)
            ok = a >= 0
            np.sqrt(a, where=ok, out=out)
            return out
        raise AssertionError(node.func)
    l = _eval(node.left, env, nnodes)
    r = _eval(node.right, env, nnodes)
    if node.op == "+":
        return l + r
    if node.op == "-":
        return l - r
    if node.op == "*":
        return l * r
    if node.op == "/":
        return np.divide(l, r)
    if node.op == "^":
        return np.power(l, r)
    raise AssertionError(node.op)
