"""Line-oriented reward program syntax.

One term per line::

    name: [scale *] expr      # comment

The scale is the leading numeric literal of a top-level product; when
absent it defaults to 1.0. ``pretty_print`` always writes the scale, so
``parse_program(pretty_print(p)) == p`` for every well-formed program.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

from .ast import (
    BINARY_FUNCS,
    UNARY_FUNCS,
    BinOp,
    Call,
    Clamp,
    Expr,
    Index,
    MinMax,
    Neg,
    Num,
    RewardProgram,
    RewardTerm,
    Signal,
)


class DSLError(Exception):
    kind = "error"

    def __init__(self, message: str, line: int = 0, col: int = 0):
        self.message = message
        self.line = line
        self.col = col
        super().__init__(self.diagnostic())

    def diagnostic(self) -> str:
        return f"{self.kind} at line {self.line}, col {self.col}: {self.message}"


class LexError(DSLError):
    kind = "lex error"


class ParseError(DSLError):
    kind = "parse error"


class DuplicateTermError(DSLError):
    kind = "duplicate-term error"


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/(),:\[\]])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # num | ident | op | eol
    text: str
    line: int
    col: int


def tokenize_line(text: str, lineno: int) -> list[Token]:
    body = text.split("#", 1)[0]
    tokens: list[Token] = []
    pos = 0
    while pos < len(body):
        m = _TOKEN_RE.match(body, pos)
        if m is None:
            raise LexError(f"unexpected character {body[pos]!r}", lineno, pos + 1)
        if m.lastgroup != "ws":
            tokens.append(Token(m.lastgroup, m.group(), lineno, pos + 1))
        pos = m.end()
    tokens.append(Token("eol", "", lineno, len(body) + 1))
    return tokens


class _LineParser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def advance(self) -> Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def error(self, msg: str, tok: Token | None = None) -> ParseError:
        tok = tok or self.tok
        return ParseError(msg, tok.line, tok.col)

    def expect(self, text: str) -> Token:
        if self.tok.text != text or self.tok.kind not in ("op",):
            found = self.tok.text or "end of line"
            raise self.error(f"expected {text!r}, found {found!r}")
        return self.advance()

    def term(self) -> tuple[str, Expr, Token]:
        name_tok = self.tok
        if name_tok.kind != "ident":
            raise self.error("expected term name")
        self.advance()
        self.expect(":")
        if self.tok.kind == "eol":
            raise self.error("expected expression after ':'")
        expr = self.expr()
        if self.tok.kind != "eol":
            raise self.error(f"unexpected {self.tok.text!r}")
        return name_tok.text, expr, name_tok

    def expr(self) -> Expr:
        left = self.product()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.advance().text
            left = BinOp(op, left, self.product())
        return left

    def product(self) -> Expr:
        left = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.advance().text
            left = BinOp(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        if self.tok.kind == "op" and self.tok.text == "-":
            self.advance()
            if self.tok.kind == "num":
                # "-2.5" is a literal, "-(2.5)" is a negation
                return Num(-self.number(self.advance()))
            return Neg(self.unary())
        return self.primary()

    def number(self, tok: Token) -> float:
        value = float(tok.text)
        if not math.isfinite(value):
            raise ParseError(f"numeric literal {tok.text!r} overflows", tok.line, tok.col)
        return value

    def primary(self) -> Expr:
        tok = self.tok
        if tok.kind == "num":
            self.advance()
            return Num(self.number(tok))
        if tok.kind == "op" and tok.text == "(":
            self.advance()
            inner = self.expr()
            self.expect(")")
            return inner
        if tok.kind == "ident":
            self.advance()
            if self.tok.kind == "op" and self.tok.text == "(":
                return self.call(tok)
            if self.tok.kind == "op" and self.tok.text == "[":
                self.advance()
                idx = self.tok
                if idx.kind != "num" or not idx.text.isdigit():
                    raise self.error("index must be a non-negative integer literal")
                self.advance()
                self.expect("]")
                return Index(tok.text, int(idx.text))
            return Signal(tok.text)
        found = tok.text or "end of line"
        raise self.error(f"unexpected {found!r}")

    def call(self, name: Token) -> Expr:
        self.expect("(")
        args = [self.expr()]
        while self.tok.kind == "op" and self.tok.text == ",":
            self.advance()
            args.append(self.expr())
        self.expect(")")
        func = name.text
        want = 1 if func in UNARY_FUNCS else 2 if func in BINARY_FUNCS else 3 if func == "clamp" else None
        if want is None:
            raise ParseError(f"unknown function {func!r}", name.line, name.col)
        if len(args) != want:
            raise ParseError(
                f"{func}() takes {want} argument(s), got {len(args)}", name.line, name.col
            )
        if func in UNARY_FUNCS:
            return Call(func, args[0])
        if func in BINARY_FUNCS:
            return MinMax(func, args[0], args[1])
        return Clamp(args[0], args[1], args[2])


def split_scale(expr: Expr) -> tuple[float, Expr]:
    """Leading constant factor of a product chain, e.g. ``2 * a * b`` -> (2, a * b)."""
    if not (isinstance(expr, BinOp) and expr.op == "*"):
        return 1.0, expr
    if isinstance(expr.left, Num):
        return expr.left.value, expr.right
    scale, rest = split_scale(expr.left)
    if rest is expr.left:
        return 1.0, expr
    return scale, BinOp("*", rest, expr.right)


def parse_expr(text: str) -> Expr:
    p = _LineParser(tokenize_line(text, 1))
    e = p.expr()
    if p.tok.kind != "eol":
        raise p.error(f"unexpected {p.tok.text!r}")
    return e


def parse_program(source: str, schema_name: str = "walker") -> RewardProgram:
    """Parse reward program text; raises a ``DSLError`` subclass with line/column."""
    terms: list[RewardTerm] = []
    first_seen: dict[str, int] = {}
    for lineno, raw in enumerate(source.splitlines(), start=1):
        tokens = tokenize_line(raw, lineno)
        if tokens[0].kind == "eol":
            continue
        name, expr, name_tok = _LineParser(tokens).term()
        if name in first_seen:
            raise DuplicateTermError(
                f"term {name!r} already defined on line {first_seen[name]}",
                name_tok.line,
                name_tok.col,
            )
        first_seen[name] = lineno
        scale, body = split_scale(expr)
        terms.append(RewardTerm(name, scale, body))
    if not terms:
        raise ParseError("no terms", 1, 1)
    return RewardProgram(tuple(terms), schema_name)


# precedence levels for printing
_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _fmt_num(v: float) -> str:
    return repr(float(v))


def format_expr(e: Expr, parent_prec: int = 0, right_side: bool = False) -> str:
    if isinstance(e, Num):
        s = _fmt_num(e.value)
        return f"({s})" if s.startswith("-") else s
    if isinstance(e, Signal):
        return e.name
    if isinstance(e, Index):
        return f"{e.name}[{e.index}]"
    if isinstance(e, Neg):
        inner = e.operand
        if isinstance(inner, (Signal, Index, Call, MinMax, Clamp)):
            return "-" + format_expr(inner, 3)
        return f"-({format_expr(inner)})"
    if isinstance(e, Call):
        return f"{e.func}({format_expr(e.arg)})"
    if isinstance(e, MinMax):
        return f"{e.func}({format_expr(e.left)}, {format_expr(e.right)})"
    if isinstance(e, Clamp):
        return f"clamp({format_expr(e.arg)}, {format_expr(e.lo)}, {format_expr(e.hi)})"
    if isinstance(e, BinOp):
        prec = _PREC[e.op]
        text = f"{format_expr(e.left, prec)} {e.op} {format_expr(e.right, prec, True)}"
        if prec < parent_prec or (prec == parent_prec and right_side):
            return f"({text})"
        return text
    raise TypeError(f"not an expression node: {e!r}")


def format_term(t: RewardTerm) -> str:
    return f"{t.name}: {_fmt_num(t.scale)} * {format_expr(t.expr, 2, True)}"


def pretty_print(p: RewardProgram) -> str:
    return "".join(format_term(t) + "\n" for t in p.terms)
