"""Reward expression tree and program containers.

Nodes are frozen dataclasses so structural equality is plain ``==``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Union

UNARY_FUNCS = ("exp", "sqrt", "tanh", "abs", "square", "norm2")
BINARY_FUNCS = ("min", "max")
BINARY_OPS = ("+", "-", "*", "/")


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Signal:
    name: str


@dataclass(frozen=True)
class Index:
    name: str
    index: int


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class Call:
    """Unary function application (exp, sqrt, tanh, abs, square, norm2)."""

    func: str
    arg: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class MinMax:
    func: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Clamp:
    arg: "Expr"
    lo: "Expr"
    hi: "Expr"


Expr = Union[Num, Signal, Index, Neg, Call, BinOp, MinMax, Clamp]


def children(e: Expr) -> tuple[Expr, ...]:
    if isinstance(e, (Num, Signal, Index)):
        return ()
    if isinstance(e, Neg):
        return (e.operand,)
    if isinstance(e, Call):
        return (e.arg,)
    if isinstance(e, (BinOp, MinMax)):
        return (e.left, e.right)
    if isinstance(e, Clamp):
        return (e.arg, e.lo, e.hi)
    raise TypeError(f"not an expression node: {e!r}")


def walk(e: Expr) -> Iterator[Expr]:
    yield e
    for c in children(e):
        yield from walk(c)


def signal_refs(e: Expr) -> list[str]:
    """Signal names referenced by ``e`` in first-occurrence order."""
    seen: dict[str, None] = {}
    for node in walk(e):
        if isinstance(node, (Signal, Index)):
            seen.setdefault(node.name, None)
    return list(seen)


def is_constant(e: Expr) -> bool:
    return not signal_refs(e)


def depth(e: Expr) -> int:
    kids = children(e)
    return 1 + (max(depth(c) for c in kids) if kids else 0)


@dataclass(frozen=True)
class SignalSpec:
    name: str
    arity: int = 1
    unit: str = ""


@dataclass(frozen=True)
class ObservationSchema:
    name: str
    signals: tuple[SignalSpec, ...]

    def __post_init__(self) -> None:
        names = [s.name for s in self.signals]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError(f"duplicate signal names in schema {self.name!r}: {dupes}")
        for s in self.signals:
            if s.arity < 1:
                raise ValueError(f"signal {s.name!r} has arity {s.arity}; must be >= 1")

    def arity(self, name: str) -> int:
        for s in self.signals:
            if s.name == name:
                return s.arity
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.signals]

    def __contains__(self, name: object) -> bool:
        return any(s.name == name for s in self.signals)

    @property
    def width(self) -> int:
        return sum(s.arity for s in self.signals)


@dataclass(frozen=True)
class RewardTerm:
    name: str
    scale: float
    expr: Expr

    def __post_init__(self) -> None:
        if not math.isfinite(self.scale):
            raise ValueError(f"term {self.name!r}: scale must be finite, got {self.scale}")


@dataclass(frozen=True)
class RewardProgram:
    terms: tuple[RewardTerm, ...]
    schema_name: str = "walker"

    def __post_init__(self) -> None:
        names = [t.name for t in self.terms]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError(f"duplicate term names: {dupes}")

    @property
    def term_names(self) -> list[str]:
        return [t.name for t in self.terms]

    def term(self, name: str) -> RewardTerm:
        for t in self.terms:
            if t.name == name:
                return t
        raise KeyError(name)

    def signals(self) -> list[str]:
        seen: dict[str, None] = {}
        for t in self.terms:
            for s in signal_refs(t.expr):
                seen.setdefault(s, None)
        return list(seen)

    def with_scale(self, name: str, scale: float) -> "RewardProgram":
        terms = tuple(
            RewardTerm(t.name, scale, t.expr) if t.name == name else t for t in self.terms
        )
        return RewardProgram(terms, self.schema_name)


@dataclass
class ValidationReport:
    unresolved: list[tuple[str, str]] = field(default_factory=list)  # (term, signal)
    arity_errors: list[tuple[str, str]] = field(default_factory=list)  # (term, message)

    @property
    def ok(self) -> bool:
        return not self.unresolved and not self.arity_errors

    def __bool__(self) -> bool:
        # truthy when there is something to report
        return not self.ok

    def messages(self) -> list[str]:
        out = [f"term {t!r}: unknown signal {s!r}" for t, s in self.unresolved]
        out += [f"term {t!r}: {m}" for t, m in self.arity_errors]
        return out

    def __str__(self) -> str:
        return "\n".join(self.messages()) if self.messages() else "ok"
