"""Affine signal remapping between isomorphic observation schemas.

An entry ``(source, target, gain, offset)`` states that the training
signal ``source`` is observed in the deployment schema as ``target`` with
``source = gain * target + offset``. Rewriting a program replaces every
reference to ``source`` accordingly, so the same reward can be scored on
deployment frames.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .ast import (
    BinOp,
    Call,
    Clamp,
    Expr,
    Index,
    MinMax,
    Neg,
    Num,
    ObservationSchema,
    RewardProgram,
    RewardTerm,
    Signal,
    signal_refs,
)


class MappingError(Exception):
    pass


@dataclass(frozen=True)
class MapEntry:
    source: str
    target: str
    gain: float = 1.0
    offset: float = 0.0


@dataclass(frozen=True)
class HomomorphismMap:
    entries: tuple[MapEntry, ...]

    def __post_init__(self) -> None:
        sources = [e.source for e in self.entries]
        dupes = sorted({s for s in sources if sources.count(s) > 1})
        if dupes:
            raise MappingError(f"duplicate source signals: {dupes}")

    @classmethod
    def identity(cls, schema: ObservationSchema) -> "HomomorphismMap":
        return cls(tuple(MapEntry(n, n) for n in schema.names))

    @classmethod
    def from_dict(cls, d: Mapping[str, object]) -> "HomomorphismMap":
        """``{source: target}`` or ``{source: {target, gain, offset}}``."""
        entries = []
        for src, spec in d.items():
            if isinstance(spec, str):
                entries.append(MapEntry(src, spec))
            else:
                spec = dict(spec)  # type: ignore[arg-type]
                entries.append(
                    MapEntry(src, spec["target"], float(spec.get("gain", 1.0)), float(spec.get("offset", 0.0)))
                )
        return cls(tuple(entries))

    def to_dict(self) -> dict[str, dict[str, object]]:
        return {e.source: {"target": e.target, "gain": e.gain, "offset": e.offset} for e in self.entries}

    def get(self, source: str) -> MapEntry | None:
        for e in self.entries:
            if e.source == source:
                return e
        return None

    def compose(self, then: "HomomorphismMap") -> "HomomorphismMap":
        """Map A->C from self (A->B) followed by ``then`` (B->C).

        With ``a = g1*b + o1`` and ``b = g2*c + o2``: ``a = g1*g2*c + (g1*o2 + o1)``.
        Entries whose intermediate signal ``then`` does not cover are dropped.
        """
        out = []
        for e in self.entries:
            nxt = then.get(e.target)
            if nxt is None:
                continue
            out.append(MapEntry(e.source, nxt.target, e.gain * nxt.gain, e.gain * nxt.offset + e.offset))
        return HomomorphismMap(tuple(out))

    def pull_back(self, values: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Express deployment-schema signal values in source (training) names."""
        return {e.source: e.gain * values[e.target] + e.offset for e in self.entries}

    def check_bijection(self, source: ObservationSchema, target: ObservationSchema) -> list[str]:
        problems = []
        mapped = {e.source for e in self.entries}
        for name in source.names:
            if name not in mapped:
                problems.append(f"training signal {name!r} is not mapped")
        targets = [e.target for e in self.entries]
        for name in target.names:
            if targets.count(name) != 1:
                problems.append(f"deployment signal {name!r} is hit {targets.count(name)} times")
        for e in self.entries:
            if e.source not in source:
                problems.append(f"source {e.source!r} not in training schema")
            if e.target not in target:
                problems.append(f"target {e.target!r} not in deployment schema")
            elif e.source in source and source.arity(e.source) != target.arity(e.target):
                problems.append(f"arity differs for {e.source!r} -> {e.target!r}")
        return problems


@dataclass
class MismatchReport:
    unmapped_signals: list[str] = field(default_factory=list)
    dropped_terms: list[str] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.unmapped_signals and not self.dropped_terms


def _substitute(e: Expr, f: HomomorphismMap) -> Expr:
    if isinstance(e, Num):
        return e
    if isinstance(e, Signal):
        m = f.get(e.name)
        assert m is not None
        out: Expr = Signal(m.target)
        if m.gain != 1.0:
            out = BinOp("*", Num(m.gain), out)
        if m.offset != 0.0:
            out = BinOp("+", out, Num(m.offset))
        return out
    if isinstance(e, Index):
        m = f.get(e.name)
        assert m is not None
        out = Index(m.target, e.index)
        if m.gain != 1.0:
            out = BinOp("*", Num(m.gain), out)
        if m.offset != 0.0:
            out = BinOp("+", out, Num(m.offset))
        return out
    if isinstance(e, Neg):
        return Neg(_substitute(e.operand, f))
    if isinstance(e, Call):
        return Call(e.func, _substitute(e.arg, f))
    if isinstance(e, BinOp):
        return BinOp(e.op, _substitute(e.left, f), _substitute(e.right, f))
    if isinstance(e, MinMax):
        return MinMax(e.func, _substitute(e.left, f), _substitute(e.right, f))
    if isinstance(e, Clamp):
        return Clamp(_substitute(e.arg, f), _substitute(e.lo, f), _substitute(e.hi, f))
    raise TypeError(f"not an expression node: {e!r}")


def apply_homomorphism(
    p: RewardProgram,
    f: HomomorphismMap,
    target: ObservationSchema,
    source: ObservationSchema | None = None,
) -> tuple[RewardProgram, MismatchReport]:
    """Rewrite ``p`` onto ``target``; terms touching unmapped signals are dropped."""
    for e in f.entries:
        if e.target not in target:
            raise MappingError(f"entry {e.source!r} -> {e.target!r}: target signal not in schema {target.name!r}")
        if source is not None and e.source in source and source.arity(e.source) != target.arity(e.target):
            raise MappingError(
                f"entry {e.source!r} -> {e.target!r}: arity {source.arity(e.source)} "
                f"vs {target.arity(e.target)}"
            )
    report = MismatchReport()
    kept: list[RewardTerm] = []
    for t in p.terms:
        missing = [s for s in signal_refs(t.expr) if f.get(s) is None]
        if missing:
            for s in missing:
                if s not in report.unmapped_signals:
                    report.unmapped_signals.append(s)
            report.dropped_terms.append(t.name)
            continue
        kept.append(RewardTerm(t.name, t.scale, _substitute(t.expr, f)))
    return RewardProgram(tuple(kept), target.name), report
