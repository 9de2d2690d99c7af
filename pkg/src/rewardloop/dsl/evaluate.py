"""Static checking and vectorised evaluation of reward programs.

Signal values are arrays shaped ``(*batch, arity)``; every term evaluates
to an array shaped ``batch``. A single frame is simply ``batch == ()``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

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
    Signal,
    ValidationReport,
    is_constant,
)


class ArityError(Exception):
    pass


class RewardEvalError(Exception):
    """A term produced a non-finite value or divided by zero."""

    def __init__(self, term: str, message: str, step: int | None = None):
        self.term = term
        self.message = message
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"term {term!r}{where}: {message}")


def _arity(e: Expr, schema: ObservationSchema, unresolved: list[str]) -> int | None:
    """Static arity of ``e``; ``None`` when it cannot be determined."""
    if isinstance(e, Num):
        return 1
    if isinstance(e, Signal):
        if e.name not in schema:
            unresolved.append(e.name)
            return None
        return schema.arity(e.name)
    if isinstance(e, Index):
        if e.name not in schema:
            unresolved.append(e.name)
            return None
        n = schema.arity(e.name)
        if e.index >= n:
            raise ArityError(f"index {e.name}[{e.index}] out of range for arity {n}")
        return 1
    if isinstance(e, Neg):
        return _arity(e.operand, schema, unresolved)
    if isinstance(e, Call):
        a = _arity(e.arg, schema, unresolved)
        if e.func == "norm2":
            return None if a is None else 1
        return a
    if isinstance(e, (BinOp, MinMax)):
        label = e.op if isinstance(e, BinOp) else e.func
        return _combine(label, [e.left, e.right], schema, unresolved)
    if isinstance(e, Clamp):
        return _combine("clamp", [e.arg, e.lo, e.hi], schema, unresolved)
    raise TypeError(f"not an expression node: {e!r}")


def _combine(label: str, operands: list[Expr], schema, unresolved) -> int | None:
    arities = [_arity(o, schema, unresolved) for o in operands]
    if any(a is None for a in arities):
        return None
    # constant scalars broadcast; everything else must agree exactly
    wide = {a for o, a in zip(operands, arities) if not (a == 1 and is_constant(o))}
    if len(wide) > 1:
        raise ArityError(f"arity mismatch in {label}: operand arities {arities}")
    return wide.pop() if wide else 1


def expr_arity(e: Expr, schema: ObservationSchema) -> int:
    unresolved: list[str] = []
    a = _arity(e, schema, unresolved)
    if unresolved:
        raise KeyError(unresolved[0])
    assert a is not None
    return a


def validate_program(p: RewardProgram, schema: ObservationSchema) -> ValidationReport:
    """Collect every unresolved signal and arity violation; never raises."""
    report = ValidationReport()
    for t in p.terms:
        unresolved: list[str] = []
        try:
            a = _arity(t.expr, schema, unresolved)
        except ArityError as exc:
            report.arity_errors.append((t.name, str(exc)))
            a = None
        for name in dict.fromkeys(unresolved):
            report.unresolved.append((t.name, name))
        if a is not None and a != 1:
            report.arity_errors.append((t.name, f"term must be scalar, has arity {a}"))
    return report


Values = Mapping[str, np.ndarray]
_Fn = Callable[[Values], np.ndarray]


def _checked(term: str, what: str, fn: _Fn) -> _Fn:
    def run(v: Values) -> np.ndarray:
        out = fn(v)
        if not np.isfinite(out).all():
            raise RewardEvalError(term, f"non-finite result in {what}")
        return out

    return run


_UNARY = {
    "exp": np.exp,
    "sqrt": np.sqrt,
    "tanh": np.tanh,
    "abs": np.abs,
    "square": np.square,
}


def _compile(e: Expr, term: str) -> _Fn:
    if isinstance(e, Num):
        c = np.array([e.value], dtype=np.float64)
        return lambda v: c
    if isinstance(e, Signal):
        name = e.name
        return lambda v: v[name]
    if isinstance(e, Index):
        name, i = e.name, e.index
        return lambda v: v[name][..., i : i + 1]
    if isinstance(e, Neg):
        f = _compile(e.operand, term)
        return lambda v: -f(v)
    if isinstance(e, Call):
        f = _compile(e.arg, term)
        if e.func == "norm2":
            return lambda v: np.sum(np.square(f(v)), axis=-1, keepdims=True)
        if e.func == "sqrt":

            def sqrt(v: Values) -> np.ndarray:
                x = f(v)
                if (x < 0).any():
                    raise RewardEvalError(term, "sqrt of negative value")
                return np.sqrt(x)

            return sqrt
        op = _UNARY[e.func]
        if e.func == "exp":
            return _checked(term, "exp (overflow)", lambda v: op(f(v)))
        return lambda v: op(f(v))
    if isinstance(e, BinOp):
        lf, rf = _compile(e.left, term), _compile(e.right, term)
        # overflow in +, -, * surfaces in the term-level finiteness check
        if e.op == "+":
            return lambda v: lf(v) + rf(v)
        if e.op == "-":
            return lambda v: lf(v) - rf(v)
        if e.op == "*":
            return lambda v: lf(v) * rf(v)

        if is_constant(e.right):
            # a non-zero constant denominator needs no per-frame check
            try:
                with np.errstate(all="ignore"):
                    den_c = rf({})
            except RewardEvalError:
                den_c = np.zeros(1)
            if np.all(np.isfinite(den_c) & (den_c != 0)):
                return lambda v: lf(v) / den_c

        def div(v: Values) -> np.ndarray:
            den = rf(v)
            if (den == 0).any():
                raise RewardEvalError(term, "division by zero")
            out = lf(v) / den
            if not np.isfinite(out).all():
                raise RewardEvalError(term, "non-finite result in /")
            return out

        return div
    if isinstance(e, MinMax):
        lf, rf = _compile(e.left, term), _compile(e.right, term)
        op = np.minimum if e.func == "min" else np.maximum
        return lambda v: op(lf(v), rf(v))
    if isinstance(e, Clamp):
        af, lo, hi = _compile(e.arg, term), _compile(e.lo, term), _compile(e.hi, term)
        return lambda v: np.minimum(np.maximum(af(v), lo(v)), hi(v))
    raise TypeError(f"not an expression node: {e!r}")


@dataclass
class TermValues:
    values: dict[str, np.ndarray]
    total: np.ndarray

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]


class CompiledProgram:
    """Closure-compiled program; reuse across many frames of one schema."""

    def __init__(self, program: RewardProgram, schema: ObservationSchema):
        report = validate_program(program, schema)
        if not report.ok:
            raise ValueError(f"program does not validate against {schema.name!r}:\n{report}")
        self.program = program
        self.schema = schema
        self._fns = [(t.name, t.scale, _compile(t.expr, t.name)) for t in program.terms]

    def __call__(self, values: Values) -> TermValues:
        with np.errstate(all="ignore"):
            batch = np.shape(next(iter(values.values())))[:-1] if values else ()
            out: dict[str, np.ndarray] = {}
            total = np.zeros(batch)
            for name, scale, fn in self._fns:
                r = fn(values)
                if not np.isfinite(r).all():
                    raise RewardEvalError(name, "non-finite result")
                val = r[..., 0] if r.shape[:-1] == batch else np.broadcast_to(r, batch + (1,))[..., 0].copy()
                out[name] = val
                total = total + scale * val
            if not np.isfinite(total).all():
                raise RewardEvalError(self._fns[-1][0], "non-finite weighted total")
        return TermValues(out, total)


def eval_step(p: RewardProgram, frame) -> TermValues:
    """Evaluate ``p`` on one observation frame (or a batch of frames)."""
    return CompiledProgram(p, frame.schema)(frame.values)


@dataclass
class RewardSummary:
    steps: int
    term_sums: dict[str, float] = field(default_factory=dict)
    term_means: dict[str, float] = field(default_factory=dict)
    weighted_sums: dict[str, float] = field(default_factory=dict)
    total: float = 0.0


def accumulate(p: RewardProgram, traj) -> RewardSummary:
    """Per-term sums/means and weighted total over a trajectory's frames."""
    n = len(traj)
    if n == 0:
        zeros = {t.name: 0.0 for t in p.terms}
        return RewardSummary(0, dict(zeros), dict(zeros), dict(zeros), 0.0)
    prog = CompiledProgram(p, traj.schema)
    try:
        tv = prog(traj.signals)
    except RewardEvalError:
        # locate the first failing step
        for k in range(n):
            try:
                prog({name: arr[k] for name, arr in traj.signals.items()})
            except RewardEvalError as exc:
                raise RewardEvalError(exc.term, exc.message, step=k) from None
        raise
    sums = {name: float(np.sum(v)) for name, v in tv.values.items()}
    weighted = {t.name: t.scale * sums[t.name] for t in p.terms}
    return RewardSummary(
        steps=n,
        term_sums=sums,
        term_means={k: s / n for k, s in sums.items()},
        weighted_sums=weighted,
        total=float(np.sum(tv.total)),
    )
