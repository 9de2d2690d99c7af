"""Sample K reward candidates, repairing unusable answers with diagnostic-bearing retries."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from ..dsl import ObservationSchema, RewardProgram, pretty_print
from .backends import Backend, BackendError
from .extract import extract_program
from .prompt import PromptBundle, retry_messages


class GenerationError(Exception):
    """The backend failed outright (not merely produced an unusable answer)."""


@dataclass
class CandidateSource:
    slot: int
    raw_text: str
    program: RewardProgram | None
    diagnostic: str | None
    attempt_index: int
    backend_id: str
    parsed: bool = False
    # every (raw_text, diagnostic) pair tried for this slot, oldest first
    attempts: list[tuple[str, str | None]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if (self.program is None) == (self.diagnostic is None):
            raise ValueError("a candidate has either a program or a diagnostic")

    @property
    def ok(self) -> bool:
        return self.program is not None

    def to_dict(self) -> dict:
        return {
            "slot": self.slot,
            "raw_text": self.raw_text,
            "program": None if self.program is None else pretty_print(self.program),
            "diagnostic": self.diagnostic,
            "attempt_index": self.attempt_index,
            "backend_id": self.backend_id,
            "parsed": self.parsed,
            "attempts": [{"raw_text": r, "diagnostic": d} for r, d in self.attempts],
        }


@dataclass
class GenerationStats:
    requested: int = 0
    parsed_ok: int = 0
    validated_ok: int = 0
    retries_used: int = 0
    first_attempt_ok: int = 0
    first_attempt_failed: int = 0
    repaired: int = 0

    def check(self) -> None:
        if not (self.validated_ok <= self.parsed_ok <= self.requested):
            raise AssertionError(f"inconsistent generation stats: {self}")

    @property
    def first_attempt_rate(self) -> float:
        return self.first_attempt_ok / self.requested if self.requested else 0.0

    @property
    def final_rate(self) -> float:
        return self.validated_ok / self.requested if self.requested else 0.0

    @property
    def repair_rate(self) -> float:
        return self.repaired / self.first_attempt_failed if self.first_attempt_failed else 1.0

    def merge(self, other: "GenerationStats") -> "GenerationStats":
        return GenerationStats(**{k: getattr(self, k) + getattr(other, k) for k in self.__dataclass_fields__})


def _generate_slot(
    backend: Backend,
    bundle: PromptBundle,
    slot: int,
    schema: ObservationSchema,
    max_retries: int,
    temperature: float,
    key_prefix: tuple[int, ...],
) -> CandidateSource:
    messages = bundle.messages()
    attempts: list[tuple[str, str | None]] = []
    for attempt in range(max_retries + 1):
        temp = temperature if attempt == 0 else 0.0
        try:
            raw = backend.complete(messages, temp, key_prefix + (slot, attempt))
        except BackendError as exc:
            raise GenerationError(f"slot {slot}, attempt {attempt}: {exc}") from exc
        ex = extract_program(raw, schema)
        attempts.append((raw, ex.diagnostic))
        if ex.ok or attempt == max_retries:
            return CandidateSource(
                slot, raw, ex.program, ex.diagnostic, attempt, backend.backend_id, ex.parsed, attempts
            )
        messages = retry_messages(bundle, raw, ex.diagnostic or "")
    raise AssertionError("unreachable")


def generate_candidates(
    backend: Backend,
    bundle: PromptBundle,
    k: int,
    schema: ObservationSchema,
    max_retries: int = 2,
    temperature: float = 1.0,
    key_prefix: tuple[int, ...] = (),
    workers: int = 1,
) -> tuple[list[CandidateSource], GenerationStats]:
    """Request ``k`` independent completions; slots are returned in order."""
    if k < 1:
        raise ValueError("k must be at least 1")
    args = (bundle, schema, max_retries, temperature, tuple(key_prefix))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_generate_slot, backend, bundle, s, *args[1:]) for s in range(k)]
            sources = [f.result() for f in futures]
    else:
        sources = [_generate_slot(backend, bundle, s, *args[1:]) for s in range(k)]

    stats = GenerationStats(requested=k)
    for src in sources:
        stats.parsed_ok += int(src.parsed)
        stats.validated_ok += int(src.ok)
        stats.retries_used += src.attempt_index
        if src.attempt_index == 0 and src.ok:
            stats.first_attempt_ok += 1
        else:
            stats.first_attempt_failed += 1
            stats.repaired += int(src.ok)
    stats.check()
    return sources, stats
