"""Pull a reward program out of a free-form completion."""
from __future__ import annotations

import re
from dataclasses import dataclass

from ..dsl import DSLError, ObservationSchema, RewardProgram, parse_program, validate_program

_FENCE_RE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)
_TERM_LINE_RE = re.compile(r"^\s*[A-Za-z_][A-Za-z0-9_]*\s*:", re.MULTILINE)

NO_PROGRAM = "no program found"


@dataclass(frozen=True)
class Extraction:
    program: RewardProgram | None
    diagnostic: str | None
    parsed: bool  # True when the text parsed, whether or not it validated

    @property
    def ok(self) -> bool:
        return self.program is not None


def extract_program(raw_text: str, schema: ObservationSchema) -> Extraction:
    """Last fenced block (or the whole text), parsed and validated against ``schema``."""
    blocks = _FENCE_RE.findall(raw_text)
    if blocks:
        source = blocks[-1]
    elif _TERM_LINE_RE.search(raw_text):
        source = raw_text
    else:
        return Extraction(None, NO_PROGRAM, False)
    if not source.strip():
        return Extraction(None, NO_PROGRAM, False)
    try:
        program = parse_program(source, schema.name)
    except DSLError as exc:
        return Extraction(None, exc.diagnostic(), False)
    report = validate_program(program, schema)
    if not report.ok:
        return Extraction(None, "validation error: " + "; ".join(report.messages()), True)
    return Extraction(program, None, True)
