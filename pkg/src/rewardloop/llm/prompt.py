"""Prompt assembly for reward-program generation."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

from ..dsl import ObservationSchema, RewardProgram, pretty_print

GENERAL_SECTIONS = ("task", "environment", "observations", "coding tips", "grammar")

TRUNCATION_MARKER = "[... earlier feedback truncated ...]"

SYSTEM_TEXT = (
    "You write reward programs for reinforcement learning. Reply with exactly one "
    "program inside a fenced code block. Use only the signals listed in the observation table."
)

CODING_TIPS = """\
- Write one term per line as `name: scale * expression`.
- Keep every term scalar; use norm2(...) or indexing to reduce vector signals.
- Use exp(-norm2(error) / sigma2) for bounded tracking rewards in (0, 1].
- Give penalties a negative scale instead of negating the expression.
- Multiply by survival_dt to reward only the time spent alive.
- Avoid division by expressions that can reach zero; such a program is rejected."""

GRAMMAR = """\
program  := term (newline term)*
term     := NAME ':' [NUMBER '*'] expr        # '#' starts a comment
expr     := expr ('+' | '-') expr | expr ('*' | '/') expr | '-' expr
          | NUMBER | SIGNAL | SIGNAL '[' INT ']' | '(' expr ')'
          | f(expr)        with f in exp, sqrt, tanh, abs, square, norm2
          | min(expr, expr) | max(expr, expr) | clamp(expr, lo, hi)"""

RETRY_INSTRUCTION = (
    "Your previous answer could not be used: {diagnostic}\n"
    "Reply with a corrected program in one fenced code block."
)


def estimate_tokens(text: str) -> int:
    """Rough token count (four characters per token)."""
    return math.ceil(len(text) / 4)


def observation_table(schema: ObservationSchema) -> str:
    rows = ["| signal | arity | unit |", "| --- | --- | --- |"]
    rows += [f"| {s.name} | {s.arity} | {s.unit} |" for s in schema.signals]
    return "\n".join(rows)


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    sections: tuple[tuple[str, str], ...]

    @property
    def labels(self) -> list[str]:
        return [label for label, _ in self.sections]

    def section(self, label: str) -> str:
        for lab, text in self.sections:
            if lab == label:
                return text
        raise KeyError(label)

    def user_text(self) -> str:
        return "\n\n".join(f"## {label}\n{text}" for label, text in self.sections)

    def text(self) -> str:
        return self.system_text + "\n\n" + self.user_text()

    def tokens(self) -> int:
        return estimate_tokens(self.text())

    def digest(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()

    def messages(self) -> list[dict[str, str]]:
        return [
            {"role": "system", "content": self.system_text},
            {"role": "user", "content": self.user_text()},
        ]


def retry_messages(bundle: PromptBundle, previous: str, diagnostic: str) -> list[dict[str, str]]:
    """Conversation for a repair attempt: the original prompt, the failed answer, the diagnostic."""
    return bundle.messages() + [
        {"role": "assistant", "content": previous},
        {"role": "user", "content": RETRY_INSTRUCTION.format(diagnostic=diagnostic)},
    ]


class PromptBudgetError(ValueError):
    pass


def assemble_prompt(
    task: str,
    env_desc: str,
    schema: ObservationSchema,
    safety_rules: Sequence[str] = (),
    reference_program: RewardProgram | None = None,
    feedback: str | Sequence[str] | None = None,
    token_budget: int = 8000,
) -> PromptBundle:
    """Build the generation prompt.

    Feedback entries are ordered oldest first. When the prompt exceeds
    ``token_budget`` the oldest feedback is cut from its beginning (and
    marked) before any newer feedback is touched.
    """
    sections: list[tuple[str, str]] = [
        ("task", task.strip()),
        ("environment", env_desc.strip()),
        ("observations", observation_table(schema)),
        ("coding tips", CODING_TIPS),
        ("grammar", GRAMMAR),
    ]
    if safety_rules:
        sections.append(("safety", "\n".join(f"- {rule}" for rule in safety_rules)))
    if reference_program is not None:
        sections.append(("reference program", "```\n" + pretty_print(reference_program) + "```"))
    if isinstance(feedback, str):
        feedback = [feedback]
    fb = [f.strip() for f in (feedback or []) if f and f.strip()]
    n_fixed = len(sections)
    for i, text in enumerate(fb):
        sections.append((f"feedback {i + 1}", text))

    bundle = PromptBundle(SYSTEM_TEXT, tuple(sections))
    k = n_fixed
    while bundle.tokens() > token_budget:
        if k >= len(sections):
            raise PromptBudgetError(
                f"prompt needs {bundle.tokens()} tokens without feedback, budget is {token_budget}"
            )
        label, text = sections[k]
        excess_chars = 4 * (bundle.tokens() - token_budget) + len(TRUNCATION_MARKER) + 2
        keep = len(text) - excess_chars
        if keep <= 0 or text.startswith(TRUNCATION_MARKER):
            sections[k] = (label, TRUNCATION_MARKER)
            k += 1
        else:
            sections[k] = (label, TRUNCATION_MARKER + "\n" + text[-keep:])
        bundle = PromptBundle(SYSTEM_TEXT, tuple(sections))
    return bundle
