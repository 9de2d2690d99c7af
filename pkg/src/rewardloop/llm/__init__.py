from .backends import BEST_PROGRAM_HEADER, Backend, BackendError, ChatCompletionBackend, MockBackend
from .extract import NO_PROGRAM, Extraction, extract_program
from .generate import CandidateSource, GenerationError, GenerationStats, generate_candidates
from .prompt import (
    GENERAL_SECTIONS,
    TRUNCATION_MARKER,
    PromptBudgetError,
    PromptBundle,
    assemble_prompt,
    estimate_tokens,
    observation_table,
    retry_messages,
)

__all__ = [
    "BEST_PROGRAM_HEADER",
    "Backend",
    "BackendError",
    "CandidateSource",
    "ChatCompletionBackend",
    "Extraction",
    "GENERAL_SECTIONS",
    "GenerationError",
    "GenerationStats",
    "MockBackend",
    "NO_PROGRAM",
    "PromptBudgetError",
    "PromptBundle",
    "TRUNCATION_MARKER",
    "assemble_prompt",
    "estimate_tokens",
    "extract_program",
    "generate_candidates",
    "observation_table",
    "retry_messages",
]
