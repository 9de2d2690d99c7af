from .ast import (
    BinOp,
    Call,
    Clamp,
    Index,
    MinMax,
    Neg,
    Num,
    ObservationSchema,
    RewardProgram,
    RewardTerm,
    Signal,
    SignalSpec,
    ValidationReport,
)
from .evaluate import (
    ArityError,
    CompiledProgram,
    RewardEvalError,
    RewardSummary,
    TermValues,
    accumulate,
    eval_step,
    validate_program,
)
from .homomorphism import (
    HomomorphismMap,
    MapEntry,
    MappingError,
    MismatchReport,
    apply_homomorphism,
)
from .parser import (
    DSLError,
    DuplicateTermError,
    LexError,
    ParseError,
    format_expr,
    parse_expr,
    parse_program,
    pretty_print,
)

__all__ = [
    "ArityError",
    "BinOp",
    "Call",
    "Clamp",
    "CompiledProgram",
    "DSLError",
    "DuplicateTermError",
    "HomomorphismMap",
    "Index",
    "LexError",
    "MapEntry",
    "MappingError",
    "MinMax",
    "MismatchReport",
    "Neg",
    "Num",
    "ObservationSchema",
    "ParseError",
    "RewardEvalError",
    "RewardProgram",
    "RewardSummary",
    "RewardTerm",
    "Signal",
    "SignalSpec",
    "TermValues",
    "ValidationReport",
    "accumulate",
    "apply_homomorphism",
    "eval_step",
    "format_expr",
    "parse_expr",
    "parse_program",
    "pretty_print",
    "validate_program",
]
