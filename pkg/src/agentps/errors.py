from __future__ import annotations


class AgentPSError(Exception):
    """Base class for every error raised by the package.

    ``exit_code`` is what the CLI returns when the error escapes a command:
    1 for usage/config problems, 2 for data problems, 3 for numeric failures.
    """

    exit_code: int = 1


# ---------------------------------------------------------------------------
# Usage / configuration (exit 1)
# ---------------------------------------------------------------------------


class ConfigError(AgentPSError, ValueError):
    """Invalid configuration value or inconsistent run setup."""


class CredentialError(ConfigError):
    """Remote annotator credential or endpoint missing from the environment."""


class ContractError(AgentPSError, RuntimeError):
    """A caller broke an operation's precondition."""


class ShapeError(AgentPSError, ValueError):
    """Tensor dimensions do not agree."""

    def __init__(self, message: str, *shapes: tuple[int, ...]):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = shapes


class BudgetError(AgentPSError, ValueError):
    """Sequence does not fit the model's maximum length."""

    def __init__(self, length: int, max_seq_len: int, detail: str = ""):
        message = f"sequence length {length} exceeds max_seq_len {max_seq_len}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)
        self.length = length
        self.max_seq_len = max_seq_len


class VariantError(AgentPSError, LookupError):
    """Requested head does not exist for the model variant."""


class LabelError(AgentPSError, IndexError):
    """Class index outside the answer space of a question."""


# ---------------------------------------------------------------------------
# Data (exit 2)
# ---------------------------------------------------------------------------


class DataError(AgentPSError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, path: str, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line


class SchemaError(DataError):
    def __init__(self, field: str, detail: str = ""):
        message = f"missing or invalid field {field!r}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)
        self.field = field


class IntegrityError(DataError):
    """Checkpoint payload disagrees with its header."""


class VersionError(DataError):
    """Checkpoint format version is not supported."""


class DegenerateInputError(DataError):
    """Metric input holds a single class only."""


# ---------------------------------------------------------------------------
# Numeric failure (exit 3)
# ---------------------------------------------------------------------------


class NumericError(AgentPSError, ArithmeticError):
    exit_code = 3

    def __init__(self, message: str, *, step: int | None = None, batch: int | None = None):
        if step is not None:
            message = f"{message} (step={step}, batch={batch})"
        super().__init__(message)
        self.step = step
        self.batch = batch
