"""
Toolkit Errors
Exception hierarchy shared by every service; the CLI maps these to exit codes.
"""


class InterpError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


# ============================================================
# Usage / configuration (exit 2)
# ============================================================

class ConfigurationError(InterpError):
    """Invalid config, infeasible plant spec, shape mismatch, bad site set."""

    exit_code = 2


class InputError(InterpError):
    """Bad user input: out-of-range token ids, missing paths."""

    exit_code = 2


class ConceptDefinitionError(InterpError):
    """A concept rule that does not compile."""

    exit_code = 2


# ============================================================
# Runtime failures (exit 1)
# ============================================================

class ContainerError(InterpError):
    """Weight container is truncated, malformed or fails its checksum."""


class DatasetError(InterpError):
    """Not enough samples to build or rank a dataset."""

    def __init__(self, message: str, n_positive: int | None = None, n_negative: int | None = None):
        super().__init__(message)
        self.n_positive = n_positive
        self.n_negative = n_negative


class DataError(InterpError):
    """Non-finite activations handed to a probe."""


class EvaluationError(InterpError):
    """Empty evaluation set or misaligned predictions."""


class NumericError(InterpError):
    """Degenerate numerics, e.g. a zero-norm final residual."""


class CaseError(InterpError):
    """A trigger–target case that cannot be resolved against its text."""


class EndpointError(InterpError):
    """LLM endpoint kept failing after all retries."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class ProtocolError(InterpError):
    """LLM endpoint answered with a body that is not the expected JSON."""


class VerdictParseError(InterpError):
    """Scorer text does not contain exactly 20 binary verdicts."""
