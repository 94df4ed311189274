"""Exception hierarchy shared across the package."""


class CdrFlowError(Exception):
    """Base class for all package errors."""


class DimensionError(CdrFlowError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(CdrFlowError, ValueError):
    """A value falls outside the domain of an operation (log of a non-positive, ...)."""


class ContractError(CdrFlowError, ValueError):
    """A documented precondition was violated by the caller."""


class CapacityError(ContractError):
    """A loop is longer than the model's padded length."""


class EmptySplitError(ContractError):
    """An operation that needs data received an empty split."""


class ParseError(CdrFlowError, ValueError):
    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class GapError(CdrFlowError, ValueError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"missing residue numbers in range: {self.missing}")


class AlphabetError(CdrFlowError, ValueError):
    """Residue name or letter outside the canonical 20 amino acids."""


class SchemaError(CdrFlowError, ValueError):
    def __init__(self, message, record_index=None):
        if record_index is not None:
            message = f"record {record_index}: {message}"
        super().__init__(message)
        self.record_index = record_index


class SynthesisError(CdrFlowError, RuntimeError):
    """Synthetic loop generation ran out of its rejection budget."""


class NumericError(CdrFlowError, FloatingPointError):
    """A loss or parameter became non-finite."""


class CheckpointError(CdrFlowError, ValueError):
    """Checkpoint file is missing fields, has the wrong version, or is corrupt."""

