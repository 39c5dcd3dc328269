"""Exception types shared across the package."""


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes; the message names both shapes."""


class TapeError(RuntimeError):
    """Misuse of a computation tape (e.g. backward from a node not on it)."""


class SpecError(ValueError):
    """A domain or experiment specification violates its invariants."""


class ProtocolError(ValueError):
    """The retrieval evaluation protocol cannot be satisfied."""


class SamplingError(ValueError):
    """A batch request cannot be met by the dataset."""


class MiningError(ValueError):
    """Triplet mining is impossible for the given batch composition."""


class LabelError(ValueError):
    """A label is outside the valid range for the operation."""


class LabelAccessError(RuntimeError):
    """Identity labels of an unlabeled dataset were read outside a
    sanctioned access context."""


class ConfigError(ValueError):
    """An experiment configuration document is malformed.

    ``line`` holds the 1-based line number when the error is tied to one.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""
