"""Exception hierarchy shared by all modules."""


class HybridMLError(Exception):
    pass


class SpecError(HybridMLError):
    """Invalid model specification."""


class ShapeError(HybridMLError):
    pass


class DataError(HybridMLError):
    pass


class StateError(HybridMLError):
    """Stale or missing forward cache."""


class NumericError(HybridMLError):
    pass


class IncompatibilityError(HybridMLError):
    """Parameter vectors or segments that cannot be combined."""


class ConfigError(HybridMLError):
    pass


class FormatError(HybridMLError):
    """Malformed IDX file; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class GenerationError(HybridMLError):
    pass


class ProtocolError(HybridMLError):
    """Internal inconsistency, e.g. a cyclic event graph."""


class ValidationFailure(HybridMLError):
    pass
