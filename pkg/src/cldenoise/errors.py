"""Exception hierarchy.

The CLI maps the three top-level families onto exit codes
(config -> 2, data -> 3, divergence -> 4).
"""


class CLDenoiseError(Exception):
    pass


class ConfigError(CLDenoiseError, ValueError):
    pass


class InvalidConfig(ConfigError):
    pass


class SchemaMismatch(ConfigError):
    pass


class DataError(CLDenoiseError, ValueError):
    pass


class MissingFile(DataError, FileNotFoundError):
    pass


class MixedShapes(DataError):
    pass


class NonImageData(DataError):
    pass


class DegenerateRange(DataError):
    pass


class PatchTooLarge(DataError):
    pass


class SubsetTooLarge(DataError):
    pass


class EmptyTestSet(DataError):
    pass


class CropOutOfBounds(DataError):
    pass


class DegenerateReference(DataError):
    pass


class ShapeMismatch(CLDenoiseError, ValueError):
    pass


class WindowTooLarge(CLDenoiseError, ValueError):
    pass


class BatchTooSmall(CLDenoiseError, ValueError):
    pass


class NonUnitNorm(CLDenoiseError, ValueError):
    pass


class NonFiniteTerm(CLDenoiseError, ArithmeticError):
    def __init__(self, term, value=None):
        self.term = term
        self.value = value
        super().__init__(f"loss term {term!r} is not finite ({value})")


class NonFiniteLoss(NonFiniteTerm):
    """Raised by the training loop; carries the offending term name."""
