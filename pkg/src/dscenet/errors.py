"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A call violated an operation's stated precondition."""


class ConfigError(ValueError):
    """Inconsistent or invalid configuration."""


class EmptyBagError(ValueError):
    """A bag with zero patches was supplied where at least one is required."""


class ParseError(ValueError):
    """Unparseable field value in clinical input."""


class DegenerateInputError(ValueError):
    """Input admits no well-defined result (e.g. single-class ROC)."""


class NumericalError(ArithmeticError):
    """Non-finite value where a finite one is required."""


class BagFormatError(ValueError):
    """Base class for malformed bag files."""


class BagMagicError(BagFormatError):
    """File does not start with the expected magic bytes."""


class BagVersionError(BagFormatError):
    """Unsupported bag file version."""


class BagTruncatedError(BagFormatError):
    """File ended before the payload declared in the header."""


class BagShapeError(BagFormatError):
    """Header fields disagree with the payload actually present."""
