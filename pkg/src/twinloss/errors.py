"""Exception types shared across the package."""


class TwinLossError(Exception):
    """Base class for all package errors."""


class ArgumentError(TwinLossError, ValueError):
    """A parameter is outside its allowed domain."""


class InsufficientDataError(TwinLossError, ValueError):
    """Too few samples to form the requested statistic."""


class DegenerateInputError(TwinLossError, ValueError):
    """Data is valid in shape but makes a statistic undefined (e.g. zero mean)."""


class DegenerateSplitError(ArgumentError):
    """A beam split with tau at 0 or 1."""


class DegenerateDenominatorError(TwinLossError, ZeroDivisionError):
    """A ratio estimator was evaluated with a zero reference count."""


class UnsupportedCaseError(TwinLossError, NotImplementedError):
    """No closed form or numerical route exists for this combination."""


class InconsistentCalibrationError(TwinLossError, ValueError):
    """Calibration statistics are incompatible with the assumed source."""


class ShapeError(TwinLossError, ValueError):
    """Array shapes do not match."""
