"""Exception types raised across the package."""


class ApctError(Exception):
    """Base class for all errors raised by this package."""

    code = "apct"


class DimensionError(ApctError, ValueError):
    code = "dimension"


class ContractError(ApctError, ValueError):
    code = "contract"


class DegenerateRowError(ContractError):
    code = "degenerate-row"


class NumericFault(ApctError, ArithmeticError):
    code = "numeric-fault"


class CountError(ApctError, ValueError):
    code = "count"


class DegenerateCloudError(ApctError, ValueError):
    code = "degenerate-cloud"


class FormatError(ApctError, ValueError):
    code = "format"


class ClassError(ApctError, ValueError):
    code = "class"


class SpecError(ApctError, ValueError):
    code = "spec"


class ConfigError(ApctError, ValueError):
    code = "config"


class CompletenessError(ApctError, ValueError):
    code = "completeness"


class DegenerateReferenceError(ApctError, ZeroDivisionError):
    code = "degenerate-reference"


class TrainingDiverged(NumericFault):
    """Raised when the training loss becomes non-finite.

    ``last_good`` holds a copy of the parameters from the last step whose
    loss was finite, so callers can checkpoint them.
    """

    code = "diverged"

    def __init__(self, message, last_good=None, step=None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step
