"""Exception hierarchy shared by every module of the package."""


class LfdseError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LfdseError, ValueError):
    """Pattern or probability vectors have inconsistent lengths."""


class BoundsError(LfdseError, ValueError):
    """An integer argument lies outside its supported range."""


class AdmissibilityError(LfdseError, ValueError):
    """The requested (mu, lambda) error levels produce crossing thresholds."""


class UndefinedEstimateError(LfdseError, ArithmeticError):
    """A population estimate has a zero or negative denominator."""


class DomainError(LfdseError, ValueError):
    """A closed-form quantity is undefined for the supplied inputs."""


class EmptyInputError(LfdseError, ValueError):
    """An operation received no observations."""


class DegenerateComponentError(LfdseError, ArithmeticError):
    """A mixture component lost all posterior mass during EM."""


class ScenarioFailureError(LfdseError, RuntimeError):
    """Every replicate of a simulation scenario failed."""


class BootstrapFailureError(LfdseError, RuntimeError):
    """Every bootstrap replicate was degenerate."""


class InconsistentInputError(LfdseError, ValueError):
    """Inputs contradict each other (e.g. margins versus pattern totals)."""


class ParseError(LfdseError, ValueError):
    """A text input could not be parsed.

    Parameters
    ----------
    message : str
        What went wrong.
    path : str, optional
        Source file, if any.
    line : int, optional
        1-based line number of the offending record.
    """

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
