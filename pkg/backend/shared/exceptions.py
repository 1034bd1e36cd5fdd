"""
Exception hierarchy for Granular Tails.

All library errors derive from GranularTailsError so the CLI can map them to
exit codes in one place.
"""

from typing import List, Optional


class GranularTailsError(Exception):
    """Base class for all library errors."""


class DomainError(GranularTailsError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class QuadratureError(GranularTailsError):
    """Numerical integration did not reach the requested tolerance."""

    def __init__(self, message: str, error_estimate: float):
        super().__init__(f"{message} (achieved error estimate {error_estimate:.3e})")
        self.error_estimate = error_estimate


class MissingMomentError(GranularTailsError):
    """A moment needed by an inequality is absent from the grid."""

    def __init__(self, missing: List[float]):
        self.missing = sorted(set(missing))
        listed = ", ".join(f"{p:g}" for p in self.missing)
        super().__init__(f"Missing moments at p = {listed}")


class ShearLowerBoundUnavailable(GranularTailsError):
    """Shear forcing only admits an upper bound on its moment."""


class GammaDegenerateError(GranularTailsError):
    """1 - gamma_p is too small for the steady balance to be solved."""


class InfeasibleGridError(GranularTailsError):
    """An interval of the moment grid became empty."""

    def __init__(self, p: float, lo: float, hi: float, reason: str = ""):
        self.p = p
        self.lo = lo
        self.hi = hi
        detail = f": {reason}" if reason else ""
        super().__init__(f"Empty interval at p = {p:g} (lo={lo:.6g}, hi={hi:.6g}){detail}")


class InconclusiveEstimateError(GranularTailsError):
    """No tail order in the scan range produced geometric normalized moments."""


class InsufficientTailStatistics(GranularTailsError):
    """The speed histogram does not resolve a decaying tail."""


class MismatchedParametersError(GranularTailsError):
    """Two artifacts do not describe the same experiment."""


class ConfigError(GranularTailsError):
    """Invalid experiment configuration file."""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field is not None:
            location.append(f"field '{field}'")
        prefix = f"[{', '.join(location)}] " if location else ""
        super().__init__(f"{prefix}{message}")
        self.field = field
        self.line = line
