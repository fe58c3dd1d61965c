"""Exception hierarchy shared across the package.

Every error raised by the library derives from :class:`RandomTowerError` so
callers (the CLI in particular) can distinguish domain failures (exit code 2)
from genuine bugs.
"""


class RandomTowerError(Exception):
    """Base class for all domain errors raised by this package."""


# ----------------------------------------------------------------- env errors
class NoCommonReturnTimes(RandomTowerError):
    """No gcd-1 set of return times shared by every symbol."""


class TailViolation(RandomTowerError):
    """No usable exponential envelope for the return-time tails."""


class AscovFailure(RandomTowerError):
    """Atom selection cannot certify the uniform lower-randomness parameters."""


# --------------------------------------------------------------- tower errors
class WeightTooLarge(RandomTowerError):
    """Weighted floor-mass sum exceeds the configured budget."""


class TruncationEscape(RandomTowerError):
    """An orbit climbed past the truncation height of the tower."""


class CombinatorialBlowup(RandomTowerError):
    """Cylinder enumeration would exceed the configured cylinder cap."""


# ----------------------------------------------------------------- ops errors
class ResolutionMismatch(RandomTowerError):
    """Tower function depths or fibers are incompatible for an operation."""


class NoConvergence(RandomTowerError):
    """An iterative scheme plateaued above its tolerance."""


class BoundViolation(RandomTowerError):
    """A certified inequality failed beyond numerical slack."""


# --------------------------------------------------------------- cones errors
class DegenerateRatio(RandomTowerError):
    """A projective-metric ratio had a vanishing denominator."""


class CertificationFailure(RandomTowerError):
    """Cone contraction could not be certified within the search budget."""


class NoPositiveRadius(RandomTowerError):
    """No positive complex perturbation radius passed the contraction test."""


# -------------------------------------------------------------- limits errors
class DegenerateVariance(RandomTowerError):
    """Limit variance is numerically zero; scaling statistics are undefined."""


class LatticeMismatch(RandomTowerError):
    """Observable values are not commensurate with the declared lattice span."""


class A3Failure(RandomTowerError):
    """Characteristic-function decay check failed (reported, not fatal)."""


class WindowExceeded(RandomTowerError):
    """Requested deviation scale lies outside the usable tilting window."""
