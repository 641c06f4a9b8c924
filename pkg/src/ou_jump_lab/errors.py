"""Exception hierarchy shared by the whole package.

Two families:

* ``ValidationError`` -- the caller handed us something structurally wrong
  (non-symmetric diffusion matrix, unstable drift, empty curve, ...).  CLI
  exit code 1.
* ``NumericalError`` -- inputs were fine but the computation could not be
  completed to the requested accuracy (overflow, linear solve failure,
  quadrature refusing to converge, a verification suite reporting red).
  CLI exit code 2.
"""

from __future__ import annotations


class OuJumpError(Exception):
    """Base class for every error raised intentionally by this package."""

    exit_code = 2


class ValidationError(OuJumpError):
    """Structurally invalid input.  Maps to CLI exit code 1."""

    exit_code = 1


class NumericalError(OuJumpError):
    """Computation failed despite valid input.  Maps to CLI exit code 2."""

    exit_code = 2


# --- validation family ------------------------------------------------------

class NotSymmetric(ValidationError):
    """A matrix that must be symmetric is not (beyond tolerance)."""


class NotPositiveDefinite(ValidationError):
    """A matrix that must be positive definite has a non-positive eigenvalue."""


class NotHurwitz(ValidationError):
    """The drift matrix has an eigenvalue with non-negative real part."""


class TimeNonPositive(ValidationError):
    """A kernel or semigroup evaluation was requested at t <= 0."""


class BadKappa(ValidationError):
    """Kernel family index outside {0, 1, 2, 3}."""


class DegenerateSample(ValidationError):
    """A ratio/diagnostic was requested at a degenerate point (x = 0, t = 0)."""


class RegionEmpty(ValidationError):
    """A bound was requested on a parameter region that is empty."""


class TimeOutOfRegime(ValidationError):
    """An operator tied to a local cell was evaluated outside its time range."""


class BoxTooSmall(ValidationError):
    """The requested localization box cannot hold a single admissible ball."""


class OutOfBox(ValidationError):
    """An evaluation point lies outside the region covered by the scheme."""


class EmptyCurve(ValidationError):
    """A curve functional was applied to a curve with no samples."""


class RhoOutOfRange(ValidationError):
    """Variation exponent outside the supported half-line [1, inf)."""


# --- numerical family -------------------------------------------------------

class NonFinite(NumericalError):
    """An intermediate or final value overflowed or became NaN."""


class SolveFailure(NumericalError):
    """A linear system / Lyapunov solve did not reach the residual target."""


class QuadratureNonConvergent(NumericalError):
    """Adaptive quadrature exhausted its budget before the tolerance."""


class FailureList(NumericalError):
    """One or more identity checks failed; carries the failing rows."""

    def __init__(self, failures):
        self.failures = list(failures)
        names = ", ".join(str(f) for f in self.failures)
        super().__init__(f"{len(self.failures)} identity check(s) failed: {names}")
