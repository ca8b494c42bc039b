"""Exception types shared across the library."""

from __future__ import annotations


class SmjdError(Exception):
    """Base class for library errors."""


class AgeBeyondSupport(SmjdError):
    """Hazard rate requested at an age where the holding-time cdf is ~1."""

    def __init__(self, state: int, age: float):
        self.state = state
        self.age = age
        super().__init__(
            f"hazard undefined: holding-time cdf at age {age} in state "
            f"{state} is within 1e-15 of 1"
        )


class BoundViolation(SmjdError):
    """A realized hazard exceeded the declared majorant during thinning."""


class NonFinitePath(SmjdError):
    """A simulated state coordinate became non-finite.

    Carries the truncated path and the ensemble index (if any) so the
    offending configuration can be reproduced.
    """

    def __init__(self, message: str, path=None, path_index: int | None = None):
        self.path = path
        self.path_index = path_index
        super().__init__(message)


class UnboundedHamiltonian(SmjdError):
    """The Hamiltonian is linear in u with nonzero slope on an unbounded set."""


class DegenerateVol(SmjdError):
    """Volatility is zero where a division by sigma is required."""


class SingularDenominator(SmjdError):
    """The control-rule denominator is numerically zero."""


class SingularPhi(SmjdError):
    """The linear-rule slope functional is numerically zero."""


class FixedPointDiverged(SmjdError):
    """The damped fixed-point iteration failed to converge."""

    def __init__(self, message: str, trace=None):
        self.trace = trace or []
        super().__init__(message)


class AdmissibilityFailure(SmjdError):
    """A perturbed policy failed the finite-objective admissibility probe."""


class ConfigError(SmjdError):
    """Experiment configuration is malformed; message names the field path."""
