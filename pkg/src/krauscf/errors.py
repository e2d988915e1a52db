"""Fault taxonomy shared by all modules.

Validation problems are reported as data (lists of violation strings) where
an operation says so; exceptions here are reserved for conditions that make
a result meaningless: malformed configuration, iteration that failed to
converge, and arguments that land on a pole of the hierarchy.
"""


class KrausCFError(Exception):
    """Base class for all faults raised by this package."""


class ValidationError(KrausCFError):
    """Input value violates a documented invariant."""


class ConfigError(KrausCFError):
    """Run configuration is malformed, inconsistent, or out of envelope."""


class ConvergenceError(KrausCFError):
    """An iterative solve diverged or failed to reach tolerance.

    The message names the offending quantity (hierarchy state, continued
    fraction level, Picard sweep) so the failure is attributable.
    """


class DegenerateArgumentError(KrausCFError):
    """A Laplace argument collided with a free-propagator pole.

    Raised when a shifted argument x - omega_k falls within the degeneracy
    guard of the resolvent denominator, which would divide by (near) zero.
    """
