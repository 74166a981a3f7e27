"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class SolverAbort(RuntimeError):
    """A time stepper or nonlinear solve gave up (blow-up, validity exit, no convergence)."""


class ValidityError(SolverAbort):
    """State left the region where the water-wave formulation is well posed."""
