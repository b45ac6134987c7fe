"""Exception types shared across the package."""


class ContractViolationError(ValueError):
    """An operation was called with inputs that violate its preconditions."""


class ConfigurationError(ValueError):
    """A config value, gap kind, or checkpoint path is invalid or missing."""


class SimulationDivergedError(RuntimeError):
    """The integrator produced a non-finite state; the episode must end."""
