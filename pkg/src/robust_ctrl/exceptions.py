"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not agree."""


class DivergenceError(ValueError):
    """A KL term is infinite: the policy puts mass where the reference has none."""


class DomainError(ValueError):
    """Argument outside the domain where the quantity is defined."""


class PhysicsError(RuntimeError):
    """Simulator state became non-finite."""


class ConfigError(ValueError):
    """Invalid experiment or environment configuration."""


class UsageError(RuntimeError):
    """API misuse, e.g. backward() from a non-scalar node."""


class TrainingError(RuntimeError):
    """A training run produced a non-finite loss or parameters."""
