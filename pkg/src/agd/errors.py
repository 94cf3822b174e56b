"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not compose."""


class InputError(ValueError):
    """A value is outside the operation's domain (unknown class id, bad k, ...)."""


class PreconditionError(ValueError):
    """A documented precondition was violated (empty store, frozen model, ...)."""


class NumericError(ArithmeticError):
    """Non-finite values produced where finite ones are required."""


class CompatibilityError(RuntimeError):
    """Artifacts built against different schedules/models/configs were mixed."""


class ConfigError(ValueError):
    """Malformed or unknown configuration."""
