"""Exception hierarchy shared by every hcplayer module."""


class HcPError(Exception):
    """Base class for all hcplayer errors."""


class ValidationError(HcPError, ValueError):
    """An argument is outside its allowed domain."""


class ShapeError(ValidationError):
    """Operand shapes do not agree."""


class ConfigurationError(HcPError, ValueError):
    """A configuration or descriptor is inconsistent."""


class StateError(HcPError, RuntimeError):
    """An object was used before it was initialised."""


class DegenerateInputError(ValidationError):
    """An operand is degenerate (e.g. zero norm) and cannot be used."""


class ContractError(HcPError, RuntimeError):
    """A pluggable component violated its interface contract."""


class FreezeGuardError(HcPError, RuntimeError):
    """A parameter that must stay frozen was modified."""

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class CompatibilityError(HcPError, ValueError):
    """A checkpoint does not match the backbone it is attached to."""

    def __init__(self, message, mismatches=()):
        super().__init__(message)
        self.mismatches = list(mismatches)


class NumericalError(HcPError, ArithmeticError):
    """A numerical routine failed beyond its tolerance."""
