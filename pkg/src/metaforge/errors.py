"""Exception types raised across the package."""


class MetaForgeError(Exception):
    """Base class for all package errors."""


class ShapeError(MetaForgeError, ValueError):
    def __init__(self, layer, message):
        super().__init__(f"{layer}: {message}")
        self.layer = layer


class NumericError(MetaForgeError, ArithmeticError):
    pass


class FormatError(MetaForgeError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(MetaForgeError, ValueError):
    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class EpisodeError(MetaForgeError, ValueError):
    def __init__(self, message, class_id=None):
        super().__init__(message)
        self.class_id = class_id


class CapabilityError(MetaForgeError, RuntimeError):
    pass


class TrainingError(MetaForgeError, RuntimeError):
    def __init__(self, message, last_finite_state=None, context=None):
        if context:
            message = f"{message} [{', '.join(f'{k}={v}' for k, v in context.items())}]"
        super().__init__(message)
        self.last_finite_state = last_finite_state
        self.context = context or {}
