"""Exception hierarchy shared by all sepcross modules."""


class SepcrossError(Exception):
    """Base class for all library errors."""


class ExprError(SepcrossError):
    """Base class for expression-language errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message, position):
        super().__init__(f"{message} (offset {position})")
        self.position = position


class UnknownIdentifierError(ExprError):
    pass


class ExprDomainError(ExprError):
    """ln of a non-positive value, division by zero, sqrt of a negative, ..."""


class MissingBindingError(ExprError):
    pass


class ModelError(SepcrossError):
    pass


class NotASaddle(SepcrossError):
    pass


class TopologyError(SepcrossError):
    pass


class OnSeparatrix(SepcrossError):
    pass


class FitDiverged(SepcrossError):
    pass


class UnsupportedRegime(SepcrossError):
    pass


class NotCaptured(SepcrossError):
    pass


class MeasurementSuspect(SepcrossError):
    pass


class ConfigError(SepcrossError):
    pass
