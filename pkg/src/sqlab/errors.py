"""Exception types raised across sqlab."""


class SQLabError(Exception):
    """Base class for all sqlab errors."""


class ValidationError(SQLabError, ValueError):
    """A parameter or input violates a documented precondition."""


class UniverseMismatch(ValidationError):
    pass


class EnumerationTooLarge(ValidationError):
    pass


class GaussianNeedsMonteCarlo(ValidationError):
    pass


class UniverseNotTabulatable(ValidationError):
    pass


class UniverseTooSmall(ValidationError):
    pass


class DatasetTooSmall(ValidationError):
    pass


class SampleTooSmall(ValidationError):
    pass


class MissingParameter(ValidationError):
    pass


class ConditionViolated(ValidationError):
    """A side condition of the moment tail bound does not hold for the supplied parameters."""

    def __init__(self, conditions):
        self.conditions = list(conditions)
        super().__init__("condition(s) violated: " + ", ".join(self.conditions))


class MomentOverflow(ValidationError):
    pass


class ConfigError(ValidationError):
    """Invalid experiment or session configuration; names the offending field."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class SessionError(SQLabError):
    """An oracle session refused to answer."""


class SessionHalted(SessionError):
    pass


class QueryBudgetExceeded(SessionError):
    pass


class HardUpdateBudgetExhausted(SessionError):
    pass


class FiringBudgetExhausted(SessionError):
    pass
