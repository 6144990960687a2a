"""Exception hierarchy shared by all lacuna modules."""


class LacunaError(Exception):
    """Base class for every error raised by the package."""


class ShapeError(LacunaError, ValueError):
    pass


class ConfigError(LacunaError, ValueError):
    pass


class ContractError(LacunaError, ValueError):
    """A caller violated an operation's precondition."""


class DomainError(LacunaError, ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class NumericalError(LacunaError, ArithmeticError):
    pass


class EmptyMaskError(LacunaError, ValueError):
    pass


class InfeasibleConditioningError(LacunaError, RuntimeError):
    pass


class InfeasibleError(LacunaError, ValueError):
    pass


class TrainingDivergenceError(LacunaError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class GenerationError(LacunaError, RuntimeError):
    pass
