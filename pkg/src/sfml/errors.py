"""Exception hierarchy shared by every stage of the pipeline."""


class SFMLError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SFMLError, ValueError):
    pass


class ShapeError(SFMLError, ValueError):
    pass


class UnsupportedSystemError(SFMLError, KeyError):
    pass


class DegenerateDataError(SFMLError, ValueError):
    pass


class IntegrationBlowup(SFMLError, ArithmeticError):
    """Non-finite drift, diffusion or state during SDE integration."""

    def __init__(self, message, time=None, state=None, trajectory=None):
        super().__init__(message)
        self.time = time
        self.state = state
        self.trajectory = trajectory


class NumericalInstability(SFMLError, ArithmeticError):
    """Non-finite conditioner output or loss inside the flow."""

    def __init__(self, message, layer=None, diagnostics=None):
        super().__init__(message)
        self.layer = layer
        self.diagnostics = diagnostics or {}


class RolloutDiverged(SFMLError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TrainingDiverged(SFMLError, RuntimeError):
    def __init__(self, message, last_good=None, iteration=None):
        super().__init__(message)
        self.last_good = last_good
        self.iteration = iteration
