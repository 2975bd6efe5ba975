class RmlError(Exception):
    pass


class ConfigurationError(RmlError, ValueError):
    """Shapes, dimensions or settings that cannot work together."""


class UsageError(RmlError, RuntimeError):
    pass


class NonFiniteError(RmlError, FloatingPointError):
    pass


class InsufficientSamplesError(RmlError, ValueError):
    pass


class CapabilityError(RmlError, NotImplementedError):
    """A bridge cannot perform the requested regeneration."""


class TrainingDivergence(RmlError):
    def __init__(self, message: str, iteration: int, trace=None):
        super().__init__(message)
        self.iteration = iteration
        self.trace = trace
