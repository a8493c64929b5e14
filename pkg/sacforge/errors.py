"""Exception hierarchy shared by every sacforge module."""


class SacForgeError(Exception):
    """Base class for all sacforge failures."""


class DomainError(SacForgeError, ValueError):
    pass


class ConfigError(SacForgeError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class BracketError(SacForgeError, RuntimeError):
    def __init__(self, message, rows=()):
        super().__init__(message)
        self.rows = tuple(rows)


class ConvergenceError(SacForgeError, RuntimeError):
    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


class SolverRangeError(SacForgeError, ValueError):
    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class CalibrationError(SacForgeError, ValueError):
    pass


class FitError(SacForgeError, RuntimeError):
    def __init__(self, message, deviation=float("nan"), offsets=None):
        super().__init__(f"{message} (max deviation={deviation:.4f})")
        self.deviation = deviation
        self.offsets = offsets


class GradientError(SacForgeError, FloatingPointError):
    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class TrainingDivergedError(SacForgeError, RuntimeError):
    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


class ExperimentError(SacForgeError, RuntimeError):
    pass
