"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes do not line up."""


class ParseError(ValueError):
    """Malformed input file. Carries the offending path and 1-based line number."""

    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        where = f"{self.path}:{lineno}" if lineno is not None else self.path
        super().__init__(f"{where}: {message}")


class ConvergenceError(RuntimeError):
    """An iterative method hit its iteration cap."""

    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message if residual is None else f"{message} (residual {residual:.3e})")


class StepSizeError(RuntimeError):
    """Adaptive step fell below the floor. ``trajectory`` holds the accepted part."""

    def __init__(self, message, trajectory=None):
        self.trajectory = trajectory
        super().__init__(message)


class MaxStepsError(RuntimeError):
    """Integrator hit its step cap. ``trajectory`` holds the accepted part."""

    def __init__(self, message, trajectory=None):
        self.trajectory = trajectory
        super().__init__(message)


class DivergenceError(FloatingPointError):
    """Training loss became non-finite at ``epoch``."""

    def __init__(self, epoch, loss):
        self.epoch = epoch
        super().__init__(f"loss diverged ({loss}) at epoch {epoch}")
