class DualEditError(Exception):
    exit_code = 4


class InvalidArgument(DualEditError, ValueError):
    exit_code = 2


class ConfigurationError(DualEditError):
    exit_code = 3


class NumericFailure(DualEditError, ArithmeticError):
    pass


class InversionFailure(NumericFailure):
    def __init__(self, msg, step=None):
        super().__init__(msg)
        self.step = step


class RolloutFailure(NumericFailure):
    def __init__(self, msg, step=None, retained_graphs=None):
        super().__init__(msg)
        self.step = step
        self.retained_graphs = retained_graphs


class TrainingFailure(DualEditError):
    """Raised on divergence; carries the last finite checkpoint."""

    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


class OptimizationAborted(NumericFailure):
    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = history or []
