"""Exception hierarchy shared by all modules."""


class TaskImpedanceError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(TaskImpedanceError, ValueError):
    pass


class NonFiniteState(TaskImpedanceError, ArithmeticError):
    pass


class NotConverged(TaskImpedanceError):
    """IK gave up; ``q`` is the best iterate and ``residual`` its position error."""

    def __init__(self, message, q=None, residual=float("nan")):
        super().__init__(message)
        self.q = q
        self.residual = residual


class EmptyText(TaskImpedanceError, ValueError):
    pass


class ProviderUnavailable(TaskImpedanceError):
    pass


class DuplicateId(TaskImpedanceError, KeyError):
    pass


class EmptyIndex(TaskImpedanceError):
    pass


class ParseError(TaskImpedanceError):
    def __init__(self, message, location=None):
        self.location = location
        if location is not None:
            message = f"{location}: {message}"
        super().__init__(message)


class ValidationError(TaskImpedanceError, ValueError):
    def __init__(self, message, entry=None, rule=None):
        self.entry = entry
        self.rule = rule or message
        if entry is not None:
            message = f"{entry}: {message}"
        super().__init__(message)


class UnknownTask(TaskImpedanceError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown task"


class UnsureAnswer(TaskImpedanceError):
    def __init__(self, question):
        super().__init__(f"VLM answered 'unsure' to: {question}")
        self.question = question


class FixtureNotFound(TaskImpedanceError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "fixture not found"


class PipelineError(TaskImpedanceError):
    """Wraps an upstream failure with the pipeline stage it came from."""

    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


class EmptyTrace(TaskImpedanceError, ValueError):
    pass


class SimulationAborted(TaskImpedanceError):
    """Raised by ``run_scenario``; carries the trace recorded before the failure."""

    def __init__(self, cause, trace):
        super().__init__(f"{type(cause).__name__}: {cause}")
        self.cause = cause
        self.trace = trace
