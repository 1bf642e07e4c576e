"""Exception types shared across the solvers."""


class ParameterError(ValueError):
    """Invalid or inconsistent model parameters."""


class DomainError(ValueError):
    """Argument outside the domain of a function."""


class RegimeError(ValueError):
    """Operation called outside the parameter regime it supports."""


class HorizonError(RuntimeError):
    """A root could not be bracketed within the configured time horizon."""


class SolverError(RuntimeError):
    """Numerical solver failure. ``trace`` holds diagnostics."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else {}


class ConvergenceError(SolverError):
    """Outer iteration did not converge. ``report`` is the partial SolveReport."""

    def __init__(self, message, report=None, trace=None):
        super().__init__(message, trace)
        self.report = report
