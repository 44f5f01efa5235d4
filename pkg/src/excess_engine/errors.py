"""Exception hierarchy shared by all stages."""


class ExcessEngineError(Exception):
    """Base class for all errors raised by the package."""


class ParseError(ExcessEngineError):
    """Malformed input file; carries the offending line number."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class ValidationError(ExcessEngineError):
    """Input is well formed but violates a domain invariant."""


class ConvergenceError(ExcessEngineError):
    """An optimizer failed to converge.

    Attributes
    ----------
    last_iterate : array-like
        Parameter vector at the final iteration.
    grad_norm : float
        Norm of the gradient at ``last_iterate``.
    """

    def __init__(self, message, last_iterate=None, grad_norm=None):
        self.last_iterate = last_iterate
        self.grad_norm = grad_norm
        super().__init__(f"{message} (gradient norm {grad_norm!r})")


class DiagnosticsError(ExcessEngineError):
    """MCMC convergence diagnostics failed; ``table`` lists every parameter."""

    def __init__(self, message, table=None):
        self.table = table or []
        super().__init__(message)


class UnidentifiableError(ExcessEngineError):
    """The likelihood carries no information about a parameter."""
