"""Exception hierarchy shared by all subpackages."""


class FmoPetasimError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(FmoPetasimError, ValueError):
    """Input data violates a documented invariant."""


class SingularGeometryError(ValidationError):
    """Two sites in different fragments coincide, so 1/r is undefined."""


class CapacityError(FmoPetasimError):
    """Problem too large for a dense solve."""


class SolverError(FmoPetasimError, ArithmeticError):
    """A linear system that should be regular turned out singular."""


class ConvergenceError(FmoPetasimError):
    """An iterative procedure did not meet its stopping criterion."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class IdentifiabilityError(FmoPetasimError):
    """The calibration design cannot determine all parameters."""


class ConfigurationError(FmoPetasimError):
    """A required setting is missing or inconsistent."""


class PresetNotFoundError(ConfigurationError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown preset"


class WorkflowCycleError(ValidationError):
    """The workflow graph contains a dependency cycle."""


class ParseError(FmoPetasimError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
