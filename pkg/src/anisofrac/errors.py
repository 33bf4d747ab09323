"""Exception hierarchy shared by the library and the CLI."""


class AnisofracError(Exception):
    """Base class for all library errors."""


class ContractViolation(AnisofracError, ValueError):
    """An input broke a documented precondition."""


class DegenerateDeformation(AnisofracError):
    """Singular or inverted deformation gradient."""


class ParameterDomainError(AnisofracError, ValueError):
    """Material parameters or environment outside the model's validity band."""


class StateCorruption(AnisofracError):
    """Internal variables drifted off the isochoric manifold."""


class StepRejected(AnisofracError):
    """Local integration did not converge; the caller should cut the step.

    ``mask`` flags the Gauss points that failed when the update was batched.
    """

    def __init__(self, message, mask=None):
        super().__init__(message)
        self.mask = mask


class TangentFailure(AnisofracError):
    """A tangent perturbation inverted the element."""


class SolverError(AnisofracError):
    """Global solve failed (linear factorization or Newton divergence)."""


class GeometryError(AnisofracError, ValueError):
    """Mesh request cannot be honoured."""


class ConfigError(AnisofracError, ValueError):
    """Malformed or invalid job configuration."""

    def __init__(self, message, line=None, key=None, source="<config>"):
        where = source if line is None else f"{source}:{line}"
        if key is not None and not message.startswith(f"{key}:") and repr(key) not in message:
            message = f"{key}: {message}"
        super().__init__(f"{where}: {message}")
        self.line = line
        self.key = key
