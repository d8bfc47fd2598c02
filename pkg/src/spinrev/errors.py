"""Exception hierarchy."""


class SpinrevError(Exception):
    """Base class for all errors raised by spinrev."""


class ValidationError(SpinrevError, ValueError):
    """Invalid parameters or inputs."""


class SingularInputError(ValidationError):
    """A relaxation time is zero or negative where the signal needs it."""


class DimensionMismatchError(ValidationError):
    """Two rasters (or a raster and its sidecar) disagree on shape."""


class DivergenceError(SpinrevError, RuntimeError):
    """The guided sampler produced non-finite or exploding data fidelity."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class IOFormatError(SpinrevError, OSError):
    """Malformed raster file or sidecar."""


class TruncatedPayloadError(IOFormatError):
    pass


class UnsupportedVersionError(IOFormatError):
    pass


class SidecarDimensionError(IOFormatError, DimensionMismatchError):
    pass
