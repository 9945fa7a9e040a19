"""Exception hierarchy shared by all patchsynth modules."""


class PatchSynthError(Exception):
    """Base class for every error raised by this package."""

    kind = "error"

    def to_dict(self):
        return {"error": self.kind, "message": str(self)}


class DimensionError(PatchSynthError, ValueError):
    kind = "dimension_error"


class BoundsError(PatchSynthError, IndexError):
    kind = "bounds_error"


class ConfigurationError(PatchSynthError, ValueError):
    kind = "configuration_error"


class NumericalError(PatchSynthError, ArithmeticError):
    """Raised when an iterative solver fails; carries the final residual."""

    kind = "numerical_error"

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual

    def to_dict(self):
        d = super().to_dict()
        if self.residual is not None:
            d["residual"] = float(self.residual)
        return d


class IngestionError(PatchSynthError, ValueError):
    """Malformed input file. ``offset`` is the byte position of the problem."""

    kind = "ingestion_error"

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset

    def to_dict(self):
        d = super().to_dict()
        if self.offset is not None:
            d["offset"] = int(self.offset)
        return d
