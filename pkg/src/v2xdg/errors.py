"""Exception hierarchy shared across the package."""


class V2XDGError(Exception):
    """Base class for every error raised by this package."""


# point clouds and scenes

class MalformedRecord(V2XDGError, ValueError):
    pass


class NonFiniteValue(V2XDGError, ValueError):
    def __init__(self, index: int, message: str = ""):
        self.index = index
        super().__init__(message or f"non-finite value in record {index}")


class SchemaViolation(V2XDGError, ValueError):
    pass


class MissingEgo(V2XDGError, ValueError):
    pass


class DuplicateAgentId(V2XDGError, ValueError):
    pass


class IntensityClampWarning(UserWarning):
    """Emitted when loaded intensities fall outside [0, 1] and get clamped."""

    def __init__(self, count: int, path: str = ""):
        self.count = count
        super().__init__(f"{count} intensity value(s) clamped to [0, 1] in {path or '<cloud>'}")


# parameters and shapes

class InvalidParams(V2XDGError, ValueError):
    pass


class InvalidGrid(V2XDGError, ValueError):
    pass


class GridMismatch(V2XDGError, ValueError):
    pass


class ShapeMismatch(V2XDGError, ValueError):
    pass


# losses

class EmptyBatch(V2XDGError, ValueError):
    pass


class NonUnitEmbedding(V2XDGError, ValueError):
    pass


class NonFiniteInput(V2XDGError, ValueError):
    pass


# toy pipeline / gradient checks

class EmptyAgentList(V2XDGError, ValueError):
    pass


class UnknownTarget(V2XDGError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown target"


class InvalidStep(V2XDGError, ValueError):
    pass


# evaluation

class DegenerateBox(V2XDGError, ValueError):
    pass
