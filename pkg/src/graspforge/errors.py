"""Exception hierarchy.

Every error raised on purpose by the library derives from :class:`GraspForgeError`.
The three intermediate classes map onto CLI exit-code categories.
"""


class GraspForgeError(Exception):
    """Base class for all library errors."""


class NumericError(GraspForgeError):
    """A computation cannot proceed on the given numbers."""


class SchemaError(GraspForgeError):
    """An input document does not match its schema."""


class IoError(GraspForgeError):
    """A file could not be read or written."""


# geometry
class DegenerateRotation(NumericError):
    pass


class BehindCamera(NumericError):
    pass


class DegenerateConfiguration(NumericError):
    pass


class DegenerateTriangle(NumericError):
    pass


# meshes
class EmptyMesh(GraspForgeError):
    pass


class InvalidDimensions(GraspForgeError):
    pass


class ParseError(SchemaError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


# forces and solver
class InvalidParameter(GraspForgeError):
    pass


class DimensionMismatch(GraspForgeError):
    pass


class NonFiniteGradient(NumericError):
    pass


class AllAnchorsFrozen(NumericError):
    """No anchor is close enough to the object to carry force."""


# sampling
class OutOfRange(GraspForgeError):
    pass


class StepSizeUnderflow(NumericError):
    pass


class NonFiniteState(NumericError):
    pass


# heatmaps
class BadChannel(GraspForgeError):
    pass


# scenarios
class VersionError(SchemaError):
    pass


class UnknownTemplate(GraspForgeError):
    pass
