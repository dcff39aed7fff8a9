"""Exception hierarchy. InputError subclasses map to CLI exit code 2."""


class CellsegError(Exception):
    pass


class InputError(CellsegError):
    """Bad user input: malformed files, mismatched dimensions, bad flags."""


class DimensionMismatch(InputError):
    pass


class SizeMismatch(InputError):
    """RLE counts do not sum to height * width."""


class MalformedRuns(InputError):
    """Negative or interior zero-length run in an RLE."""


class EmptyInput(InputError):
    pass


class MissingReference(InputError):
    pass


class FewerThanTwoSets(InputError):
    pass


class UnknownImageId(InputError):
    pass


class SchemaViolation(InputError):
    pass


class MissingMask(InputError):
    pass


class UnexpectedLabelValue(InputError):
    pass


class DegenerateTransform(InputError):
    pass


class PlacementFailure(CellsegError):
    """Synthetic cell placement exhausted its retry budget."""


class IoFailure(CellsegError):
    pass


class InternalError(CellsegError):
    """Invariant violation inside the library; CLI exit code 3."""
