"""Exception hierarchy.

Every error raised on purpose by the package derives from ``TriageError`` so
callers (the CLI in particular) can map it to a data-error exit status.
"""


class TriageError(Exception):
    """Base class for expected, data-dependent failures."""

    @property
    def kind(self) -> str:
        return type(self).__name__


# PE parsing
class PeError(TriageError):
    pass


class NotPe(PeError):
    pass


class Truncated(PeError):
    pass


class MalformedHeader(PeError):
    pass


# schema / vectors
class SchemaError(TriageError):
    pass


class SchemaMismatch(SchemaError):
    pass


class DimensionMismatch(TriageError):
    pass


# models
class DegenerateData(TriageError):
    pass


class DegenerateProjection(DegenerateData):
    pass


class EmptyClass(TriageError):
    pass


class InvalidContamination(TriageError, ValueError):
    pass


# evaluation
class TooFewSamples(TriageError):
    pass


class EmptyMatrix(TriageError):
    pass


class EmptyGrid(TriageError):
    pass


# store
class MalformedRow(TriageError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class DuplicateHash(TriageError):
    pass


class HashMismatch(TriageError):
    pass


class VersionMismatch(TriageError):
    pass


class CorruptContainer(TriageError):
    pass
