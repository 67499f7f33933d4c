"""Exception hierarchy shared by every concept_forge module."""


class ConceptForgeError(Exception):
    """Base class for all library errors."""


class MalformedFile(ConceptForgeError):
    pass


class NonFiniteValue(ConceptForgeError):
    def __init__(self, row, col, value=None):
        self.row = row
        self.col = col
        super().__init__(f"non-finite value {value!r} at row {row}, column {col}")


class AlreadyCentered(ConceptForgeError):
    pass


class NonCentered(ConceptForgeError):
    pass


class EmptyAttribute(ConceptForgeError):
    pass


class EmptyConcept(ConceptForgeError):
    pass


class InvalidSpec(ConceptForgeError, ValueError):
    pass


class DegenerateData(ConceptForgeError):
    pass


class SingleCluster(ConceptForgeError):
    pass


class InsufficientSamples(ConceptForgeError):
    pass


class RankDeficient(ConceptForgeError):
    pass


class ZeroVector(ConceptForgeError):
    def __init__(self, message, indices=None):
        self.indices = indices
        super().__init__(message)


class DidNotConverge(ConceptForgeError):
    """Raised only on request; solvers normally return a flag instead."""


class UnmatchedConcept(ConceptForgeError):
    pass


class NoPositives(ConceptForgeError):
    pass


class OneClassOnly(ConceptForgeError):
    pass


class FewerLearnedThanGT(ConceptForgeError):
    pass


class MissingRuns(ConceptForgeError):
    pass


class NearZeroConceptWarning(UserWarning):
    """A concept vector was normalized from a near-zero mean."""
