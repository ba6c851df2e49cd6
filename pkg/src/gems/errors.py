"""Exception hierarchy.

``ValidationError`` subclasses signal bad inputs or configuration (CLI exit
code 2); everything else derived from ``GemsError`` is a runtime failure.
"""


class GemsError(Exception):
    pass


class ValidationError(GemsError):
    pass


# graph-core
class DuplicateResponse(ValidationError):
    pass


class UnknownChoice(ValidationError):
    pass


class SingleOptionQuestion(ValidationError):
    pass


class MalformedInput(ValidationError):
    pass


class InsufficientIndividuals(ValidationError):
    pass


class InsufficientQuestions(ValidationError):
    pass


class EmptyEdgeSet(ValidationError):
    pass


# encoder / decoder
class DimensionMismatch(ValidationError):
    pass


class EmptyGraph(ValidationError):
    pass


class NonFiniteActivation(GemsError):
    pass


class NonPositiveTemperature(ValidationError):
    pass


class MissingEmbedding(GemsError):
    pass


# optim
class TapeMismatch(GemsError):
    pass


class StepOutOfRange(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


# projection
class MalformedFile(ValidationError):
    pass


class InconsistentDimension(ValidationError):
    pass


class SingularSystem(GemsError):
    pass


class NoValidationQuestions(ValidationError):
    pass


# evalreport
class EmptyTargets(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class DegenerateData(ValidationError):
    pass


# cli
class MissingArtifact(ValidationError):
    pass


class ConfigConflict(ValidationError):
    pass
