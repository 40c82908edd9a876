"""Exception hierarchy shared by all acnn modules."""


class AcnnError(Exception):
    """Base class for every error raised by this package."""


# dsp_frontend
class SampleRateMismatch(AcnnError):
    pass


class EmptyAudio(AcnnError):
    pass


class InvalidConfig(AcnnError, ValueError):
    pass


# numeric core / model
class ShapeMismatch(AcnnError, ValueError):
    pass


class EmptySequence(AcnnError, ValueError):
    pass


class InvalidLabel(AcnnError, ValueError):
    pass


class NonFiniteError(AcnnError, FloatingPointError):
    pass


class EmptyDataset(AcnnError, ValueError):
    pass


# corpus
class OutOfRange(AcnnError, ValueError):
    pass


class EmptyTurn(AcnnError, ValueError):
    pass


class ManifestError(AcnnError):
    pass


class ParseError(ManifestError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateId(ManifestError):
    pass


class MissingField(ManifestError):
    pass


# experiments
class EmptyClass(AcnnError, ValueError):
    pass


class BadSessionStructure(AcnnError, ValueError):
    pass


class InsufficientSpeakers(AcnnError, ValueError):
    pass


class PlanInvalid(AcnnError, ValueError):
    pass


class MissingFeatures(AcnnError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class PoolTooSmall(AcnnError, ValueError):
    pass


# attention analysis
class EmptyInput(AcnnError, ValueError):
    pass


class MissingCueMetadata(AcnnError, KeyError):
    def __str__(self):
        return Exception.__str__(self)
