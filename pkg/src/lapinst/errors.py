"""Exception hierarchy shared by every stage of the pipeline."""


class LapInstError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(LapInstError, ValueError):
    pass


class BadMagic(LapInstError):
    pass


class UnsupportedVersion(LapInstError):
    pass


class CorruptPayload(LapInstError):
    pass


class InvalidModel(LapInstError, ValueError):
    pass


class MissingAnnotation(LapInstError):
    pass


class UnknownLabelString(LapInstError, ValueError):
    pass


class EmptyInput(LapInstError, ValueError):
    pass


class SingleClassInput(LapInstError, ValueError):
    pass


class RaggedFeatures(LapInstError, ValueError):
    pass


class NoContent(LapInstError):
    """No non-black pixel was found on any image diagonal."""


class OutsideMask(LapInstError, ValueError):
    pass


class NoMaskAnnotations(LapInstError):
    pass


class ModelMismatch(LapInstError, ValueError):
    pass


class DegeneratePoints(LapInstError, ValueError):
    pass


class DegenerateCovariance(LapInstError, ValueError):
    pass


class TooFewSurgeries(LapInstError, ValueError):
    pass


class ConfigError(LapInstError, ValueError):
    pass
