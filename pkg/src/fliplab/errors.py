"""Exception types shared across the package."""


class FliplabError(Exception):
    """Base class for all package errors."""


class ShapeError(FliplabError):
    """Tensor dimensions do not satisfy an operation's contract."""


class ContractError(FliplabError):
    """A precondition on an operation's inputs was violated."""


class LocationError(FliplabError):
    """A bit location does not address a valid attackable coordinate."""


class BlockedBitError(FliplabError):
    """A bit location is on the defense block list."""


class AnnotationError(FliplabError):
    """Optimization-set annotations are inconsistent."""


class FormatError(FliplabError):
    """A serialized artifact is malformed; message names the offending field."""


class CorpusError(FliplabError):
    """Corpus construction or sampling constraints cannot be met."""


class ConfigError(FliplabError):
    """An experiment configuration is invalid."""


class TrainingError(FliplabError):
    """Clean-model training failed to reach its accuracy gate."""
