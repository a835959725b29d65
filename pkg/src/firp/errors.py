"""Exception types shared across the package."""


class FirpError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FirpError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(FirpError):
    """A call violated an API precondition (wrong layer index, bad mask shape, ...)."""


class TrainingError(FirpError):
    """Training produced a non-finite value or was configured inconsistently."""


class VocabularyError(FirpError):
    """A token id falls outside the model vocabulary."""


class CapacityError(FirpError):
    """A sequence would exceed the model's maximum supported length."""


class DataError(FirpError):
    """Input data is empty or too short for the requested operation."""


class TemplateError(FirpError):
    """A draft-tree template is malformed (bad parent links, duplicate children, ...)."""


class TableError(FirpError):
    """A template refers to steps or ranks missing from an accuracy table."""


class ParameterError(FirpError):
    """A numeric parameter is out of its valid range."""


class CheckpointError(FirpError):
    """A checkpoint file is malformed or has an unsupported version."""


class DependencyError(FirpError):
    """A pipeline stage was requested before the stages it depends on."""
