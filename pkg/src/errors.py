"""
Exception hierarchy shared by every ConsistencyDet module
"""


class ConsistencyDetError(Exception):
    """Base class for all errors raised by this package"""


class DomainError(ConsistencyDetError, ValueError):
    """An argument lies outside the domain an operation is defined on"""


class ShapeError(ConsistencyDetError, ValueError):
    """Tensor shapes that must agree do not"""


class ConfigError(ConsistencyDetError):
    """Invalid configuration; `key` names the offending dotted path"""

    def __init__(self, message: str, key: str = ""):
        super().__init__(message)
        self.key = key


class DatasetError(ConsistencyDetError):
    """A dataset or annotation file could not be read or is malformed"""


class CheckpointError(ConsistencyDetError):
    """A checkpoint blob is missing, unreadable or of an unknown format"""


class EvaluationError(ConsistencyDetError):
    """Detections and ground truth cannot be evaluated together"""


class TrainingDivergedError(ConsistencyDetError):
    """The training loss became NaN or infinite"""

    def __init__(self, message: str, record: dict = None):
        super().__init__(message)
        self.record = record or {}
