"""
Exception hierarchy for the phase recognition lab.
Library code raises these; only the CLI turns them into exit codes.
"""


class PhaseLabError(Exception):
    """Base class for all lab errors"""
    exit_code = 1


class ConfigError(PhaseLabError):
    """Invalid configuration, unknown option or missing path"""
    exit_code = 2


class BackboneError(ConfigError):
    """Unsupported backbone name or unusable weights file"""


class DataError(PhaseLabError):
    """Malformed annotations, missing frames or missing cache entries"""
    exit_code = 3


class CacheFormatError(DataError):
    """Feature cache file with a bad header, version or size"""


class ShapeMismatchError(PhaseLabError, ValueError):
    """Tensor dimensions that do not agree"""
    exit_code = 3


class TrainingError(PhaseLabError):
    """Training aborted on a non-finite loss"""
    exit_code = 4

    def __init__(self, message, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


class EvaluationError(PhaseLabError):
    """Prediction files that cannot be scored"""
    exit_code = 5
