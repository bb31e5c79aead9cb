"""Error types raised across geostack.

Every error carries a stable ``code`` so the command line surface can print a
single machine-parsable line (``E_FUSION: ...``) and pick an exit status.
"""


class GeoStackError(Exception):
    code = "E_RUNTIME"

    def __init__(self, message, *, code=None):
        self.message = message
        if code is not None:
            self.code = code
        super().__init__(self.message)

    def __str__(self):
        return self.message


class ShapeError(GeoStackError):
    code = "E_SHAPE"


class EvaluationError(GeoStackError):
    code = "E_EVAL"


class ArgumentError(GeoStackError, ValueError):
    code = "E_ARGUMENT"


class AlignmentError(GeoStackError):
    code = "E_ALIGNMENT"


class ResolutionError(GeoStackError):
    code = "E_RESOLUTION"


class SamplingError(GeoStackError):
    code = "E_SAMPLING"


class ConfigError(GeoStackError, ValueError):
    code = "E_CONFIG"

    error_messages = {
        "unknown_key": "unknown key",
        "invalid_type": "invalid type",
        "invalid_value": "invalid value",
        "missing": "this field is required",
    }

    def __init__(self, message, *, field=None, reason="invalid_value"):
        self.field = field
        self.reason = reason
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class FusionError(GeoStackError):
    code = "E_FUSION"


class SequenceError(GeoStackError):
    code = "E_SEQUENCE"


class LossError(GeoStackError):
    code = "E_LOSS"


class TrainingError(GeoStackError):
    code = "E_TRAINING"

    def __init__(self, message, *, step=None):
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


class ChecksumError(GeoStackError):
    code = "E_CHECKSUM"


class GenerationError(GeoStackError):
    code = "E_GENERATION"


class MetricError(GeoStackError):
    code = "E_METRIC"


class FileError(GeoStackError):
    code = "E_FILE"
