"""Exception types raised across the package."""


class StsError(Exception):
    """Base class for every error raised by stsmesh."""

    code = "error"

    def to_dict(self):
        return {"error": self.code, "message": str(self)}


class InvalidConfigError(StsError):
    code = "invalid-config"


class NumericInputError(StsError):
    code = "numeric-input"


class ShapeError(StsError):
    code = "shape"


class ModelFileError(StsError):
    code = "malformed-file"


class VersionError(StsError):
    code = "version"


class BehindCameraError(StsError):
    code = "behind-camera"

    def __init__(self, indices, message=None):
        self.indices = [int(i) for i in indices]
        super().__init__(message or f"points at or behind the camera plane: {self.indices}")

    def to_dict(self):
        out = super().to_dict()
        out["indices"] = self.indices
        return out


class EmptyEvaluationError(StsError):
    code = "empty-evaluation"


class DegenerateAlignmentError(StsError):
    code = "degenerate-alignment"


class LabelingError(StsError):
    code = "labeling"


class BankValidationError(StsError):
    code = "bank-validation"

    def __init__(self, violations):
        self.violations = list(violations)
        names = ", ".join(f"{cat}[{idx}]" for cat, idx, _ in self.violations)
        super().__init__(f"parameter bank entries outside angle limits: {names}")


class GenerationError(StsError):
    code = "generation"


class InsufficientKeypointsError(StsError):
    code = "insufficient-keypoints"


class ConfigurationError(StsError):
    code = "configuration"


class AbsentPartError(StsError):
    code = "absent-part"


class TrainingDivergenceError(StsError):
    code = "training-divergence"


class DatasetFormatError(StsError):
    code = "dataset-format"

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
