"""Exception types shared across the package."""


class DistError(Exception):
    """Base class; ``code`` is the machine-greppable tag printed by the CLI."""

    code = "E_DIST"


class ParameterError(DistError, ValueError):
    code = "E_PARAM"

    def __init__(self, field: str, reason: str):
        self.field = field
        super().__init__(f"{field}: {reason}")


class ClassCoverageError(DistError, ValueError):
    code = "E_CLASS_COVERAGE"


class LabelQuarantineError(DistError, PermissionError):
    code = "E_QUARANTINE"


class ValidationError(DistError, ValueError):
    code = "E_VALIDATION"


class TrainingError(DistError, RuntimeError):
    code = "E_TRAINING"


class ConfigError(DistError, ValueError):
    code = "E_CONFIG"

    def __init__(self, key: str, reason: str):
        self.key = key
        super().__init__(f"{key}: {reason}")


class ArtifactError(DistError, FileNotFoundError):
    code = "E_ARTIFACT"


class StageError(DistError, RuntimeError):
    """Wraps an error raised inside a pipeline stage with the stage name."""

    code = "E_STAGE"

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
