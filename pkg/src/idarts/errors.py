"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A model, schedule or experiment configuration is inconsistent."""


class StateError(RuntimeError):
    """An operation was requested before its prerequisites exist."""


class IngestionError(ValueError):
    """A stored dataset does not match its manifest."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class StageError(RuntimeError):
    """A stage of the per-task cycle failed."""

    def __init__(self, stage, task, cause):
        super().__init__(f"task {task}: stage '{stage}' failed: {cause}")
        self.stage = stage
        self.task = task
        self.cause = cause
