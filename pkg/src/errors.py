"""Exception hierarchy; every error carries a short machine-readable code."""


class BenchError(Exception):
    """Base class for all pipeline errors."""

    code = "error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def one_line(self) -> str:
        text = " ".join(self.message.split())
        return f"error: {self.code}: {text}"


class ConfigError(BenchError):
    code = "config"


class BundleError(BenchError):
    code = "bundle"


class SubsetError(BenchError):
    code = "subset"


class FilterDesignError(BenchError):
    code = "filter"


class SignalTooShortError(BenchError):
    code = "signal_too_short"


class FeatureError(BenchError):
    code = "features"


class ModelError(BenchError):
    code = "model"


class TaskUnavailableError(BenchError):
    code = "task_unavailable"


class EvaluationError(BenchError):
    code = "evaluation"
