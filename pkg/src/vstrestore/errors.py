"""Exception hierarchy shared by the library and the command line."""


class VstRestoreError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(VstRestoreError, ValueError):
    """Invalid parameter, unknown config key or violated precondition."""


class ImageFormatError(VstRestoreError):
    """Malformed, missing or inconsistent image file."""


class PipelineError(VstRestoreError):
    """A restoration stage failed; ``stage`` names the failing block."""

    def __init__(self, stage, message):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class MetricError(VstRestoreError, ValueError):
    """A figure of merit was requested on data violating its preconditions."""


class TrainingDivergence(VstRestoreError):
    """Gradient descent blew up (loss grew far beyond its starting value)."""
