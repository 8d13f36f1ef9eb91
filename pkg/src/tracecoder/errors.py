"""Exception hierarchy shared across the pipeline.

The CLI maps ``ValidationError`` (and its subclasses) to exit code 1 and
everything else to exit code 2.
"""


class TraceCoderError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(TraceCoderError):
    """Input data or configuration failed validation."""


class ConfigError(ValidationError):
    """A configuration value is inconsistent or unknown."""


class ParseError(ValidationError):
    """A data file could not be parsed."""

    def __init__(self, path, line_no, msg):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {msg}")


class FetchError(TraceCoderError):
    """A remote knowledge client failed after exhausting its retries."""

    def __init__(self, code, detail, msg):
        self.code = code
        self.detail = detail
        super().__init__(msg)


class EncoderError(TraceCoderError):
    """The encoder could not process an input."""


class NoAttendableContent(TraceCoderError):
    """Every position of a document is padding; attention is undefined."""


class TrainingDiverged(TraceCoderError):
    """The training loss became non-finite."""
