"""Exception hierarchy shared by every paraforge module."""


class ParaforgeError(Exception):
    """Base class for all errors raised by the toolkit."""


class ConfigError(ParaforgeError, ValueError):
    """The run configuration failed validation."""


# --- Metrics ---

class MetricError(ParaforgeError, ValueError):
    """A similarity metric received inputs outside its preconditions."""


class EmptyTokenSeqError(MetricError):
    """A text tokenized to zero tokens."""


class OutOfVocabularyError(MetricError):
    """No token of a sequence has an embedding."""


# --- Generation ---

class PromptBudgetError(ParaforgeError, ValueError):
    """Instruction and target alone exceed the context budget."""


class BackendError(ParaforgeError, RuntimeError):
    """A completion backend failed."""

    def __init__(self, message, backend=None):
        super().__init__(message)
        self.backend = backend


class TransientBackendError(BackendError):
    """A backend failure worth retrying (rate limit, 5xx, dropped connection)."""


class GenerationError(ParaforgeError, RuntimeError):
    """Paraphrase generation for one original failed."""

    def __init__(self, message, backend=None):
        super().__init__(f"[{backend}] {message}" if backend else message)
        self.backend = backend


# --- Corpus ---

class CorpusFormatError(ParaforgeError, ValueError):
    """A corpus or annotation file contains a malformed record."""

    def __init__(self, message, path=None, line=None):
        location = f"{path}:{line}: " if path is not None and line is not None else (f"{path}: " if path else "")
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


class DuplicateIdError(CorpusFormatError):
    """A document id occurs twice."""


class SplitError(ParaforgeError, ValueError):
    """A corpus split was requested with invalid ratios or too few pairs."""


# --- Detection / evaluation / annotations ---

class DetectorError(ParaforgeError, ValueError):
    """A detector was trained or applied on invalid input."""


class UnparseableCompletionError(DetectorError):
    """A few-shot completion named neither label."""

    def __init__(self, completion, detector=None):
        super().__init__(f"completion contains no label keyword: {completion[:80]!r}")
        self.completion = completion
        self.detector = detector


class StatsError(ParaforgeError, ValueError):
    """A statistical routine received invalid input."""


class AnnotationError(ParaforgeError, ValueError):
    """Annotation analytics received invalid input."""
