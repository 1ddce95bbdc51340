"""Exception types shared across the package."""


class SketchAnimError(Exception):
    """Base class for all package errors."""


class DimensionError(SketchAnimError):
    """Operand shapes are incompatible.  Message names both shapes."""


class UnknownGraphError(SketchAnimError):
    """A gradient was requested for a computation id that was never recorded."""


class VocabularyError(SketchAnimError):
    """A prompt token is not part of the model vocabulary."""


class RankError(SketchAnimError):
    """A low-rank adapter rank is not strictly below min(h1, h2)."""


class OverrideError(SketchAnimError):
    """An attention score override produced the wrong shape.  Names the site."""


class SiteError(SketchAnimError):
    """Composition inputs do not match the attention site they target."""


class ConfigError(SketchAnimError):
    """A configuration value is out of its documented range."""


class StepRangeError(SketchAnimError):
    """A sampling-step counter lies outside the window an operation covers."""


class AlignmentError(SketchAnimError):
    """Frame alignment hit a non-finite loss or gradient.  Names the iteration."""


class TrainingError(SketchAnimError):
    """Training diverged or was asked to run on unusable data."""


class UndecidableError(SketchAnimError):
    """The motion oracle cannot classify a clip (e.g. blank frames)."""


class PipelineError(SketchAnimError):
    """A sampling run produced non-finite state.  Names the failing step."""


class FormatError(SketchAnimError):
    """A file does not parse as the format it claims to be."""
