"""Exception types shared across the package."""


class EndoclassError(Exception):
    """Base class for all package errors."""


class ConfigError(EndoclassError):
    """Bad run configuration (unknown key, wrong type, unparsable file)."""


class DataError(EndoclassError):
    """Base for dataset-level problems."""


class EmptyClass(DataError):
    """A class directory contains no usable images."""


class UnknownClassDir(DataError):
    """A directory under the dataset root is not in the supplied class set."""


class UnreadableImage(DataError):
    """A file could not be decoded as an image."""


class TooFewSamples(DataError):
    """A class has too few frames to split."""


class WrongRangeState(EndoclassError):
    """An image tensor is in the wrong value-range state for an operation."""


class ShapeMismatch(EndoclassError):
    """A tensor shape does not match a layer or model configuration."""


class FusionMismatch(EndoclassError):
    """Ensemble backbones disagree on the number of classes."""


class LabelOutOfRange(EndoclassError):
    """A label is outside [0, K)."""


class NonFiniteGradient(EndoclassError):
    """A gradient became NaN or infinite during training.

    Carries the partial epoch history on ``self.history`` when raised
    out of ``fit``.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history if history is not None else []


class CorruptCheckpoint(EndoclassError):
    """Checkpoint file is truncated, has a bad magic, or a bad version."""


class IncompatibleConfig(EndoclassError):
    """Checkpoint does not match the requested class set."""


class DegenerateClass(EndoclassError):
    """ROC requested for a class with no positives or no negatives."""


class PerplexityUnreachable(EndoclassError):
    """Bandwidth search cannot reach the target perplexity (degenerate input)."""


class EmptyHistory(EndoclassError):
    """Asked to render training curves with no epochs recorded."""
