"""Exception types raised by the model, cache, training, and decoding layers."""


class OrthrusError(Exception):
    """Base class for all package-specific errors."""


class CacheOverflowError(OrthrusError):
    """Committing more positions than the KV cache has capacity for."""


class InvalidTokenError(OrthrusError):
    """A token id outside the legal input range (e.g. the mask token fed to the AR path)."""


class StaleCacheError(OrthrusError):
    """The KV cache does not hold exactly the context preceding a diffusion block."""


class BlockSizeError(OrthrusError):
    """A parallel block longer than the configured block size."""


class TruncationError(OrthrusError):
    """Cache truncation target exceeds the committed length."""


class SequenceTooShortError(OrthrusError):
    """A sequence too short to place a single anchor block."""


class DivergenceError(OrthrusError):
    """Training loss became non-finite."""


class LosslessnessViolationError(OrthrusError):
    """Accelerated decoding produced output different from the sequential baseline at T=0."""


class ZeroPassesError(OrthrusError):
    """Throughput requested for a run with zero decode passes."""
