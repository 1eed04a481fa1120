"""Exception hierarchy shared by every bevlab module."""

from __future__ import annotations


class BevlabError(Exception):
    """Base class for all errors raised by bevlab."""


class DimensionError(BevlabError, ValueError):
    """Shape, dtype or channel count does not match what an operation needs."""


class TensorFormatError(BevlabError, ValueError):
    """A tensor file, box file or manifest could not be parsed."""


class OutOfExtentError(BevlabError, ValueError):
    """A box footprint lies entirely outside the BEV grid."""


class BoundsError(BevlabError, IndexError):
    """An index, anchor or position falls outside its container."""


class ValidationError(BevlabError, ValueError):
    """An input or parameter violates a documented precondition."""


class DegenerateEmbeddingError(BevlabError, ValueError):
    """An instance embedding has (near) zero norm."""


class InsufficientNegativesError(BevlabError, ValueError):
    """The contrastive loss needs at least two instances."""


class EmptyInstanceError(BevlabError, ValueError):
    """No box produced a valid anchor."""


class EmptyBatchError(BevlabError, ValueError):
    """A loss was asked to reduce over an empty batch."""


class EmptyBankError(BevlabError, ValueError):
    """GT sampling was requested from an empty instance bank."""


class PlacementError(BevlabError, RuntimeError):
    """Synthetic scene generation could not place objects without overlap."""


class MemoryGuardError(BevlabError, MemoryError):
    """An explicit score matrix would exceed the configured element limit."""


class NonFiniteError(BevlabError, FloatingPointError):
    """A loss, gradient or reported metric is NaN or infinite."""


class EncoderKindError(BevlabError, TypeError):
    """A teacher encoder was used where a student was expected, or vice versa."""


class GradientCheckError(BevlabError, AssertionError):
    """An analytical gradient disagrees with finite differences."""
