"""Thresholding and Jaccard-index evaluation of binary masks."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor


class DomainError(ValueError):
    """Input values outside the documented domain."""


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def binarize(yhat, threshold: float = 0.5) -> Tensor:
    """Map probabilities in [0, 1] to a strict {0, 1} mask.

    The comparison is >=, so a value exactly at the threshold becomes
    foreground.
    """
    arr = _as_array(yhat)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise DomainError("binarize input must lie in [0, 1]")
    return Tensor((arr >= threshold).astype(arr.dtype if arr.dtype.kind == "f" else np.float64))


def _check_binary(arr: np.ndarray, label: str) -> None:
    if not np.isin(arr, (0.0, 1.0)).all():
        raise DomainError(f"{label} mask must contain only 0 and 1")


def jaccard(a, b) -> float:
    """|A intersect B| / |A union B| over two binary masks.

    Two entirely empty masks agree perfectly (1.0); an empty mask against a
    nonempty one scores 0.0, so a blank prediction is never rewarded.
    """
    aa, bb = _as_array(a), _as_array(b)
    if aa.shape != bb.shape:
        raise ShapeError(f"mask shapes differ: {aa.shape} vs {bb.shape}")
    _check_binary(aa, "first")
    _check_binary(bb, "second")
    fa = aa > 0.5
    fb = bb > 0.5
    intersection = int(np.count_nonzero(fa & fb))
    union = int(np.count_nonzero(fa | fb))
    if union == 0:
        return 1.0
    return intersection / union


def as_percent(x: float) -> float:
    """Fractional metric value scaled for percentage-style reporting."""
    return 100.0 * x
