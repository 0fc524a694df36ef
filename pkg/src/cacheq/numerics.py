"""Small dense-array kernels shared by the rest of the package.

Everything below delegates the heavy lifting to numpy, but every entry point
validates shapes and finiteness up front so failures surface at the call site
instead of deep inside a pipeline run. All reductions use a single fixed
evaluation order, so repeated calls on identical inputs are bit-stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "ChannelStats",
    "as_matrix",
    "matmul",
    "channel_stats",
    "l1_mean_distance",
]


class ShapeError(ValueError):
    """Raised when an array argument has the wrong rank or dimensions."""


def as_matrix(x, name: str = "array") -> np.ndarray:
    """Coerce ``x`` to a 2-d float64 ndarray, rejecting non-finite content."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite values")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product a @ b with explicit dimension checking.

    Rejects rank != 2 and inner-dimension mismatches, reporting both shapes.
    """
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"inner dimensions do not match: {a.shape} @ {b.shape}"
        )
    return a @ b


@dataclass(frozen=True)
class ChannelStats:
    """Per-column mean and population variance of a matrix."""

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        if self.means.shape != self.variances.shape or self.means.ndim != 1:
            raise ShapeError(
                f"means/variances must be matching vectors, got "
                f"{self.means.shape} and {self.variances.shape}"
            )
        if (self.variances < 0.0).any():
            raise ValueError("variance must be non-negative")


def channel_stats(x) -> ChannelStats:
    """Column-wise mean and population variance (denominator n, not n-1).

    Uses the two-pass formula (subtract the mean, then average the squared
    deviations), which keeps tiny variances from going negative.
    """
    x = as_matrix(x, "samples")
    if x.shape[0] < 1:
        raise ShapeError("need at least one row to compute channel stats")
    means = x.mean(axis=0)
    centered = x - means[None, :]
    variances = np.mean(centered * centered, axis=0)
    # Guard against -0.0 or rounding slightly below zero on flat columns.
    variances = np.maximum(variances, 0.0)
    return ChannelStats(means=means, variances=variances)


def l1_mean_distance(x, y) -> float:
    """Mean absolute elementwise difference between two same-shape arrays.

    The mean (rather than the sum) keeps the value comparable across feature
    sizes; for a fixed shape the two differ only by a constant factor, so
    argmin-style consumers are unaffected.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.size == 0:
        raise ShapeError("empty arrays have no distance")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("inputs contain non-finite values")
    return float(np.mean(np.abs(x - y)))
