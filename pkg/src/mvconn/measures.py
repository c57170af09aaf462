"""Univariate and multivariate dependence measures between ROIs.

The univariate path summarizes a region by one representative time series
(voxel average or leading principal component) and correlates the
summaries.  The multivariate path compares the full voxel-by-time matrices
through distance correlation computed over the time samples.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .core import DegenerateDataWarning, ValidationError, roi_array

REPRESENTATIVE_METHODS = ("mean", "first-pc")


@dataclass(frozen=True)
class Representative:
    """Univariate summary of one ROI: a single time series plus its method tag."""

    series: np.ndarray
    method: str


def representative(x, method="mean"):
    """Summarize an ROI by one time series.

    ``mean`` averages across voxels.  ``first-pc`` projects the data onto
    the leading principal direction over voxels (eigenvector of the n-by-n
    voxel covariance taken over time samples).  Eigenvectors are only
    defined up to sign, so the projection is flipped, when necessary, to
    correlate nonnegatively with the voxel average; this makes the result
    reproducible and permutation invariant whenever that correlation is
    nonzero.

    Parameters
    ----------
    x : RoiMatrix or (n, t) array_like
    method : {"mean", "first-pc"}

    Returns
    -------
    Representative
    """
    arr = roi_array(x)
    if arr.shape[1] < 2:
        raise ValidationError("representative needs at least 2 time points")
    if method == "mean":
        return Representative(arr.mean(axis=0), "mean")
    if method != "first-pc":
        raise ValidationError(f"unknown representative method {method!r}")

    centered = arr - arr.mean(axis=1, keepdims=True)
    u, s, _ = np.linalg.svd(centered, full_matrices=False)
    if s[0] == 0.0:
        warnings.warn(
            "ROI has no temporal variance; first-pc representative is zero",
            DegenerateDataWarning,
            stacklevel=2,
        )
        return Representative(np.zeros(arr.shape[1]), "first-pc")
    direction = u[:, 0]
    series = direction @ arr
    mean_series = arr.mean(axis=0)
    alignment = np.dot(series - series.mean(), mean_series - mean_series.mean())
    if alignment < 0.0:
        series = -series
    return Representative(series, "first-pc")


def pearson(x, y):
    """Empirical Pearson correlation of two equal-length series.

    Computed with the centered covariance over the centered norms, which on
    z-scored inputs reduces to the normalized inner product.  A constant
    input has no defined correlation; by convention the value is 0 and a
    :class:`DegenerateDataWarning` is emitted.

    Returns
    -------
    float in [-1, 1]
    """
    xv = np.asarray(x, dtype=np.float64).ravel()
    yv = np.asarray(y, dtype=np.float64).ravel()
    if xv.size != yv.size:
        raise ValidationError(f"length mismatch: {xv.size} vs {yv.size}")
    if xv.size < 2:
        raise ValidationError("need at least 2 samples")
    xc = xv - xv.mean()
    yc = yv - yv.mean()
    den = np.sqrt(np.dot(xc, xc) * np.dot(yc, yc))
    if den == 0.0:
        warnings.warn(
            "constant input to pearson; returning 0 by convention",
            DegenerateDataWarning,
            stacklevel=2,
        )
        return 0.0
    return float(np.clip(np.dot(xc, yc) / den, -1.0, 1.0))


def double_center(d):
    """Double-center a symmetric pairwise-distance matrix.

    Subtracts row means and column means and adds back the grand mean, so
    every row and column of the result sums to zero.

    Parameters
    ----------
    d : (t, t) array_like
        Symmetric, nonnegative, zero diagonal.

    Returns
    -------
    (t, t) ndarray
    """
    a = np.asarray(d, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"distance matrix must be square, got {a.shape}")
    if not np.array_equal(a, a.T):
        raise ValidationError("distance matrix must be symmetric")
    row_means = a.mean(axis=1, keepdims=True)
    col_means = a.mean(axis=0, keepdims=True)
    return a - row_means - col_means + a.mean()


def _sample_distances(arr):
    """Euclidean distances between the t time samples (columns) of an ROI."""
    samples = arr.T
    d = cdist(samples, samples)
    # exact symmetry regardless of the backend's evaluation order
    return (d + d.T) / 2.0


def dcor(x, y):
    """Empirical distance correlation between two ROIs sharing a time axis.

    The t time samples are the paired observations; voxels are the
    coordinates, so the two ROIs may have different voxel counts.  Built
    from the double-centered t-by-t Euclidean distance matrices A and B:
    the distance covariance is the mean of ``A * B``, the distance variances
    are the means of the squared centered matrices, and the returned value
    is their normalized ratio.  When either distance variance vanishes
    (all time samples identical) the value is 0 by convention.

    Returns
    -------
    float in [0, 1]
    """
    xa = roi_array(x)
    ya = roi_array(y)
    if xa.shape[1] != ya.shape[1]:
        raise ValidationError(
            f"time axis mismatch: {xa.shape[1]} vs {ya.shape[1]} time points"
        )
    if xa.shape[1] < 2:
        raise ValidationError("need at least 2 time samples")
    a = double_center(_sample_distances(xa))
    b = double_center(_sample_distances(ya))
    dcov2 = float((a * b).mean())
    dvar2_x = float((a * a).mean())
    dvar2_y = float((b * b).mean())
    if dvar2_x * dvar2_y <= 0.0:
        return 0.0
    return float(np.clip(dcov2 / np.sqrt(dvar2_x * dvar2_y), 0.0, 1.0))
