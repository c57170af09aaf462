"""Shared data containers, validation and array helpers.

Everything downstream (dependence measures, transport solvers, the pairwise
engine) works on the containers defined here.  All operations are pure
functions over read-only inputs and are safe to call concurrently.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

CORRELATION_MEASURES = ("pearson-mean", "pearson-1pc", "dcor")
DISTANCE_MEASURES = ("wfc-exact", "wfc-sinkhorn")
MEASURE_TAGS = CORRELATION_MEASURES + DISTANCE_MEASURES

DIAGONAL_SIMILARITY = "similarity-one"
DIAGONAL_DISTANCE = "distance-zero"


class DegenerateDataWarning(UserWarning):
    """Signals degenerate but tolerable input (dead voxels, constant series)."""


class ValidationError(ValueError):
    """Raised when a container violates its structural contract."""


def roi_array(x):
    """Return the underlying (n_voxels, t) float array of an ROI.

    Accepts a :class:`RoiMatrix` or anything convertible to a 2-D float
    array, so the numeric routines can be fed plain arrays in tests.
    """
    data = x.data if isinstance(x, RoiMatrix) else x
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"expected a 2-D voxel-by-time array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class RoiMatrix:
    """One region's multivariate signal.

    Rows are voxels, columns are time points.  Voxel counts may differ
    between regions but the number of time points must be shared across a
    scan.
    """

    data: np.ndarray
    roi_id: int = 0

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"RoiMatrix data must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 2:
            raise ValidationError(
                f"RoiMatrix needs >=1 voxel and >=2 time points, got shape {arr.shape}"
            )
        object.__setattr__(self, "data", arr)

    @property
    def n_voxels(self):
        return self.data.shape[0]

    @property
    def n_timepoints(self):
        return self.data.shape[1]


@dataclass(frozen=True)
class SubjectScan:
    """Ordered ROI matrices of one subject plus a binary diagnostic label.

    ROI order is part of the dataset contract: it must be identical for
    every subject that enters the same analysis.
    """

    rois: tuple
    label: int = 0
    subject_id: str = ""

    def __post_init__(self):
        rois = tuple(
            r if isinstance(r, RoiMatrix) else RoiMatrix(r, roi_id=i)
            for i, r in enumerate(self.rois)
        )
        object.__setattr__(self, "rois", rois)
        object.__setattr__(self, "label", int(self.label))

    @property
    def n_rois(self):
        return len(self.rois)

    @property
    def n_timepoints(self):
        return self.rois[0].n_timepoints if self.rois else 0


@dataclass(frozen=True)
class ConnectivityMatrix:
    """Symmetric pairwise-dependence (or distance) matrix for one subject."""

    values: np.ndarray
    measure: str
    diagonal_convention: str = ""

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValidationError(f"connectivity matrix must be square, got shape {arr.shape}")
        if self.measure not in MEASURE_TAGS:
            raise ValidationError(f"unknown measure tag {self.measure!r}")
        convention = self.diagonal_convention or diagonal_convention_for(self.measure)
        if convention not in (DIAGONAL_SIMILARITY, DIAGONAL_DISTANCE):
            raise ValidationError(f"unknown diagonal convention {convention!r}")
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "diagonal_convention", convention)

    @property
    def n_rois(self):
        return self.values.shape[0]

    def check(self, strict=True):
        """Verify the measure-specific invariants; return a list of problems.

        With ``strict`` the first violation raises :class:`ValidationError`.
        """
        issues = []
        v = self.values
        if not np.all(np.isfinite(v)):
            issues.append("non-finite entries")
        if not np.array_equal(v, v.T):
            issues.append("matrix is not exactly symmetric")
        diag = np.diag(v)
        if self.diagonal_convention == DIAGONAL_SIMILARITY:
            if not np.all(diag == 1.0):
                issues.append("diagonal must be exactly 1")
            lo = 0.0 if self.measure == "dcor" else -1.0
            if v.size and (v.min() < lo - 0.0 or v.max() > 1.0):
                issues.append(f"entries outside [{lo}, 1]")
        else:
            if not np.all(diag == 0.0):
                issues.append("diagonal must be exactly 0")
            if v.size and v.min() < 0.0:
                issues.append("negative distance entries")
        if strict and issues:
            raise ValidationError(f"invalid {self.measure} matrix: " + "; ".join(issues))
        return issues


@dataclass(frozen=True)
class FeatureVector:
    """Strict upper triangle of a connectivity matrix, row-major order."""

    values: np.ndarray
    measure: str = ""

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64).ravel()
        n = n_rois_for_feature_length(arr.size)
        if n is None:
            raise ValidationError(f"length {arr.size} is not N(N-1)/2 for any integer N >= 2")
        object.__setattr__(self, "values", arr)

    @property
    def n_rois(self):
        return n_rois_for_feature_length(self.values.size)


def n_rois_for_feature_length(length):
    """Invert F = N(N-1)/2; return N or None when no integer solution exists."""
    n = int(round((1.0 + np.sqrt(1.0 + 8.0 * float(length))) / 2.0))
    if n >= 2 and n * (n - 1) // 2 == length:
        return n
    return None


def diagonal_convention_for(measure):
    """Diagonal convention implied by a measure tag: 1 for correlations, 0 for distances."""
    if measure in CORRELATION_MEASURES:
        return DIAGONAL_SIMILARITY
    if measure in DISTANCE_MEASURES:
        return DIAGONAL_DISTANCE
    raise ValidationError(f"unknown measure tag {measure!r}")


def zscore_rows(m):
    """Standardize every row to zero mean and unit population variance.

    Rows with zero variance become all-zero rows; each such row emits a
    :class:`DegenerateDataWarning` instead of failing, because real
    parcellations contain dead voxels.  Population (1/t) variance is used
    so that standardized rows have exact unit norm ``sqrt(t)``.

    Parameters
    ----------
    m : RoiMatrix or (n, t) array_like

    Returns
    -------
    Same kind as the input (RoiMatrix in, RoiMatrix out).
    """
    arr = roi_array(m)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("cannot z-score non-finite data")
    mean = arr.mean(axis=1, keepdims=True)
    std = arr.std(axis=1, keepdims=True)  # population (1/t) variance
    dead = std[:, 0] == 0.0
    if np.any(dead):
        warnings.warn(
            f"{int(dead.sum())} constant row(s) standardized to zero",
            DegenerateDataWarning,
            stacklevel=2,
        )
    out = np.where(dead[:, None], 0.0, (arr - mean) / np.where(std == 0.0, 1.0, std))
    if isinstance(m, RoiMatrix):
        return RoiMatrix(out, roi_id=m.roi_id)
    return out


def vectorize_upper(c):
    """Vectorize the strict upper triangle (row-major, i < j).

    The input must be exactly symmetric: connectivity matrices are computed
    once per pair and mirrored, so any discrepancy indicates corruption.

    Parameters
    ----------
    c : ConnectivityMatrix or square array_like

    Returns
    -------
    FeatureVector
    """
    values = c.values if isinstance(c, ConnectivityMatrix) else np.asarray(c, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {values.shape}")
    n = values.shape[0]
    if n < 2:
        raise ValidationError("need at least 2 ROIs to vectorize")
    if not np.array_equal(values, values.T):
        raise ValidationError("matrix is not exactly symmetric")
    iu, ju = np.triu_indices(n, k=1)
    measure = c.measure if isinstance(c, ConnectivityMatrix) else ""
    return FeatureVector(values[iu, ju].copy(), measure=measure)


def symmetric_from_upper(values, diagonal=1.0):
    """Rebuild the symmetric matrix whose strict upper triangle is ``values``.

    Inverse of :func:`vectorize_upper` for a given diagonal constant.
    """
    vec = values.values if isinstance(values, FeatureVector) else np.asarray(values, float).ravel()
    n = n_rois_for_feature_length(vec.size)
    if n is None:
        raise ValidationError(f"length {vec.size} is not a valid upper-triangle size")
    out = np.full((n, n), float(diagonal))
    iu, ju = np.triu_indices(n, k=1)
    out[iu, ju] = vec
    out[ju, iu] = vec
    return out


@dataclass(frozen=True)
class ScanReport:
    """Outcome of :func:`validate_scan`; carries failures instead of raising."""

    ok: bool
    n_rois: int
    n_timepoints: int | None
    roi_shapes: tuple
    issues: tuple = field(default_factory=tuple)

    def __str__(self):
        status = "ok" if self.ok else "FAILED"
        head = f"scan {status}: N={self.n_rois}, t={self.n_timepoints}"
        return head if self.ok else head + "; " + "; ".join(self.issues)


def validate_scan(s):
    """Check a scan against the container invariants and report the outcome.

    Never raises: structural problems (inconsistent time axis, non-finite
    data, bad label) are collected in the returned report.
    """
    issues = []
    shapes = tuple(r.data.shape for r in s.rois)
    if len(s.rois) < 2:
        issues.append(f"need at least 2 ROIs, got {len(s.rois)}")
    ts = {shape[1] for shape in shapes}
    t = shapes[0][1] if shapes else None
    if len(ts) > 1:
        issues.append(f"inconsistent time points across ROIs: {sorted(ts)}")
        t = None
    for i, r in enumerate(s.rois):
        if not np.all(np.isfinite(r.data)):
            issues.append(f"ROI {i} contains non-finite data")
    if s.label not in (0, 1):
        issues.append(f"label must be 0 or 1, got {s.label}")
    return ScanReport(
        ok=not issues,
        n_rois=len(s.rois),
        n_timepoints=t,
        roi_shapes=shapes,
        issues=tuple(issues),
    )
