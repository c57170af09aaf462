"""Discrete optimal transport between ROI voxel clouds.

An ROI with n voxels is viewed as a uniform discrete measure whose atoms
are the voxel time series.  The connectivity value between two ROIs is the
p-Wasserstein distance between their measures under the l^p ground metric,
solved either exactly (transportation simplex) or approximately
(entropic regularization / Sinkhorn scaling).
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .core import RoiMatrix, ValidationError, roi_array

# Above this ratio of smallest cost to epsilon the dense scaling kernel
# exp(-M/eps) loses too much precision, so iterations run in log domain.
LOG_DOMAIN_THRESHOLD = 30.0

# Marginal mass must match to this tolerance for a plan to count as feasible.
MARGINAL_TOL = 1e-8


@dataclass(frozen=True)
class DiscreteMeasure:
    """Uniform empirical measure whose atoms are voxel time series."""

    points: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_roi(cls, x):
        arr = roi_array(x)
        n = arr.shape[0]
        return cls(points=arr, weights=np.full(n, 1.0 / n))


@dataclass(frozen=True)
class CostMatrix:
    """Pairwise ground costs d^p between source and target atoms."""

    entries: np.ndarray
    ground_p: float


@dataclass(frozen=True)
class TransportPlan:
    """A coupling in the transportation polytope plus its linear cost."""

    coupling: np.ndarray
    objective: float
    converged: bool = True
    n_iter: int = 0
    method: str = "exact"

    def marginal_error(self, a, b):
        """Largest deviation of the coupling's marginals from (a, b)."""
        row = np.abs(self.coupling.sum(axis=1) - np.asarray(a, float)).max()
        col = np.abs(self.coupling.sum(axis=0) - np.asarray(b, float)).max()
        return max(float(row), float(col))


def _cost_entries(m):
    entries = m.entries if isinstance(m, CostMatrix) else np.asarray(m, dtype=np.float64)
    if entries.ndim != 2:
        raise ValidationError(f"cost matrix must be 2-D, got shape {entries.shape}")
    if not np.all(np.isfinite(entries)):
        raise ValidationError("cost matrix has non-finite entries")
    return entries


def _check_weights(w, size, name):
    v = np.asarray(w, dtype=np.float64).ravel()
    if v.size != size:
        raise ValidationError(f"{name} has length {v.size}, expected {size}")
    if np.any(v <= 0.0):
        raise ValidationError(f"{name} must be strictly positive")
    if abs(v.sum() - 1.0) > 1e-9:
        raise ValidationError(f"{name} must sum to 1, got {v.sum()!r}")
    return v


def build_cost_matrix(x, y, p=2.0):
    """Pairwise transport costs between the voxel series of two ROIs.

    Entry (i, j) is the p-th power of the l^p distance between voxel i of
    ``x`` and voxel j of ``y``, i.e. ``sum_k |x_ik - y_jk| ** p``.  Storing
    d^p directly is what the transport objective consumes.

    Parameters
    ----------
    x, y : RoiMatrix or (n, t) array_like, sharing the time axis
    p : float >= 1

    Returns
    -------
    CostMatrix
    """
    xa = roi_array(x)
    ya = roi_array(y)
    if xa.shape[1] != ya.shape[1]:
        raise ValidationError(
            f"time axis mismatch: {xa.shape[1]} vs {ya.shape[1]} time points"
        )
    if p < 1.0:
        raise ValidationError(f"ground exponent must satisfy p >= 1, got {p}")
    if p == 1.0:
        entries = cdist(xa, ya, "cityblock")
    elif p == 2.0:
        entries = cdist(xa, ya, "sqeuclidean")
    else:
        entries = cdist(xa, ya, "minkowski", p=p) ** p
    return CostMatrix(entries=entries, ground_p=float(p))


def _northwest_corner(a, b):
    """Initial basic feasible cells for the transportation simplex."""
    n, m = a.size, b.size
    rem_a = a.copy()
    rem_b = b.copy()
    cells = []
    i = j = 0
    while True:
        f = min(rem_a[i], rem_b[j])
        cells.append([i, j, f])
        rem_a[i] -= f
        rem_b[j] -= f
        if i == n - 1 and j == m - 1:
            break
        if j == m - 1:
            i += 1
        elif i == n - 1:
            j += 1
        elif rem_a[i] <= rem_b[j]:
            i += 1
        else:
            j += 1
    return cells


def _tree_duals(cells, costs, n, m):
    """Node potentials satisfying u_i + v_j = c_ij on every basic cell."""
    adj = [[] for _ in range(n + m)]
    for i, j, _ in cells:
        adj[i].append(n + j)
        adj[n + j].append(i)
    u = np.zeros(n)
    v = np.zeros(m)
    seen = np.zeros(n + m, dtype=bool)
    seen[0] = True
    stack = [0]
    while stack:
        node = stack.pop()
        for nxt in adj[node]:
            if seen[nxt]:
                continue
            seen[nxt] = True
            if node < n:  # row -> column
                v[nxt - n] = costs[node, nxt - n] - u[node]
            else:  # column -> row
                u[nxt] = costs[nxt, node - n] - v[node - n]
            stack.append(nxt)
    return u, v


def _tree_path(cells, start, goal, n):
    """Node path from ``start`` to ``goal`` through the basis tree."""
    adj = [[] for _ in range(n + len(cells) + 1)]
    nodes = set()
    for i, j, _ in cells:
        nodes.add(i)
        nodes.add(n + j)
    adj = {node: [] for node in nodes}
    for i, j, _ in cells:
        adj[i].append(n + j)
        adj[n + j].append(i)
    parent = {start: None}
    stack = [start]
    while stack:
        node = stack.pop()
        if node == goal:
            break
        for nxt in adj[node]:
            if nxt not in parent:
                parent[nxt] = node
                stack.append(nxt)
    path = [goal]
    while path[-1] != start:
        path.append(parent[path[-1]])
    path.reverse()
    return path


def _tree_flows(cells, a, b):
    """Unique flow on the spanning tree matching the marginals exactly.

    Recomputing flows from scratch by stripping leaves removes any rounding
    drift accumulated over the pivots.
    """
    n, m = a.size, b.size
    incident = [[] for _ in range(n + m)]
    for idx, (i, j, _) in enumerate(cells):
        incident[i].append((n + j, idx))
        incident[n + j].append((i, idx))
    supply = np.concatenate([a, b])
    degree = np.array([len(e) for e in incident])
    used = np.zeros(len(cells), dtype=bool)
    flows = np.zeros(len(cells))
    queue = [node for node in range(n + m) if degree[node] == 1]
    while queue:
        node = queue.pop()
        edge = next(((other, idx) for other, idx in incident[node] if not used[idx]), None)
        if edge is None:
            continue
        other, idx = edge
        used[idx] = True
        flows[idx] = max(supply[node], 0.0)
        supply[other] -= supply[node]
        supply[node] = 0.0
        degree[node] -= 1
        degree[other] -= 1
        if degree[other] == 1:
            queue.append(other)
    return flows


def solve_exact(a, b, m, tol=None, max_pivots=None):
    """Solve the transportation problem exactly.

    Transportation simplex (MODI) on the bipartite spanning-tree basis:
    northwest-corner start, most-negative-reduced-cost pivoting with a
    Bland's-rule fallback after a degenerate streak, and a final exact
    re-flow of the optimal tree.  The returned plan is vertex-optimal, so
    it has at most n + m - 1 nonzero entries.

    Parameters
    ----------
    a : (n,) weights of the source measure (strictly positive, sum 1)
    b : (m,) weights of the target measure
    m : CostMatrix or (n, m) array_like
    tol : optional override of the reduced-cost optimality threshold
    max_pivots : optional override of the pivot budget

    Returns
    -------
    TransportPlan
    """
    costs = _cost_entries(m)
    n_src, n_tgt = costs.shape
    a = _check_weights(a, n_src, "'a'")
    b = _check_weights(b, n_tgt, "'b'")
    scale = max(1.0, float(np.abs(costs).max()))
    if tol is None:
        tol = 1e-11 * scale
    if max_pivots is None:
        max_pivots = 100 * (n_src + n_tgt) ** 2 + 1000

    cells = _northwest_corner(a, b)
    in_basis = np.zeros(costs.shape, dtype=bool)
    for i, j, _ in cells:
        in_basis[i, j] = True

    bland = False
    degenerate_streak = 0
    pivots = 0
    while True:
        pivots += 1
        if pivots > max_pivots:
            raise RuntimeError(
                f"transportation simplex exceeded {max_pivots} pivots on a "
                f"{n_src}x{n_tgt} instance"
            )
        u, v = _tree_duals(cells, costs, n_src, n_tgt)
        reduced = costs - u[:, None] - v[None, :]
        if bland:
            candidates = np.argwhere(reduced < -tol)
            if candidates.size == 0:
                break
            ei, ej = (int(candidates[0][0]), int(candidates[0][1]))
        else:
            flat = int(np.argmin(reduced))
            ei, ej = divmod(flat, n_tgt)
            if reduced[ei, ej] >= -tol:
                break

        path = _tree_path(cells, ei, n_src + ej, n_src)
        cycle = [(ei, ej, 1)]
        sign = -1
        for na, nb in zip(path[:-1], path[1:]):
            i, j = (na, nb - n_src) if na < n_src else (nb, na - n_src)
            cycle.append((i, j, sign))
            sign = -sign

        cell_index = {(i, j): k for k, (i, j, _) in enumerate(cells)}
        theta = np.inf
        leaving = None
        for i, j, s in cycle[1:]:
            if s == -1:
                f = cells[cell_index[(i, j)]][2]
                if f < theta - 1e-15 or (abs(f - theta) <= 1e-15 and (leaving is None or (i, j) < leaving)):
                    theta = f
                    leaving = (i, j)
        theta = max(theta, 0.0)

        for i, j, s in cycle[1:]:
            cells[cell_index[(i, j)]][2] += s * theta
        cells[cell_index[leaving]][2] = 0.0
        del cells[cell_index[leaving]]
        in_basis[leaving] = False
        cells.append([ei, ej, theta])
        in_basis[ei, ej] = True

        if theta <= 1e-15:
            degenerate_streak += 1
            if degenerate_streak > n_src + n_tgt:
                bland = True
        else:
            degenerate_streak = 0
            bland = False

    flows = _tree_flows(cells, a, b)
    coupling = np.zeros(costs.shape)
    for (i, j, _), f in zip(cells, flows):
        coupling[i, j] = f
    objective = float(np.sum(coupling * costs))
    return TransportPlan(
        coupling=coupling,
        objective=objective,
        converged=True,
        n_iter=pivots,
        method="exact",
    )


@lru_cache(maxsize=8)
def _all_permutations(size):
    return np.array(list(itertools.permutations(range(size))), dtype=np.intp)


def solve_bruteforce(a, b, m):
    """Exhaustive oracle for small uniform transportation problems.

    Both measures are expanded to L = lcm(n, m) uniform atoms by replicating
    points, every one of the L! permutation couplings is evaluated, and the
    cheapest is folded back into an n-by-m plan.  By Birkhoff's theorem the
    uniform square expansion always admits a permutation optimum, so this is
    ground truth for the simplex solver.

    Only uniform weights and lcm(n, m) <= 8 are accepted.
    """
    costs = _cost_entries(m)
    n_src, n_tgt = costs.shape
    a = _check_weights(a, n_src, "'a'")
    b = _check_weights(b, n_tgt, "'b'")
    if not (np.allclose(a, 1.0 / n_src, atol=1e-12) and np.allclose(b, 1.0 / n_tgt, atol=1e-12)):
        raise ValidationError("bruteforce oracle requires uniform weights")
    size = math.lcm(n_src, n_tgt)
    if size > 8:
        raise ValidationError(f"lcm(n, m) = {size} exceeds the oracle scale guard of 8")

    src_map = np.repeat(np.arange(n_src), size // n_src)
    tgt_map = np.repeat(np.arange(n_tgt), size // n_tgt)
    expanded = costs[np.ix_(src_map, tgt_map)]
    perms = _all_permutations(size)
    totals = expanded[np.arange(size)[None, :], perms].sum(axis=1)
    best = int(np.argmin(totals))
    coupling = np.zeros(costs.shape)
    np.add.at(coupling, (src_map, tgt_map[perms[best]]), 1.0 / size)
    return TransportPlan(
        coupling=coupling,
        objective=float(totals[best] / size),
        converged=True,
        n_iter=len(perms),
        method="bruteforce",
    )


def solve_sinkhorn(a, b, m, epsilon, tol=1e-9, max_iter=10000):
    """Entropic-regularized transport via alternating scaling iterations.

    Runs the classical dense kernel updates, switching to log-domain
    (stabilized) updates either proactively, when ``min(M) / epsilon``
    exceeds :data:`LOG_DOMAIN_THRESHOLD`, or reactively on any underflow in
    the kernel; the switch is never a user-facing error.  Iterations stop
    when the l^1 marginal violation of the current coupling drops below
    ``tol``; hitting ``max_iter`` first flags the plan as non-converged
    and emits a warning, but still returns the coupling.

    Returns
    -------
    TransportPlan
        ``objective`` is the plain transport cost of the regularized
        coupling (no entropy term).
    """
    costs = _cost_entries(m)
    n_src, n_tgt = costs.shape
    a = _check_weights(a, n_src, "'a'")
    b = _check_weights(b, n_tgt, "'b'")
    if epsilon <= 0.0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    if tol <= 0.0:
        raise ValidationError(f"tol must be positive, got {tol}")

    log_domain = float(costs.min()) / epsilon > LOG_DOMAIN_THRESHOLD
    coupling = None
    n_done = 0
    converged = False

    if not log_domain:
        kernel = np.exp(-costs / epsilon)
        v = np.ones(n_tgt)
        for it in range(1, max_iter + 1):
            kv = kernel @ v
            if not np.all(kv > 0.0) or not np.all(np.isfinite(kv)):
                log_domain = True
                break
            u = a / kv
            ktu = kernel.T @ u
            if not np.all(ktu > 0.0) or not np.all(np.isfinite(ktu)):
                log_domain = True
                break
            v = b / ktu
            coupling = u[:, None] * kernel * v[None, :]
            err = float(np.abs(coupling.sum(axis=1) - a).sum()
                        + np.abs(coupling.sum(axis=0) - b).sum())
            n_done = it
            if err < tol:
                converged = True
                break

    if log_domain:
        log_a = np.log(a)
        log_b = np.log(b)
        f = np.zeros(n_src)
        g = np.zeros(n_tgt)
        for it in range(1, max_iter + 1):
            f = epsilon * log_a - epsilon * logsumexp((g[None, :] - costs) / epsilon, axis=1)
            g = epsilon * log_b - epsilon * logsumexp((f[:, None] - costs) / epsilon, axis=0)
            coupling = np.exp((f[:, None] + g[None, :] - costs) / epsilon)
            err = float(np.abs(coupling.sum(axis=1) - a).sum()
                        + np.abs(coupling.sum(axis=0) - b).sum())
            n_done = it
            if err < tol:
                converged = True
                break

    if not converged:
        warnings.warn(
            f"Sinkhorn did not reach tol={tol} within {n_done} iterations",
            RuntimeWarning,
            stacklevel=2,
        )
    return TransportPlan(
        coupling=coupling,
        objective=float(np.sum(coupling * costs)),
        converged=converged,
        n_iter=n_done,
        method="sinkhorn-log" if log_domain else "sinkhorn",
    )


def wfc(x, y, p=2.0, solver="exact", root=True, epsilon=0.05, tol=1e-9, max_iter=10000):
    """Wasserstein functional connectivity between two ROIs.

    The p-Wasserstein distance between the uniform empirical measures over
    the two ROIs' voxel time series, under the l^p ground metric.  With
    ``root`` the p-th root is applied, which makes the value a metric; the
    raw transport objective (the p-th power) is returned otherwise.

    Parameters
    ----------
    x, y : RoiMatrix or (n, t) array_like, sharing the time axis
    p : float >= 1
    solver : {"exact", "sinkhorn"}
    root : bool
    epsilon, tol, max_iter : Sinkhorn controls, ignored by the exact solver

    Returns
    -------
    float >= 0
    """
    cost = build_cost_matrix(x, y, p=p)
    n_src, n_tgt = cost.entries.shape
    a = np.full(n_src, 1.0 / n_src)
    b = np.full(n_tgt, 1.0 / n_tgt)
    if solver == "exact":
        plan = solve_exact(a, b, cost)
    elif solver == "sinkhorn":
        plan = solve_sinkhorn(a, b, cost, epsilon=epsilon, tol=tol, max_iter=max_iter)
    else:
        raise ValidationError(f"unknown solver {solver!r}")
    value = max(plan.objective, 0.0)
    return float(value ** (1.0 / p)) if root else float(value)


@dataclass(frozen=True)
class TimeBasis:
    """Shared time-domain PCA basis: a mean series and orthonormal directions."""

    mean: np.ndarray
    components: np.ndarray

    @property
    def n_components(self):
        return self.components.shape[1]

    def transform(self, x):
        """Project voxel series onto the retained directions (scores)."""
        arr = roi_array(x)
        out = (arr - self.mean[None, :]) @ self.components
        if isinstance(x, RoiMatrix):
            return RoiMatrix(out, roi_id=x.roi_id)
        return out


def fit_time_basis(rois, fraction):
    """Fit one shared time-domain PCA basis over several ROIs.

    All voxel series are stacked, sorted into a canonical row order (so the
    basis does not depend on ROI labeling), centered by the grand mean
    series and decomposed; the top ``ceil(fraction * t)`` right singular
    directions are kept.  Using one shared basis keeps cross-ROI ground
    distances intact: with fraction 1 the projection is an isometry of the
    centered data.

    Parameters
    ----------
    rois : iterable of RoiMatrix or (n_i, t) arrays
    fraction : float in (0, 1]

    Returns
    -------
    TimeBasis
    """
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"fraction must lie in (0, 1], got {fraction}")
    arrays = [roi_array(r) for r in rois]
    if not arrays:
        raise ValidationError("need at least one ROI to fit a basis")
    t = arrays[0].shape[1]
    if any(arr.shape[1] != t for arr in arrays):
        raise ValidationError("all ROIs must share the time axis")
    stacked = np.vstack(arrays)
    stacked = stacked[np.lexsort(stacked.T[::-1])]
    mean = stacked.mean(axis=0)
    _, _, vt = np.linalg.svd(stacked - mean, full_matrices=False)
    k = min(max(1, int(np.ceil(fraction * t))), t, vt.shape[0])
    components = vt[:k].T.copy()
    # singular vectors are sign-ambiguous; anchor each on its largest entry
    for col in range(components.shape[1]):
        pivot = int(np.argmax(np.abs(components[:, col])))
        if components[pivot, col] < 0.0:
            components[:, col] = -components[:, col]
    return TimeBasis(mean=mean, components=components)


def pca_time_reduce(x, fraction, basis=None):
    """Reduce an ROI's time dimension by PCA on the time-domain covariance.

    Each voxel series (length t) is replaced by its scores on the top
    ``ceil(fraction * t)`` principal directions.  When several ROIs will be
    compared afterwards, fit a shared basis with :func:`fit_time_basis` and
    pass it here; fitting on a single ROI gives that ROI its own basis.

    Parameters
    ----------
    x : RoiMatrix or (n, t) array_like
    fraction : float in (0, 1]
    basis : TimeBasis, optional

    Returns
    -------
    Same kind as the input, with ceil(fraction * t) columns.
    """
    if basis is None:
        basis = fit_time_basis([x], fraction)
    return basis.transform(x)
