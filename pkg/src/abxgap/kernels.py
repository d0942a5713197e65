"""Distance primitives used by ABX scoring.

Frame distances are cosine (``1 - cos``, in [0, 2]) or angular (``arccos(cos) / pi``, in [0, 1]). Sequences are
compared either by DTW, normalized by the length of the best alignment path, or by the frame distance between
their mean-pooled vectors. Everything is accumulated in 64-bit.
"""

from __future__ import annotations
from typing import Tuple
from dataclasses import dataclass
import math
import warnings
import numpy as np
from numba import njit
from .typealiases import Matrix, Vector, ContractViolation


__all__ = [
    'DistanceSpec', 'FRAME_METRICS', 'SEQUENCE_MODES', 'frame_distance', 'distance_matrix', 'dtw_distance',
    'dtw_alignment', 'mean_pool', 'pooled_distance']


FRAME_METRICS = ('cosine', 'angular')
SEQUENCE_MODES = ('dtw', 'mean_pool')
ZERO_NORM = 1e-12


@dataclass(frozen=True)
class DistanceSpec:
    """Which frame metric and which sequence comparison to use."""

    frame_metric: str = 'cosine'
    sequence_mode: str = 'dtw'

    def __post_init__(self) -> None:
        if self.frame_metric not in FRAME_METRICS:
            raise ContractViolation(f'Unknown frame metric {self.frame_metric!r}; expected one of {FRAME_METRICS}.')
        if self.sequence_mode not in SEQUENCE_MODES:
            raise ContractViolation(
                f'Unknown sequence mode {self.sequence_mode!r}; expected one of {SEQUENCE_MODES}.')

    def sequence_distance(self, x: Matrix, y: Matrix) -> float:
        if self.sequence_mode == 'dtw':
            return dtw_distance(x, y, self.frame_metric)
        return pooled_distance(x, y, self.frame_metric)


@njit(cache=True)
def _squared_norms(x):
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        s = 0.0
        for k in range(x.shape[1]):
            s += x[i, k] * x[i, k]
        out[i] = s
    return out


@njit(cache=True)
def _distance_matrix(x, y, angular):
    n, m, d = x.shape[0], y.shape[0], x.shape[1]
    sx = _squared_norms(x)
    sy = _squared_norms(y)
    fallback = 0.5 if angular else 1.0
    floor = ZERO_NORM * ZERO_NORM
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            if sx[i] < floor or sy[j] < floor:
                out[i, j] = fallback
                continue
            dot = 0.0
            for k in range(d):
                dot += x[i, k] * y[j, k]
            # cos(u, u) is exactly 1: dot == sx[i] bit-for-bit and sqrt(fl(s * s)) == s.
            den = math.sqrt(sx[i] * sy[j])
            if not math.isfinite(den):
                den = math.sqrt(sx[i]) * math.sqrt(sy[j])
            r = dot / den
            if r > 1.0:
                r = 1.0
            elif r < -1.0:
                r = -1.0
            if angular:
                out[i, j] = math.acos(r) / math.pi
            else:
                out[i, j] = 1.0 - r
    return out


@njit(cache=True)
def _dtw_tables(dist):
    # Ties prefer the diagonal predecessor, then (i-1, j), then (i, j-1).
    n, m = dist.shape
    cost = np.empty((n, m))
    length = np.empty((n, m), dtype=np.int64)
    cost[0, 0] = dist[0, 0]
    length[0, 0] = 1
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best = np.inf
            best_len = 0
            if i > 0 and j > 0:
                best = cost[i - 1, j - 1]
                best_len = length[i - 1, j - 1]
            if i > 0 and cost[i - 1, j] < best:
                best = cost[i - 1, j]
                best_len = length[i - 1, j]
            if j > 0 and cost[i, j - 1] < best:
                best = cost[i, j - 1]
                best_len = length[i, j - 1]
            cost[i, j] = best + dist[i, j]
            length[i, j] = best_len + 1
    return cost, length


@njit(cache=True)
def _dtw_normalized(dist):
    cost, length = _dtw_tables(dist)
    n, m = dist.shape
    return cost[n - 1, m - 1] / length[n - 1, m - 1]


def _as_sequence(x: Matrix, name: str) -> Matrix:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ContractViolation(f'{name} must be a frames x dim matrix, got shape {x.shape}.')
    if x.shape[0] < 1:
        raise ContractViolation(f'{name} is an empty sequence.')
    return np.ascontiguousarray(x)


def _check_metric(metric: str) -> None:
    if metric not in FRAME_METRICS:
        raise ContractViolation(f'Unknown frame metric {metric!r}; expected one of {FRAME_METRICS}.')


def _warn_zero_rows(*matrices: Matrix) -> None:
    for m in matrices:
        if (np.einsum('ij,ij->i', m, m) < ZERO_NORM ** 2).any():
            warnings.warn('Zero-norm frame encountered; using the fallback distance for it.', RuntimeWarning,
                          stacklevel=3)
            return


def distance_matrix(x: Matrix, y: Matrix, metric: str = 'cosine') -> Matrix:
    """**All frame distances between two sequences.**

    :param x: ``frames_x x dim`` matrix.
    :param y: ``frames_y x dim`` matrix.
    :param metric: ``'cosine'`` or ``'angular'``.
    :return: ``frames_x x frames_y`` matrix whose entry (i, j) is ``frame_distance(x[i], y[j])``.
    """
    _check_metric(metric)
    x = _as_sequence(x, 'X')
    y = _as_sequence(y, 'Y')
    if x.shape[1] != y.shape[1]:
        raise ContractViolation(f'Dimension mismatch: {x.shape[1]} vs {y.shape[1]}.')
    _warn_zero_rows(x, y)
    return _distance_matrix(x, y, metric == 'angular')


def frame_distance(u: Vector, v: Vector, metric: str = 'cosine') -> float:
    """Distance between two frames. A frame with norm below 1e-12 sits at distance 1 (cosine) or 0.5 (angular)
    from everything."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or u.shape != v.shape:
        raise ContractViolation(f'Frame shapes differ or are not vectors: {u.shape} vs {v.shape}.')
    return float(distance_matrix(u[None, :], v[None, :], metric)[0, 0])


def dtw_distance(x: Matrix, y: Matrix, metric: str = 'cosine') -> float:
    """**Path-length normalized DTW distance.**

    Alignment paths run from (0, 0) to (|X|-1, |Y|-1) with steps (1, 0), (0, 1) and (1, 1). The path with the
    smallest summed frame distance wins; the result is that sum divided by the number of cells visited.
    """
    return float(_dtw_normalized(distance_matrix(x, y, metric)))


def dtw_alignment(x: Matrix, y: Matrix, metric: str = 'cosine') -> Tuple[float, list]:
    """DTW distance together with the chosen path, for auditing single comparisons."""
    dist = distance_matrix(x, y, metric)
    cost, length = _dtw_tables(dist)
    i, j = dist.shape[0] - 1, dist.shape[1] - 1
    path = [(i, j)]
    while (i, j) != (0, 0):
        candidates = []
        if i > 0 and j > 0:
            candidates.append((i - 1, j - 1))
        if i > 0:
            candidates.append((i - 1, j))
        if j > 0:
            candidates.append((i, j - 1))
        # Same preference order as the DP.
        best = candidates[0]
        for c in candidates[1:]:
            if cost[c] < cost[best]:
                best = c
        i, j = best
        path.append(best)
    path.reverse()
    return float(cost[-1, -1] / length[-1, -1]), path


def mean_pool(x: Matrix) -> Vector:
    """Per-dimension arithmetic mean over frames."""
    return _as_sequence(x, 'X').mean(axis=0)


def pooled_distance(x: Matrix, y: Matrix, metric: str = 'cosine') -> float:
    return frame_distance(mean_pool(x), mean_pool(y), metric)
