"""Lossless frustum grid: every point keeps its cell plus an in-cell index."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyCloud, OutOfBounds


@dataclass(frozen=True)
class FrustumGrid:
    """Per-point cell coordinates ``(u, v)``, in-frustum index ``m`` and
    end-of-frustum indicator ``xi`` (0 on the last point of a frustum).

    Occupied cells are kept sparse: ``cell_keys`` holds the sorted flat
    keys ``v * W + u`` and ``cell_counts`` their point counts. ``order`` lists
    point ids sorted by ``(v, u, m)``.
    """

    u: np.ndarray
    v: np.ndarray
    m: np.ndarray
    xi: np.ndarray
    r: np.ndarray
    order: np.ndarray
    cell_keys: np.ndarray
    cell_counts: np.ndarray
    H: int
    W: int

    @property
    def N(self) -> int:
        return int(self.u.shape[0])

    @property
    def occupied(self) -> int:
        return int(self.cell_keys.shape[0])

    @property
    def cell_count(self) -> dict:
        """Occupied cell ``(u, v)`` -> point count."""
        return {(int(k % self.W), int(k // self.W)): int(c)
                for k, c in zip(self.cell_keys, self.cell_counts)}

    def cell_sizes(self, u, v) -> np.ndarray:
        """Vectorized frustum size lookup; out-of-grid cells report 0."""
        u = np.asarray(u, dtype=np.int64)
        v = np.asarray(v, dtype=np.int64)
        inside = (u >= 0) & (u < self.W) & (v >= 0) & (v < self.H)
        keys = np.where(inside, v * self.W + u, -1)
        pos = np.searchsorted(self.cell_keys, keys)
        pos = np.minimum(pos, max(self.occupied - 1, 0))
        if self.occupied == 0:
            return np.zeros(keys.shape, dtype=np.int64)
        hit = inside & (self.cell_keys[pos] == keys)
        return np.where(hit, self.cell_counts[pos], 0)


def _runs(sorted_keys):
    """Start offsets and lengths of equal-value runs in a sorted array."""
    n = sorted_keys.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
    lengths = np.diff(np.r_[starts, n])
    return starts, lengths


def _assemble(u, v, m, r, order, H, W):
    keys = v * W + u
    sorted_keys = keys[order]
    starts, lengths = _runs(sorted_keys)
    xi = np.ones(u.shape[0], dtype=np.int8)
    if starts.size:
        xi[order[starts + lengths - 1]] = 0
    return FrustumGrid(u=u, v=v, m=m, xi=xi, r=r, order=order,
                       cell_keys=sorted_keys[starts] if starts.size else sorted_keys[:0],
                       cell_counts=lengths, H=int(H), W=int(W))


def _check_bounds(u, v, H, W):
    bad = np.flatnonzero((u < 0) | (u >= W) | (v < 0) | (v >= H))
    if bad.size:
        raise OutOfBounds(bad[0])


def build_frustum_grid(u, v, r, H, W) -> FrustumGrid:
    """Sort points by cell and number them within each cell.

    The sort is stable, so inside a frustum ``m`` follows scan order.
    """
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    r = np.asarray(r, dtype=np.float64)
    _check_bounds(u, v, H, W)
    keys = v * W + u
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    starts, lengths = _runs(sorted_keys)
    # number of points of the same cell appearing ahead in the sorted cloud
    m = np.empty(u.shape[0], dtype=np.int64)
    m[order] = np.arange(u.shape[0]) - np.repeat(starts, lengths)
    return _assemble(u, v, m, r, order, H, W)


def grid_from_indices(u, v, m, r, H, W) -> FrustumGrid:
    """Assemble a grid from already-assigned in-frustum indices.

    ``m`` must be contiguous from 0 within each cell.
    """
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    m = np.asarray(m, dtype=np.int64)
    r = np.asarray(r, dtype=np.float64)
    _check_bounds(u, v, H, W)
    order = np.lexsort((m, v * W + u))
    starts, lengths = _runs((v * W + u)[order])
    expected = np.arange(u.shape[0]) - np.repeat(starts, lengths)
    if not np.array_equal(m[order], expected):
        raise ValueError("in-frustum indices are not contiguous from 0")
    return _assemble(u, v, m, r, order, H, W)


def frustum_size(grid: FrustumGrid, u, v) -> int:
    return int(grid.cell_sizes(np.array([u]), np.array([v]))[0])


def max_frustum_size(grid: FrustumGrid) -> int:
    if grid.N == 0:
        raise EmptyCloud("max frustum size of an empty cloud")
    return int(grid.cell_counts.max())
