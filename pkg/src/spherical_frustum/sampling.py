"""Farthest point sampling inside stride windows of the frustum grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadCount
from .frustum import FrustumGrid, grid_from_indices
from .hashindex import HashIndex, visit_cells


def _sq_dist(points, ref):
    d = points - ref
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def fps(xyz, count, rng=None) -> list:
    """Greedy farthest point sampling.

    Starts at index 0 (or at a random index when ``rng`` is given) and then
    repeatedly adds the point whose distance to the sampled set is largest;
    ties go to the smallest index. Distances are compared squared.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    n = xyz.shape[0]
    if not 1 <= count <= n:
        raise BadCount(f"cannot sample {count} of {n} points")
    start = 0 if rng is None else int(rng.integers(n))
    selected = [start]
    min_d = _sq_dist(xyz, xyz[start])
    min_d[start] = -np.inf
    for _ in range(count - 1):
        j = int(np.argmax(min_d))
        selected.append(j)
        np.minimum(min_d, _sq_dist(xyz, xyz[j]), out=min_d)
        min_d[j] = -np.inf
    return selected


def _batched_fps(points, count):
    """FPS on B equally sized sets at once; ``points`` is (B, L, 3).

    Every set starts at its local index 0. Returns (B, count) local indices.
    """
    B, L, _ = points.shape
    chosen = np.zeros((B, count), dtype=np.int64)
    rows = np.arange(B)
    min_d = _sq_dist(points, points[:, :1, :])
    min_d[:, 0] = -np.inf
    for j in range(1, count):
        pick = np.argmax(min_d, axis=1)
        chosen[:, j] = pick
        np.minimum(min_d, _sq_dist(points, points[rows, pick][:, None, :]), out=min_d)
        min_d[rows, pick] = -np.inf
    return chosen


@dataclass(frozen=True)
class SampledCloud:
    """Points kept by :func:`f2ps` with coordinates on the downsampled grid.

    ``parent_indices`` index the parent cloud; ``u``, ``v``, ``m`` are the
    rewritten cell coordinates and in-frustum index (sampling order).
    """

    parent_indices: np.ndarray
    u: np.ndarray
    v: np.ndarray
    m: np.ndarray
    r: np.ndarray
    strides: tuple
    parent_N: int
    H: int
    W: int

    def __len__(self):
        return int(self.parent_indices.shape[0])


def window_members(grid: FrustumGrid, index: HashIndex, strides):
    """Merged point sets of all non-empty stride windows.

    Returns ``(wu, wv, starts, lengths, points)``: window coordinates,
    offsets into ``points`` and the window sizes. Inside a window points are
    ordered by ``(v, u, m)``.
    """
    Sh, Sw = strides
    cu = grid.cell_keys % grid.W
    cv = grid.cell_keys // grid.W
    Wc = -(-grid.W // Sw)
    wkeys = np.unique((cv // Sh) * Wc + cu // Sw)
    wu, wv = wkeys % Wc, wkeys // Wc
    dv, du = np.divmod(np.arange(Sh * Sw), Sw)
    qu = (wu[:, None] * Sw + du[None, :]).reshape(-1)
    qv = (wv[:, None] * Sh + dv[None, :]).reshape(-1)
    cell, points, _ = visit_cells(index, grid, qu, qv)
    window = cell // (Sh * Sw)
    lengths = np.bincount(window, minlength=wkeys.shape[0])
    starts = np.cumsum(lengths) - lengths
    return wu, wv, starts, lengths, points


def f2ps(grid: FrustumGrid, index: HashIndex, xyz, strides=(2, 2)) -> SampledCloud:
    """Frustum farthest point sampling.

    Each ``S_h x S_w`` window keeps ``ceil(L / (S_h * S_w))`` of its ``L``
    points, chosen by FPS seeded with the window's first point.
    """
    Sh, Sw = int(strides[0]), int(strides[1])
    if Sh < 1 or Sw < 1:
        raise ValueError(f"strides must be >= 1, got {strides}")
    xyz = np.asarray(xyz, dtype=np.float64)
    H2, W2 = -(-grid.H // Sh), -(-grid.W // Sw)
    if grid.N == 0:
        empty = np.zeros(0, dtype=np.int64)
        return SampledCloud(empty, empty, empty, empty, np.zeros(0), (Sh, Sw), 0, H2, W2)

    wu, wv, starts, lengths, points = window_members(grid, index, (Sh, Sw))
    counts = -(-lengths // (Sh * Sw))
    total = int(counts.sum())
    out_start = np.cumsum(counts) - counts
    parent = np.empty(total, dtype=np.int64)
    order_in_window = np.empty(total, dtype=np.int64)
    window_of = np.repeat(np.arange(lengths.shape[0]), counts)

    for L in np.unique(lengths):
        ws = np.flatnonzero(lengths == L)
        members = points[starts[ws][:, None] + np.arange(L)[None, :]]
        c = int(-(-L // (Sh * Sw)))
        local = _batched_fps(xyz[members], c)
        slots = out_start[ws][:, None] + np.arange(c)[None, :]
        parent[slots] = members[np.arange(ws.shape[0])[:, None], local]
        order_in_window[slots] = np.arange(c)[None, :]

    return SampledCloud(
        parent_indices=parent,
        u=wu[window_of],
        v=wv[window_of],
        m=order_in_window,
        r=grid.r[parent],
        strides=(Sh, Sw),
        parent_N=grid.N,
        H=H2,
        W=W2,
    )


def rebuild_downsampled_grid(sampled: SampledCloud) -> FrustumGrid:
    return grid_from_indices(sampled.u, sampled.v, sampled.m, sampled.r, sampled.H, sampled.W)
