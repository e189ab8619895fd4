"""Hash-based frustum representation.

Each point is stored under the integer key ``v * (W * M) + u * M + m`` in
an open-addressing table (linear probing, multiplicative hashing). Lookups
and insertions are vectorized over batches of keys; the scalar
:func:`query_point` walks the same probe sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CorruptIndicator, KeyOverflow
from .frustum import FrustumGrid

EMPTY = -1
_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1
_KEY_LIMIT = 1 << 63


def encode_key(u, v, m, W, M) -> int:
    u, v, m, W, M = int(u), int(v), int(m), int(W), int(M)
    if not (0 <= u < W and 0 <= m < M and v >= 0):
        raise KeyOverflow(f"triple ({u}, {v}, {m}) outside W={W}, M={M}")
    if (v + 1) * W * M > _KEY_LIMIT:
        raise KeyOverflow(f"row {v} overflows 63-bit keys with W={W}, M={M}")
    return v * (W * M) + u * M + m


def decode_key(key, W, M):
    key, W, M = int(key), int(W), int(M)
    v, rest = divmod(key, W * M)
    u, m = divmod(rest, M)
    return u, v, m


def encode_keys(u, v, m, W, M) -> np.ndarray:
    """Vectorized :func:`encode_key` without range checks."""
    return (np.asarray(v, dtype=np.int64) * (W * M)
            + np.asarray(u, dtype=np.int64) * M
            + np.asarray(m, dtype=np.int64))


def _home_slots(keys: np.ndarray, bits: int) -> np.ndarray:
    h = keys.astype(np.uint64) * np.uint64(_GOLDEN)
    return (h >> np.uint64(64 - bits)).astype(np.int64)


@dataclass(frozen=True)
class HashIndex:
    table_keys: np.ndarray
    table_values: np.ndarray
    bits: int
    W: int
    M: int
    N: int

    @property
    def capacity(self) -> int:
        return 1 << self.bits

    def __len__(self):
        return self.N

    def lookup_keys(self, keys) -> np.ndarray:
        """Point id for each key, ``EMPTY`` where absent."""
        keys = np.asarray(keys, dtype=np.int64)
        out = np.full(keys.shape, EMPTY, dtype=np.int64)
        if self.N == 0 or keys.size == 0:
            return out
        flat = keys.reshape(-1)
        result = out.reshape(-1)
        mask = self.capacity - 1
        pending = np.arange(flat.shape[0])
        slots = _home_slots(flat, self.bits)
        while pending.size:
            stored = self.table_keys[slots]
            hit = stored == flat[pending]
            result[pending[hit]] = self.table_values[slots[hit]]
            go_on = ~hit & (stored != EMPTY)
            pending = pending[go_on]
            slots = (slots[go_on] + 1) & mask
        return out

    def lookup(self, u, v, m) -> np.ndarray:
        """Vectorized query; triples outside the key domain report ``EMPTY``."""
        u = np.asarray(u, dtype=np.int64)
        v = np.asarray(v, dtype=np.int64)
        m = np.asarray(m, dtype=np.int64)
        valid = (u >= 0) & (u < self.W) & (v >= 0) & (m >= 0) & (m < self.M)
        keys = np.where(valid, encode_keys(u, v, m, self.W, self.M), -1)
        ids = self.lookup_keys(keys)
        return np.where(valid, ids, EMPTY)

    def items(self):
        used = self.table_keys != EMPTY
        return zip(self.table_keys[used].tolist(), self.table_values[used].tolist())


def build_hash_index(grid: FrustumGrid) -> HashIndex:
    N = grid.N
    M = int(grid.cell_counts.max()) if N else 1
    if grid.H * grid.W * M > _KEY_LIMIT:
        raise KeyOverflow(f"H*W*M = {grid.H * grid.W * M} exceeds 63-bit keys")
    bits = max(3, int(np.ceil(np.log2(max(2 * N, 1)))) + 1)
    capacity = 1 << bits
    table_keys = np.full(capacity, EMPTY, dtype=np.int64)
    table_values = np.full(capacity, EMPTY, dtype=np.int64)
    keys = encode_keys(grid.u, grid.v, grid.m, grid.W, M)
    values = np.arange(N, dtype=np.int64)

    pending = values.copy()
    slots = _home_slots(keys, bits) if N else values
    mask = capacity - 1
    while pending.size:
        free = table_keys[slots] == EMPTY
        # among keys racing for the same free slot the first one wins
        cand_slots = slots[free]
        won_slots, first = np.unique(cand_slots, return_index=True)
        winners = pending[free][first]
        table_keys[won_slots] = keys[winners]
        table_values[won_slots] = winners
        placed = np.zeros(pending.shape[0], dtype=bool)
        placed[np.flatnonzero(free)[first]] = True
        pending = pending[~placed]
        slots = (slots[~placed] + 1) & mask
    return HashIndex(table_keys, table_values, bits, grid.W, M, N)


def query_point(index: HashIndex, u, v, m):
    """Point id stored under ``(u, v, m)``, or None."""
    u, v, m = int(u), int(v), int(m)
    if index.N == 0 or not (0 <= u < index.W and v >= 0 and 0 <= m < index.M):
        return None
    key = v * (index.W * index.M) + u * index.M + m
    mask = index.capacity - 1
    slot = ((key * _GOLDEN) & _MASK64) >> (64 - index.bits)
    while True:
        stored = int(index.table_keys[slot])
        if stored == key:
            return int(index.table_values[slot])
        if stored == EMPTY:
            return None
        slot = (slot + 1) & mask


def visit_frustum(index: HashIndex, grid: FrustumGrid, u, v) -> list:
    """Points of cell ``(u, v)`` in ascending ``m``, following indicators."""
    k = query_point(index, u, v, 0)
    if k is None:
        return []
    visited = [k]
    m = 0
    while grid.xi[k] == 1:
        m += 1
        if m > index.N:
            raise CorruptIndicator(f"frustum ({u}, {v}) runs past {index.N} points")
        k = query_point(index, u, v, m)
        if k is None:
            raise CorruptIndicator(f"indicator promises point ({u}, {v}, {m}) that is absent")
        visited.append(k)
    return visited


def visit_cells(index: HashIndex, grid: FrustumGrid, u, v):
    """Batch frustum visiting.

    Returns ``(cell, point, m)`` arrays listing, for every queried cell
    position, its points sorted by ``(cell, m)``. ``cell`` indexes the query.
    """
    u = np.asarray(u, dtype=np.int64).reshape(-1)
    v = np.asarray(v, dtype=np.int64).reshape(-1)
    active = np.arange(u.shape[0])
    ids = index.lookup(u, v, np.zeros_like(u))
    cells, points, ms = [], [], []
    m = 0
    while active.size:
        found = ids >= 0
        active, ids = active[found], ids[found]
        cells.append(active)
        points.append(ids)
        ms.append(np.full(active.shape[0], m, dtype=np.int64))
        more = grid.xi[ids] == 1
        active = active[more]
        m += 1
        if active.size and m > index.N:
            raise CorruptIndicator("frustum visiting ran past the point count")
        ids = index.lookup(u[active], v[active], np.full(active.shape[0], m))
        if np.any(ids < 0):
            raise CorruptIndicator("indicator promises a point that is absent")
    if not cells:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    cell = np.concatenate(cells)
    point = np.concatenate(points)
    mm = np.concatenate(ms)
    # each round is sorted by cell and rounds follow m, so a stable sort on
    # the cell alone yields (cell, m) order
    order = np.argsort(cell, kind="stable")
    return cell[order], point[order], mm[order]
