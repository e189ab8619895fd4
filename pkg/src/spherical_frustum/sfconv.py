"""Sparse convolution over frustums.

For every center point and every kernel offset the neighbouring frustum is
visited through the hash index and the point closest in range to the center
is selected. The convolution then sums ``W_i @ f_j`` over the valid
offsets only; empty frustums contribute nothing.

Offsets are numbered row-major, ``i = (dv + K // 2) * K + (du + K // 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch
from .frustum import FrustumGrid
from .hashindex import HashIndex, visit_cells


@dataclass
class ConvKernel:
    weights: np.ndarray  # (K*K, C_out, C_in)
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 3:
            raise ShapeMismatch("weights must be (K*K, C_out, C_in)")
        K = int(round(np.sqrt(self.weights.shape[0])))
        if K * K != self.weights.shape[0] or K % 2 == 0:
            raise ShapeMismatch(f"{self.weights.shape[0]} offsets is not an odd square")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if self.bias.shape[0] != self.c_out:
                raise ShapeMismatch("bias length differs from C_out")

    @property
    def K(self) -> int:
        return int(round(np.sqrt(self.weights.shape[0])))

    @property
    def c_out(self) -> int:
        return self.weights.shape[1]

    @property
    def c_in(self) -> int:
        return self.weights.shape[2]

    @classmethod
    def random(cls, K, c_in, c_out, rng, bias=True):
        """Uniform in +-1/sqrt(fan_in), fan_in = K*K*C_in."""
        bound = 1.0 / np.sqrt(K * K * c_in)
        w = rng.uniform(-bound, bound, size=(K * K, c_out, c_in))
        b = rng.uniform(-bound, bound, size=c_out) if bias else None
        return cls(w, b)

    def save(self, path):
        tensors = {"weight": self.weights}
        if self.bias is not None:
            tensors["bias"] = self.bias
        write_tensors(path, tensors)

    @classmethod
    def load(cls, path):
        tensors = read_tensors(path)
        return cls(tensors["weight"], tensors.get("bias"))


@dataclass
class GatherPlan:
    """Selected source point per (center, kernel offset), sorted by both."""

    center: np.ndarray
    offset: np.ndarray
    source: np.ndarray
    n_centers: int
    K: int
    _groups: list | None = field(default=None, repr=False, compare=False)
    _table: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def valid_counts(self) -> np.ndarray:
        """Number of valid frustums K' per center."""
        return np.bincount(self.center, minlength=self.n_centers)

    def entries(self, c):
        sel = self.center == c
        return list(zip(self.offset[sel].tolist(), self.source[sel].tolist()))

    def table(self) -> np.ndarray:
        """(n_centers, K*K) source ids, -1 where the frustum is empty."""
        if self._table is None:
            t = np.full((self.n_centers, self.K * self.K), -1, dtype=np.int64)
            t[self.center, self.offset] = self.source
            self._table = t
        return self._table

    def groups(self):
        """``(offset, centers, sources)`` for each offset present."""
        if self._groups is None:
            order = np.argsort(self.offset, kind="stable")
            off = self.offset[order]
            bounds = np.flatnonzero(np.r_[True, off[1:] != off[:-1], True]) if off.size else []
            self._groups = [
                (int(off[a]), self.center[order[a:b]], self.source[order[a:b]])
                for a, b in zip(bounds[:-1], bounds[1:])
            ]
        return self._groups


def _axis_offsets(c, K, rate, size, wrap):
    """Per-center valid kernel taps along one axis.

    Returns a (n, K) mask and the coarse coordinate of each tap.
    """
    h = K // 2
    d = np.arange(-h, h + 1)
    p = c[:, None] + d[None, :]
    if wrap:
        p = np.mod(p, size)
        ok = np.ones(p.shape, dtype=bool)
    else:
        ok = (p >= 0) & (p < size)
    if rate > 1:
        ok &= np.mod(p, rate) == 0
    return ok, p // rate


def _pair_taps(ok_u, cu_coarse, ok_v, cv_coarse, K):
    """Cartesian product of valid u and v taps per center, ordered by
    (center, offset)."""
    n = ok_u.shape[0]
    iu_c, iu_j = np.nonzero(ok_u)
    iv_c, iv_j = np.nonzero(ok_v)
    nu = np.bincount(iu_c, minlength=n)
    nv = np.bincount(iv_c, minlength=n)
    su = np.cumsum(nu) - nu
    sv = np.cumsum(nv) - nv
    per = nu * nv
    center = np.repeat(np.arange(n), per)
    local = np.arange(center.shape[0]) - np.repeat(np.cumsum(per) - per, per)
    nu_c = np.maximum(nu[center], 1)
    jv = iv_j[sv[center] + local // nu_c]
    ju = iu_j[su[center] + local % nu_c]
    offset = jv * K + ju
    return center, offset, cu_coarse[center, ju], cv_coarse[center, jv]


def _plan(cu, cv, cr, src_grid, src_index, K, wrap, rate, fine_shape):
    if K < 1 or K % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {K}")
    Rh, Rw = rate
    fine_H, fine_W = fine_shape
    ok_u, pu = _axis_offsets(cu, K, Rw, fine_W, wrap)
    ok_v, pv = _axis_offsets(cv, K, Rh, fine_H, False)
    q_center, q_offset, q_u, q_v = _pair_taps(ok_u, pu, ok_v, pv, K)

    cell, point, m = visit_cells(src_index, src_grid, q_u, q_v)
    n = cu.shape[0]
    chosen = np.full(q_center.shape[0], -1, dtype=np.int64)
    if cell.size:
        starts = np.flatnonzero(np.r_[True, cell[1:] != cell[:-1]])
        sizes = np.diff(np.r_[starts, cell.shape[0]])
        single = sizes == 1
        chosen[cell[starts[single]]] = point[starts[single]]
        multi = np.repeat(~single, sizes)
        if multi.any():
            mc, mp, mm = cell[multi], point[multi], m[multi]
            diff = np.abs(src_grid.r[mp] - cr[q_center[mc]])
            # nearest in range; equal distances resolve to the smallest m
            order = np.lexsort((mm, diff, mc))
            mc = mc[order]
            first = np.r_[True, mc[1:] != mc[:-1]]
            chosen[mc[first]] = mp[order][first]
    hit = chosen >= 0
    return GatherPlan(q_center[hit], q_offset[hit], chosen[hit], n, K)


def gather_neighbors(centers, grid: FrustumGrid, index: HashIndex, K=3, wrap_azimuth=True) -> GatherPlan:
    """Gather plan for ``centers`` (point ids of ``grid``) on the same grid."""
    centers = np.asarray(centers, dtype=np.int64).reshape(-1)
    return _plan(grid.u[centers], grid.v[centers], grid.r[centers], grid, index,
                 K, wrap_azimuth, (1, 1), (grid.H, grid.W))


def gather_at(cu, cv, cr, grid: FrustumGrid, index: HashIndex, K=3, wrap_azimuth=True) -> GatherPlan:
    """Gather plan for arbitrary center positions and ranges on ``grid``."""
    return _plan(np.asarray(cu, dtype=np.int64), np.asarray(cv, dtype=np.int64),
                 np.asarray(cr, dtype=np.float64), grid, index, K, wrap_azimuth,
                 (1, 1), (grid.H, grid.W))


def gather_upsample(coarse_grid: FrustumGrid, coarse_index: HashIndex, fine_u, fine_v, fine_r,
                    rate, K, fine_shape, wrap_azimuth=True) -> GatherPlan:
    """Gather plan for upsampling.

    A kernel tap at fine position ``(u + du, v + dv)`` is used only when it is
    an exact multiple of ``rate = (R_h, R_w)``; it then reads the coarse
    frustum at ``((u + du) / R_w, (v + dv) / R_h)``.
    """
    return _plan(np.asarray(fine_u, dtype=np.int64), np.asarray(fine_v, dtype=np.int64),
                 np.asarray(fine_r, dtype=np.float64), coarse_grid, coarse_index,
                 K, wrap_azimuth, tuple(rate), tuple(fine_shape))


def _check(features, plan, kernel):
    if features.ndim != 2 or features.shape[1] != kernel.c_in:
        raise ShapeMismatch(f"features have {features.shape[-1]} channels, kernel expects {kernel.c_in}")
    if plan.K != kernel.K:
        raise ShapeMismatch(f"plan built for K={plan.K}, kernel has K={kernel.K}")


_DENSE_MAX_OFFSETS = 49
_CHUNK = 8192


def sfc_forward(features, plan: GatherPlan, kernel: ConvKernel) -> np.ndarray:
    """Computes in float32 when the features are float32, else float64."""
    features = np.asarray(features)
    dtype = np.float32 if features.dtype == np.float32 else np.float64
    features = features.astype(dtype, copy=False)
    _check(features, plan, kernel)
    weights = kernel.weights.astype(dtype, copy=False)
    out = np.zeros((plan.n_centers, kernel.c_out), dtype=dtype)
    KK = plan.K * plan.K
    if KK <= _DENSE_MAX_OFFSETS:
        # gather a (centers, K*K*C_in) patch matrix; empty taps read a zero row
        padded = np.vstack([features, np.zeros((1, features.shape[1]), dtype=dtype)])
        table = plan.table()
        flat_w = weights.transpose(0, 2, 1).reshape(KK * kernel.c_in, kernel.c_out)
        for a in range(0, plan.n_centers, _CHUNK):
            patch = padded[table[a:a + _CHUNK]]
            out[a:a + _CHUNK] = patch.reshape(patch.shape[0], -1) @ flat_w
    else:
        for i, centers, sources in plan.groups():
            # each center appears at most once per offset
            out[centers] += features[sources] @ weights[i].T
    if kernel.bias is not None:
        out += kernel.bias.astype(dtype)
    return out


def sfc_backward(grad_out, plan: GatherPlan, kernel: ConvKernel, features):
    """Adjoint of :func:`sfc_forward` with respect to features, weights, bias."""
    features = np.asarray(features, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    _check(features, plan, kernel)
    if grad_out.shape != (plan.n_centers, kernel.c_out):
        raise ShapeMismatch(f"grad_out shape {grad_out.shape} != {(plan.n_centers, kernel.c_out)}")
    grad_features = np.zeros_like(features)
    grad_weights = np.zeros_like(kernel.weights)
    for i, centers, sources in plan.groups():
        g = grad_out[centers]
        np.add.at(grad_features, sources, g @ kernel.weights[i])
        grad_weights[i] = g.T @ features[sources]
    grad_bias = grad_out.sum(axis=0) if kernel.bias is not None else None
    return grad_features, grad_weights, grad_bias


def upsample_sfc_forward(coarse_features, coarse_grid, coarse_index, fine_u, fine_v, fine_r,
                         rate, kernel: ConvKernel, fine_shape, wrap_azimuth=True):
    plan = gather_upsample(coarse_grid, coarse_index, fine_u, fine_v, fine_r, rate,
                           kernel.K, fine_shape, wrap_azimuth)
    return sfc_forward(coarse_features, plan, kernel)


# Weight files: a text manifest followed by little-endian float32 blobs.
#
#   sfc-weights 1
#   <name> <d0>x<d1>x...
#   ...
#   end
#   <blob of tensor 1><blob of tensor 2>...
#
# Tensors are stored C-contiguous, so a conv weight (K*K, C_out, C_in) is
# offset-major, then output channel, then input channel.

_MAGIC = "sfc-weights 1"


def write_tensors(path, tensors: dict):
    lines = [_MAGIC]
    for name, arr in tensors.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(arr)
        dims = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        lines.append(f"{name} {dims}")
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensors(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    header_end = data.find(b"\nend\n")
    if not data.startswith(_MAGIC.encode()) or header_end < 0:
        raise ValueError(f"{path}: not a weight file")
    manifest = data[:header_end].decode("ascii").split("\n")[1:]
    offset = header_end + len(b"\nend\n")
    tensors = {}
    for line in manifest:
        name, dims = line.split()
        shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
        count = int(np.prod(shape, dtype=np.int64))
        blob = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        tensors[name] = blob.astype(np.float64).reshape(shape)
        offset += 4 * count
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes after tensors")
    return tensors
