"""Forward pass of the frustum segmentation network (inference only).

Layout, top to bottom:

* context block: three SFC layers, widths C/2, C, C
* extraction layer 1: SFC blocks at full resolution
* extraction layers 2-4: a downsampling SFC block (F2PS) then SFC blocks
* upsampling SFCs bringing layers 2-4 back onto every input point
* head: concat(context, L1, up2, up3, up4) -> SFC layers 2C, C -> linear n

An SFC layer is SFC -> batch norm -> Hardswish; an SFC block is two layers
with a residual add around them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCloud, ShapeMismatch
from .frustum import FrustumGrid, build_frustum_grid
from .geometry import NormStats, PointCloud, SphericalConfig, normalize_features, project_cloud
from .hashindex import HashIndex, build_hash_index
from .sampling import f2ps, rebuild_downsampled_grid
from .sfconv import ConvKernel, GatherPlan, gather_neighbors, gather_upsample, read_tensors, sfc_forward, write_tensors


def _float(x):
    x = np.asarray(x)
    return x if x.dtype == np.float32 else x.astype(np.float64)


def hardswish(x):
    x = _float(x)
    out = x * np.clip(x + 3.0, 0.0, 6.0) / 6.0
    # x * 6 / 6 need not round back to x
    np.copyto(out, x, where=x >= 3.0)
    return out + 0.0


def bn_inference(x, scale, shift, mean, var, eps=1e-5):
    x = _float(x)
    if x.ndim != 2 or any(np.shape(p) != (x.shape[1],) for p in (scale, shift, mean, var)):
        raise ShapeMismatch("batch norm parameters must match the channel count")
    gain = np.asarray(scale, dtype=np.float64) / np.sqrt(np.asarray(var, dtype=np.float64) + eps)
    offset = np.asarray(shift, dtype=np.float64) - np.asarray(mean, dtype=np.float64) * gain
    return x * gain.astype(x.dtype) + offset.astype(x.dtype)


@dataclass(frozen=True)
class NetworkConfig:
    channels: int = 32
    classes: int = 20
    blocks: tuple = (2, 2, 2, 2)
    kernel: int = 3
    strides: tuple = (2, 2)
    bn_eps: float = 1e-5
    in_channels: int = 5
    dtype: type = np.float32
    projection: SphericalConfig = field(default_factory=SphericalConfig)
    norm: NormStats = field(default_factory=NormStats)

    def __post_init__(self):
        if self.channels < 1 or self.classes < 2:
            raise ValueError("need channels >= 1 and classes >= 2")
        if self.kernel % 2 == 0 or len(self.blocks) != 4:
            raise ValueError("kernel must be odd and blocks must list four layers")

    @property
    def context_widths(self):
        return (max(self.channels // 2, 1), self.channels, self.channels)

    @property
    def head_widths(self):
        return (2 * self.channels, self.channels)

    def up_rate(self, level):
        return (self.strides[0] ** level, self.strides[1] ** level)

    def up_kernel(self, level):
        # 2x -> 3, 4x -> 7, 8x -> 15
        return 2 * max(self.up_rate(level)) - 1

    @classmethod
    def full(cls, **kw):
        return cls(channels=128, blocks=(3, 3, 5, 2), **kw)

    @classmethod
    def from_mapping(cls, values: dict, projection: SphericalConfig | None = None):
        kw = {}
        if "channels" in values:
            kw["channels"] = int(values["channels"])
        if "classes" in values:
            kw["classes"] = int(values["classes"])
        if "blocks" in values:
            kw["blocks"] = tuple(int(b) for b in str(values["blocks"]).split(","))
        if "strides" in values:
            kw["strides"] = tuple(int(s) for s in str(values["strides"]).split(","))
        if "kernel" in values:
            kw["kernel"] = int(values["kernel"])
        if "bn_eps" in values:
            kw["bn_eps"] = float(values["bn_eps"])
        if projection is not None:
            kw["projection"] = projection
        return cls(**kw)

    def to_mapping(self):
        return {"channels": self.channels, "classes": self.classes, "blocks": list(self.blocks),
                "kernel": self.kernel, "strides": list(self.strides), "bn_eps": self.bn_eps,
                **self.projection.to_mapping()}


@dataclass
class LayerParams:
    """Named parameter tensors. Conv weights are (K*K, C_out, C_in)."""

    tensors: dict

    def conv(self, name) -> ConvKernel:
        return ConvKernel(self.tensors[name + ".weight"], self.tensors.get(name + ".bias"))

    def bn(self, name):
        t = self.tensors
        return (t[name + ".scale"], t[name + ".shift"], t[name + ".mean"], t[name + ".var"])

    def linear(self, name):
        return self.tensors[name + ".weight"], self.tensors[name + ".bias"]

    def save(self, path):
        write_tensors(path, self.tensors)

    @classmethod
    def load(cls, path, cfg: NetworkConfig | None = None):
        params = cls(read_tensors(path))
        if cfg is not None:
            expected = param_shapes(cfg)
            for name, shape in expected.items():
                got = params.tensors.get(name)
                if got is None or got.shape != shape:
                    raise ShapeMismatch(f"{name}: expected {shape}, got {None if got is None else got.shape}")
            for name, arr in params.tensors.items():
                if name.endswith(".var") and np.any(arr < 0):
                    raise ValueError(f"{name}: negative variance")
        return params


def _layer_specs(cfg: NetworkConfig):
    """Yield (kind, name, shape-info) for every parameter group, in order."""
    K, C = cfg.kernel, cfg.channels
    c_in = cfg.in_channels
    for i, width in enumerate(cfg.context_widths):
        yield "conv", f"context.{i}", (K, c_in, width)
        c_in = width
    for level in range(1, 5):
        if level > 1:
            yield "conv", f"layer{level}.down.conv1", (K, C, C)
            yield "conv", f"layer{level}.down.conv2", (K, C, C)
        for b in range(cfg.blocks[level - 1]):
            yield "conv", f"layer{level}.block{b}.conv1", (K, C, C)
            yield "conv", f"layer{level}.block{b}.conv2", (K, C, C)
    for level in range(2, 5):
        yield "up", f"up{level}", (cfg.up_kernel(level - 1), C, C)
    c_in = 5 * C
    for i, width in enumerate(cfg.head_widths):
        yield "conv", f"head.{i}", (K, c_in, width)
        c_in = width
    yield "linear", "head.linear", (1, C, cfg.classes)
    for level in range(1, 5):
        yield "linear", f"aux{level}.linear", (1, C, cfg.classes)


def param_shapes(cfg: NetworkConfig) -> dict:
    shapes = {}
    for kind, name, (a, c_in, c_out) in _layer_specs(cfg):
        if kind in ("conv", "up"):
            shapes[name + ".weight"] = (a * a, c_out, c_in)
        if kind == "conv":
            for p in ("scale", "shift", "mean", "var"):
                shapes[f"{name}.bn.{p}"] = (c_out,)
        if kind == "linear":
            shapes[name + ".weight"] = (c_out, c_in)
            shapes[name + ".bias"] = (c_out,)
    return shapes


def init_params(cfg: NetworkConfig, seed=0) -> LayerParams:
    """Seeded uniform init in +-1/sqrt(fan_in); batch norm starts as identity."""
    rng = np.random.default_rng(seed)
    t = {}
    for kind, name, (a, c_in, c_out) in _layer_specs(cfg):
        if kind in ("conv", "up"):
            t[name + ".weight"] = ConvKernel.random(a, c_in, c_out, rng, bias=False).weights
        if kind == "conv":
            t[name + ".bn.scale"] = np.ones(c_out)
            t[name + ".bn.shift"] = np.zeros(c_out)
            t[name + ".bn.mean"] = np.zeros(c_out)
            t[name + ".bn.var"] = np.ones(c_out)
        if kind == "linear":
            bound = 1.0 / np.sqrt(c_in)
            t[name + ".weight"] = rng.uniform(-bound, bound, size=(c_out, c_in))
            t[name + ".bias"] = rng.uniform(-bound, bound, size=c_out)
    return LayerParams(t)


@dataclass
class Level:
    """One scale of the encoder: the points, their grid and hash index."""

    grid: FrustumGrid
    index: HashIndex
    xyz: np.ndarray
    to_input: np.ndarray  # ids of these points in the input cloud
    _plan: GatherPlan | None = None

    @property
    def N(self):
        return self.grid.N

    def plan(self, K, wrap):
        if self._plan is None or self._plan.K != K:
            self._plan = gather_neighbors(np.arange(self.N), self.grid, self.index, K, wrap)
        return self._plan


def sfc_layer_forward(features, plan, params: LayerParams, name, eps):
    out = sfc_forward(features, plan, params.conv(name))
    return hardswish(bn_inference(out, *params.bn(name + ".bn"), eps=eps))


def sfc_block_forward(features, level: Level, params: LayerParams, name, cfg: NetworkConfig):
    plan = level.plan(cfg.kernel, cfg.projection.wrap_azimuth)
    h = sfc_layer_forward(features, plan, params, name + ".conv1", cfg.bn_eps)
    h = sfc_layer_forward(h, plan, params, name + ".conv2", cfg.bn_eps)
    return features + h


def downsample_level(level: Level, strides) -> tuple:
    sampled = f2ps(level.grid, level.index, level.xyz, strides)
    grid = rebuild_downsampled_grid(sampled)
    child = Level(grid, build_hash_index(grid), level.xyz[sampled.parent_indices],
                  level.to_input[sampled.parent_indices])
    return sampled, child


def downsample_block_forward(features, level: Level, params: LayerParams, name, cfg: NetworkConfig):
    """F2PS, then an SFC block whose first conv reads the pre-sampling cloud."""
    wrap = cfg.projection.wrap_azimuth
    sampled, child = downsample_level(level, cfg.strides)
    first = gather_neighbors(sampled.parent_indices, level.grid, level.index, cfg.kernel, wrap)
    h = sfc_layer_forward(features, first, params, name + ".conv1", cfg.bn_eps)
    h = sfc_layer_forward(h, child.plan(cfg.kernel, wrap), params, name + ".conv2", cfg.bn_eps)
    return features[sampled.parent_indices] + h, child


def build_input_level(cloud: PointCloud, cfg: NetworkConfig) -> Level:
    u, v, r = project_cloud(cloud, cfg.projection)
    grid = build_frustum_grid(u, v, r, cfg.projection.H, cfg.projection.W)
    return Level(grid, build_hash_index(grid), cloud.xyz, np.arange(len(cloud)))


@dataclass
class ForwardResult:
    logits: np.ndarray
    aux_logits: list
    level_sizes: list


def sfcnet_forward(cloud: PointCloud, params: LayerParams, cfg: NetworkConfig) -> ForwardResult:
    """Per-point class logits for every input point, plus the four auxiliary
    decodings of extraction layers 1-4 used by the multi-layer loss."""
    if len(cloud) == 0:
        raise EmptyCloud("cannot run the network on an empty cloud")
    proj = cfg.projection
    wrap = proj.wrap_azimuth
    base = build_input_level(cloud, cfg)
    x = normalize_features(cloud.features, cfg.norm).astype(cfg.dtype)
    if x.shape[1] != cfg.in_channels:
        raise ShapeMismatch(f"{x.shape[1]} input channels, config expects {cfg.in_channels}")

    plan0 = base.plan(cfg.kernel, wrap)
    for i in range(len(cfg.context_widths)):
        x = sfc_layer_forward(x, plan0, params, f"context.{i}", cfg.bn_eps)
    context = x

    level, feats, per_level = base, context, []
    for lv in range(1, 5):
        if lv > 1:
            feats, level = downsample_block_forward(feats, level, params, f"layer{lv}.down", cfg)
        for b in range(cfg.blocks[lv - 1]):
            feats = sfc_block_forward(feats, level, params, f"layer{lv}.block{b}", cfg)
        per_level.append((level, feats))

    decoded = [per_level[0][1]]
    g0 = base.grid
    for lv in range(2, 5):
        level, feats = per_level[lv - 1]
        plan = gather_upsample(level.grid, level.index, g0.u, g0.v, g0.r, cfg.up_rate(lv - 1),
                               cfg.up_kernel(lv - 1), (proj.H, proj.W), wrap)
        decoded.append(sfc_forward(feats, plan, params.conv(f"up{lv}")))

    h = np.concatenate([context] + decoded, axis=1)
    for i in range(len(cfg.head_widths)):
        h = sfc_layer_forward(h, plan0, params, f"head.{i}", cfg.bn_eps)
    w, b = params.linear("head.linear")
    logits = h @ w.T.astype(h.dtype) + b.astype(h.dtype)
    aux = []
    for lv, f in enumerate(decoded, 1):
        w, b = params.linear(f"aux{lv}.linear")
        aux.append(f @ w.T.astype(f.dtype) + b.astype(f.dtype))
    return ForwardResult(logits, aux, [lv.N for lv, _ in per_level])

