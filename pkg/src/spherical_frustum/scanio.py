"""KITTI-format scan and label files, plus a ray-cast synthetic scene generator.

Scans are flat little-endian float32 records ``(x, y, z, intensity)``.
Labels are little-endian uint32, semantic class in the low 16 bits and
instance id in the high 16 bits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadSpec, CountMismatch, MalformedLabels, MalformedScan
from .geometry import PointCloud

_SCAN_DTYPE = np.dtype("<f4")
_LABEL_DTYPE = np.dtype("<u4")


def read_scan(path) -> PointCloud:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) % 16:
        raise MalformedScan(f"{path}: {len(data)} bytes is not a multiple of 16")
    rec = np.frombuffer(data, dtype=_SCAN_DTYPE).reshape(-1, 4).astype(np.float64)
    return PointCloud(rec[:, :3], rec[:, 3])


def write_scan(path, cloud: PointCloud):
    rec = np.column_stack([cloud.xyz, cloud.intensity]).astype(_SCAN_DTYPE)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def read_labels(path, expected_n=None) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) % 4:
        raise MalformedLabels(f"{path}: {len(data)} bytes is not a multiple of 4")
    raw = np.frombuffer(data, dtype=_LABEL_DTYPE)
    if expected_n is not None and raw.shape[0] != expected_n:
        raise CountMismatch(f"{path}: {raw.shape[0]} labels for {expected_n} points")
    return (raw & 0xFFFF).astype(np.int64)


def write_labels(path, semantic, instance=None):
    semantic = np.asarray(semantic, dtype=np.int64)
    instance = np.zeros_like(semantic) if instance is None else np.asarray(instance, dtype=np.int64)
    if np.any((semantic < 0) | (semantic >= 1 << 16)) or np.any((instance < 0) | (instance >= 1 << 16)):
        raise ValueError("semantic and instance ids must fit in 16 bits")
    raw = ((instance << 16) | semantic).astype(_LABEL_DTYPE)
    with open(path, "wb") as fh:
        fh.write(raw.tobytes())


def write_predictions(path, predictions):
    write_labels(path, predictions)


# Synthetic scenes ---------------------------------------------------------


@dataclass(frozen=True)
class BeamModel:
    """A spinning sensor: ``rows`` beams evenly spread from ``elev_up_deg``
    down to ``-elev_down_deg``, ``cols`` firings per turn.

    Each firing reports up to ``returns`` echoes. A later echo exists where
    the beam footprint (``divergence_deg`` wide) straddles an object edge, or
    where the first surface lets part of the beam through (its ``transmit``
    probability). Echoes of one firing share its line of sight.
    """

    rows: int = 64
    cols: int = 2083
    elev_up_deg: float = 2.0
    elev_down_deg: float = 24.0
    max_range: float = 80.0
    returns: int = 2
    range_noise: float = 0.01
    azimuth_jitter: float = 0.25
    elevation_jitter: float = 0.0
    divergence_deg: float = 0.15

    @classmethod
    def from_mapping(cls, values):
        known = set(cls.__dataclass_fields__)
        extra = set(values) - known
        if extra:
            raise BadSpec(f"unknown beam model fields {sorted(extra)}")
        return cls(**values)


@dataclass
class SceneSpec:
    primitives: list
    beams: BeamModel = field(default_factory=BeamModel)

    @classmethod
    def from_mapping(cls, values):
        prims = values.get("primitives")
        if not prims:
            raise BadSpec("scene needs at least one primitive")
        for p in prims:
            _validate_primitive(p)
        return cls(list(prims), BeamModel.from_mapping(values.get("beams", {})))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_mapping(json.load(fh))

    def to_mapping(self):
        return {"primitives": self.primitives, "beams": dict(self.beams.__dict__)}


_REQUIRED = {
    "plane": ("point", "normal"),
    "cylinder": ("center", "radius", "z"),
    "box": ("min", "max"),
}


def _validate_primitive(p):
    kind = p.get("type")
    if kind not in _REQUIRED:
        raise BadSpec(f"unknown primitive type {kind!r}")
    missing = [k for k in _REQUIRED[kind] + ("class",) if k not in p]
    if missing:
        raise BadSpec(f"{kind} is missing {missing}")


def _ray_directions(beams: BeamModel, rng):
    rows, cols = beams.rows, beams.cols
    if rows < 1 or cols < 1 or beams.returns not in (1, 2):
        raise BadSpec("beam model needs rows, cols >= 1 and returns of 1 or 2")
    if rows == 1:
        elev = np.array([math.radians(beams.elev_up_deg)])
    else:
        elev = np.linspace(math.radians(beams.elev_up_deg), -math.radians(beams.elev_down_deg), rows)
    step = 2 * math.pi / cols
    # the first firing falls at a random phase within one step
    az = (np.arange(cols) + rng.uniform()) * step - math.pi
    az = az[None, :] + rng.uniform(-1, 1, size=(rows, cols)) * beams.azimuth_jitter * step
    el = elev[:, None] + rng.uniform(-1, 1, size=(rows, cols)) * math.radians(beams.elevation_jitter)
    el = np.broadcast_to(el, az.shape)
    d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)
    return d.reshape(-1, 3)


def _hit_plane(d, p):
    n = np.asarray(p["normal"], dtype=np.float64)
    q = np.asarray(p["point"], dtype=np.float64)
    denom = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(np.abs(denom) > 1e-12, (q @ n) / denom, np.inf)
    t = np.where(t > 0, t, np.inf)
    if "extent" in p:
        hit = d * t[:, None]
        far = np.linalg.norm(np.nan_to_num(hit - q, posinf=1e18), axis=1) > p["extent"]
        t = np.where(far, np.inf, t)
    return t


def _hit_cylinder(d, p):
    cx, cy = (float(c) for c in p["center"])
    rad = float(p["radius"])
    z0, z1 = (float(z) for z in p["z"])
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = -2.0 * (d[:, 0] * cx + d[:, 1] * cy)
    c = cx * cx + cy * cy - rad * rad
    disc = b * b - 4 * a * c
    t = np.full(d.shape[0], np.inf)
    ok = (disc >= 0) & (a > 1e-12)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    safe_a = np.where(ok, a, 1.0)
    for root in ((-b - sq) / (2 * safe_a), (-b + sq) / (2 * safe_a)):
        z = root * d[:, 2]
        good = ok & (root > 0) & (z >= z0) & (z <= z1) & np.isinf(t)
        t = np.where(good, root, t)
    return t


def _hit_box(d, p):
    lo = np.asarray(p["min"], dtype=np.float64)
    hi = np.asarray(p["max"], dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = lo[None, :] * inv
        t1 = hi[None, :] * inv
    tmin = np.nan_to_num(np.minimum(t0, t1), nan=-np.inf)
    tmax = np.nan_to_num(np.maximum(t0, t1), nan=np.inf)
    near = tmin.max(axis=1)
    far = tmax.min(axis=1)
    return np.where((near <= far) & (near > 0), near, np.inf)


_HITS = {"plane": _hit_plane, "cylinder": _hit_cylinder, "box": _hit_box}


def _first_hits(t):
    prim = np.argmin(t, axis=1)
    return prim, t[np.arange(t.shape[0]), prim]


def gen_synthetic_scene(spec: SceneSpec, seed=0) -> PointCloud:
    """Ray-cast ``spec`` with its beam model. Deterministic for a fixed seed."""
    if not spec.primitives:
        raise BadSpec("scene needs at least one primitive")
    rng = np.random.default_rng(seed)
    beams = spec.beams
    d = _ray_directions(beams, rng)
    n_rays = d.shape[0]

    def cast(dirs):
        t = np.stack([_HITS[p["type"]](dirs, p) for p in spec.primitives], axis=1)
        return np.where(t <= beams.max_range, t, np.inf)

    t = cast(d)
    prim, dist = _first_hits(t)
    rays, prims, dists = [np.arange(n_rays)], [prim], [dist]
    if beams.returns > 1:
        transmit = np.array([float(p.get("transmit", 0.0)) for p in spec.primitives])
        # a ray offset inside the footprint sees what lies past an edge
        ang = rng.uniform(0.0, 2.0 * math.pi, size=n_rays)
        off = math.radians(beams.divergence_deg) * 0.5
        side = np.cross(d, np.array([0.0, 0.0, 1.0]))
        side /= np.maximum(np.linalg.norm(side, axis=1, keepdims=True), 1e-12)
        up = np.cross(side, d)
        d_off = d + off * (np.cos(ang)[:, None] * side + np.sin(ang)[:, None] * up)
        d_off /= np.linalg.norm(d_off, axis=1, keepdims=True)
        prim_off, dist_off = _first_hits(cast(d_off))
        edge = np.isfinite(dist) & np.isfinite(dist_off) & (prim_off != prim) & (dist_off > dist)
        # otherwise the beam may pass through a partly transmissive surface
        t_behind = t.copy()
        t_behind[np.arange(n_rays), prim] = np.inf
        prim_b, dist_b = _first_hits(t_behind)
        through = (~edge & np.isfinite(dist) & np.isfinite(dist_b)
                   & (rng.random(n_rays) < transmit[prim]))
        second_prim = np.where(edge, prim_off, prim_b)
        second_dist = np.where(edge, dist_off, dist_b)
        extra = edge | through
        rays.append(np.flatnonzero(extra))
        prims.append(second_prim[extra])
        dists.append(second_dist[extra])
    ray = np.concatenate(rays)
    prim = np.concatenate(prims)
    dist = np.concatenate(dists)
    # scan order: firing by firing, echoes of a firing nearest first
    order = np.lexsort((dist, ray))
    ray, prim, dist = ray[order], prim[order], dist[order]
    keep = np.isfinite(dist)
    ray, prim, dist = ray[keep], prim[keep], dist[keep]
    dist = dist + rng.normal(0.0, beams.range_noise, size=dist.shape[0]) if beams.range_noise else dist
    dist = np.maximum(dist, 1e-3)
    xyz = d[ray] * dist[:, None]
    classes = np.array([int(p["class"]) for p in spec.primitives])
    base = np.array([float(p.get("intensity", 0.1 + 0.04 * (int(p["class"]) % 20))) for p in spec.primitives])
    intensity = np.clip(base[prim] + rng.normal(0.0, 0.02, size=prim.shape[0]), 0.0, 1.0)
    # round-trip through float32 so scenes written to disk read back identically
    xyz = xyz.astype(np.float32).astype(np.float64)
    intensity = intensity.astype(np.float32).astype(np.float64)
    nonzero = np.any(xyz != 0, axis=1)
    return PointCloud(xyz[nonzero], intensity[nonzero], classes[prim][nonzero])


# SemanticKITTI-style training ids used by the built-in scenes
ROAD, SIDEWALK, BUILDING, VEGETATION, POLE, CAR, PERSON, TRUNK = 9, 11, 13, 15, 18, 1, 6, 16


def street_scene(beams: BeamModel | None = None) -> SceneSpec:
    """A road with kerbside buildings, parked cars, poles, trees and people."""
    prims = [
        {"type": "plane", "point": [0, 0, -1.73], "normal": [0, 0, 1], "class": ROAD},
        {"type": "box", "min": [-60, 7, -1.73], "max": [60, 9, -1.55], "class": SIDEWALK},
        {"type": "box", "min": [-60, -9, -1.73], "max": [60, -7, -1.55], "class": SIDEWALK},
        {"type": "box", "min": [-40, 10, -1.73], "max": [-5, 22, 12], "class": BUILDING},
        {"type": "box", "min": [2, 10, -1.73], "max": [45, 20, 9], "class": BUILDING},
        {"type": "box", "min": [-30, -24, -1.73], "max": [30, -12, 15], "class": BUILDING},
        {"type": "box", "min": [4, 4, -1.73], "max": [8.5, 5.9, -0.2], "class": CAR},
        {"type": "box", "min": [-12, -6.2, -1.73], "max": [-7.5, -4.4, -0.25], "class": CAR},
        {"type": "box", "min": [14, -5.8, -1.73], "max": [18.6, -4.0, -0.1], "class": CAR},
        {"type": "cylinder", "center": [6, -7.5], "radius": 0.12, "z": [-1.73, 4.0], "class": POLE},
        {"type": "cylinder", "center": [-4, 7.5], "radius": 0.12, "z": [-1.73, 4.0], "class": POLE},
        {"type": "cylinder", "center": [20, 7.6], "radius": 0.15, "z": [-1.73, 5.0], "class": POLE},
        {"type": "cylinder", "center": [-18, 8.0], "radius": 0.3, "z": [-1.73, 1.5], "class": TRUNK},
        {"type": "cylinder", "center": [-18, 8.0], "radius": 2.0, "z": [1.5, 5.0], "class": VEGETATION,
         "transmit": 0.5},
        {"type": "cylinder", "center": [3, -6.8], "radius": 0.25, "z": [-1.73, 0.05], "class": PERSON},
        {"type": "cylinder", "center": [-9, 6.5], "radius": 0.25, "z": [-1.73, 0.0], "class": PERSON},
    ]
    return SceneSpec(prims, beams or BeamModel())


def random_scene(seed, rows=32, cols=512, objects=12, returns=2) -> SceneSpec:
    """Ground plane plus randomly placed boxes and poles."""
    rng = np.random.default_rng(seed)
    prims = [{"type": "plane", "point": [0, 0, -1.73], "normal": [0, 0, 1], "class": ROAD}]
    for _ in range(objects):
        ang = rng.uniform(-math.pi, math.pi)
        dist = rng.uniform(3.0, 30.0)
        x, y = dist * math.cos(ang), dist * math.sin(ang)
        if rng.random() < 0.5:
            half = rng.uniform(0.3, 2.5, size=2)
            top = rng.uniform(-0.5, 6.0)
            cls_id = int(rng.choice([CAR, BUILDING, VEGETATION]))
            prims.append({"type": "box", "min": [x - half[0], y - half[1], -1.73],
                          "max": [x + half[0], y + half[1], top], "class": cls_id,
                          "transmit": 0.5 if cls_id == VEGETATION else 0.0})
        else:
            prims.append({"type": "cylinder", "center": [x, y], "radius": float(rng.uniform(0.08, 0.4)),
                          "z": [-1.73, float(rng.uniform(0.0, 5.0))], "class": int(rng.choice([POLE, PERSON, TRUNK]))})
    beams = BeamModel(rows=rows, cols=cols, elev_up_deg=2.0, elev_down_deg=24.0, returns=returns)
    return SceneSpec(prims, beams)


def random_cloud(n, seed=0, fov_up_deg=3.0, fov_down_deg=25.0, max_range=60.0) -> PointCloud:
    """``n`` points with directions uniform over the sensor field of view."""
    rng = np.random.default_rng(seed)
    az = rng.uniform(-math.pi, math.pi, size=n)
    el = rng.uniform(-math.radians(fov_down_deg), math.radians(fov_up_deg), size=n)
    dist = rng.uniform(2.0, max_range, size=n)
    xyz = np.column_stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]) * dist[:, None]
    return PointCloud(xyz, rng.uniform(0.0, 1.0, size=n))
