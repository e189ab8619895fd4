"""Spherical projection of LiDAR scans and input feature normalization."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ZeroRangePoint


@dataclass
class PointCloud:
    """A raw scan.

    ``xyz`` is (N, 3) in meters, ``intensity`` is (N,), ``labels`` is an
    optional (N,) array of class ids.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if self.intensity.shape[0] != self.xyz.shape[0]:
            raise ValueError("intensity length does not match point count")
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("non-finite coordinates")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != self.xyz.shape[0]:
                raise ValueError("labels length does not match point count")

    def __len__(self):
        return self.xyz.shape[0]

    @property
    def ranges(self) -> np.ndarray:
        return np.sqrt(np.sum(self.xyz * self.xyz, axis=1))

    @property
    def features(self) -> np.ndarray:
        """(N, 5) matrix of x, y, z, range, intensity."""
        return np.column_stack([self.xyz, self.ranges, self.intensity])

    def subset(self, ids) -> "PointCloud":
        ids = np.asarray(ids, dtype=np.int64)
        labels = None if self.labels is None else self.labels[ids]
        return PointCloud(self.xyz[ids], self.intensity[ids], labels)


@dataclass(frozen=True)
class SphericalConfig:
    """Projection geometry. Field-of-view angles are stored in radians;
    ``fov_down`` is the magnitude of the downward half-angle."""

    H: int = 64
    W: int = 1800
    fov_up: float = math.radians(3.0)
    fov_down: float = math.radians(25.0)
    wrap_azimuth: bool = True

    def __post_init__(self):
        if self.H < 1 or self.W < 1:
            raise ConfigError(f"grid must be at least 1x1, got {self.H}x{self.W}")
        if not self.fov_up + self.fov_down > 0:
            raise ConfigError("fov_up + fov_down must be positive")

    @property
    def fov(self) -> float:
        return self.fov_up + self.fov_down

    @classmethod
    def from_degrees(cls, H, W, fov_up_deg, fov_down_deg, wrap_azimuth=True):
        return cls(int(H), int(W), math.radians(fov_up_deg), math.radians(fov_down_deg),
                   bool(wrap_azimuth))

    @classmethod
    def from_mapping(cls, values: dict) -> "SphericalConfig":
        base = PRESETS.get(values.get("preset", "semantickitti"))
        if base is None:
            raise ConfigError(f"unknown preset {values.get('preset')!r}")
        merged = {**base, **values}
        return cls.from_degrees(
            int(merged["height"]), int(merged["width"]),
            float(merged["fov_up_deg"]), float(merged["fov_down_deg"]),
            parse_bool(merged.get("wrap_azimuth", True)),
        )

    def with_resolution(self, H, W) -> "SphericalConfig":
        return SphericalConfig(int(H), int(W), self.fov_up, self.fov_down, self.wrap_azimuth)

    def to_mapping(self) -> dict:
        return {
            "height": self.H,
            "width": self.W,
            "fov_up_deg": round(math.degrees(self.fov_up), 9),
            "fov_down_deg": round(math.degrees(self.fov_down), 9),
            "wrap_azimuth": self.wrap_azimuth,
        }


# fov values are the conventional sensor ones (HDL-64E / HDL-32E).
PRESETS = {
    "semantickitti": {"height": 64, "width": 1800, "fov_up_deg": 3.0, "fov_down_deg": 25.0,
                      "wrap_azimuth": True, "channels": 32, "classes": 20},
    "nuscenes": {"height": 32, "width": 1024, "fov_up_deg": 10.0, "fov_down_deg": 30.0,
                 "wrap_azimuth": True, "channels": 256, "classes": 17},
}


def parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def read_config(path) -> dict:
    """Parse a ``key = value`` config file. ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
    return values


def resolve_config_path(path=None):
    """Explicit path wins, then the SFC_CONFIG environment variable."""
    return path or os.environ.get("SFC_CONFIG") or None


@dataclass(frozen=True)
class NormStats:
    mean: tuple = (10.88, 0.23, -1.04, 12.12, 0.21)
    std: tuple = (11.47, 6.91, 0.86, 12.32, 0.16)

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std lengths differ")
        if not all(s > 0 for s in self.std):
            raise ValueError("standard deviations must be positive")


SEMANTICKITTI_STATS = NormStats()


def project_cloud(cloud: PointCloud, config: SphericalConfig):
    """Map every point to integer image coordinates.

    Returns ``(u, v, r)``: column and row indices (floored, then clamped to
    the grid) and the range of each point.
    """
    xyz = cloud.xyz
    r = np.sqrt(np.sum(xyz * xyz, axis=1))
    zero = np.flatnonzero(r == 0)
    if zero.size:
        raise ZeroRangePoint(zero[0])
    # +0.0 folds -0.0 so that the seam at (y=0, x<0) maps to +pi
    azimuth = np.arctan2(xyz[:, 1] + 0.0, xyz[:, 0])
    elevation = np.arcsin(np.clip(xyz[:, 2] / r, -1.0, 1.0)) if r.size else r
    u_cont = 0.5 * (1.0 - azimuth / np.pi) * config.W
    v_cont = (1.0 - (elevation + config.fov_down) / config.fov) * config.H
    u = np.clip(np.floor(u_cont), 0, config.W - 1).astype(np.int64)
    v = np.clip(np.floor(v_cont), 0, config.H - 1).astype(np.int64)
    return u, v, r


def normalize_features(features, stats: NormStats = SEMANTICKITTI_STATS) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    return (features - np.asarray(stats.mean)) / np.asarray(stats.std)


def denormalize_features(features, stats: NormStats = SEMANTICKITTI_STATS) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    return features * np.asarray(stats.std) + np.asarray(stats.mean)


@dataclass
class RunConfig:
    """Projection plus the network/loss fields read from the same file."""

    projection: SphericalConfig = field(default_factory=SphericalConfig)
    extra: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path=None) -> "RunConfig":
        path = resolve_config_path(path)
        values = read_config(path) if path else {}
        preset = PRESETS.get(values.get("preset", "semantickitti"), {})
        extra = {k: v for k, v in {**preset, **values}.items()
                 if k not in ("height", "width", "fov_up_deg", "fov_down_deg", "wrap_azimuth")}
        return cls(SphericalConfig.from_mapping(values), extra)
