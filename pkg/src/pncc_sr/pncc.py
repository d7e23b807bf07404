"""Projected normalized coordinate code (PNCC) encoding and decoding.

A depth map plus pinhole intrinsics becomes an H x W x 3 image whose channels
hold camera-frame X, Y, Z divided by a scale factor ``s``, shifted by per-axis
minima and divided by one shared extent so every value lands in [0, 1]. The
shift and extent are kept in :class:`NormalizationParams`, which makes the
mapping exactly invertible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInputError, StateError
from .geometry import DepthMap, Intrinsics, PointCloud, check_resolution, project_coordinates

DEFAULT_S = 10.0


@dataclass(frozen=True)
class NormalizationParams:
    offset: tuple[float, float, float]
    scale: float
    s: float
    degenerate: bool = False

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not self.s > 0:
            raise ValueError(f"s must be positive, got {self.s}")
        object.__setattr__(self, "offset", tuple(float(o) for o in self.offset))

    def normalize(self, xyz: np.ndarray) -> np.ndarray:
        """Map coordinates already divided by ``s`` into channel values."""
        return (xyz - np.asarray(self.offset)) / self.scale

    def unnormalize(self, channels: np.ndarray) -> np.ndarray:
        """Channel values back to metric coordinates (meters)."""
        return (channels * self.scale + np.asarray(self.offset)) * self.s

    def to_dict(self) -> dict:
        return {
            "offset": list(self.offset),
            "scale": self.scale,
            "s": self.s,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationParams":
        return cls(tuple(d["offset"]), float(d["scale"]), float(d["s"]), bool(d.get("degenerate", False)))


@dataclass(frozen=True, eq=False)
class PnccImage:
    channels: np.ndarray
    valid: np.ndarray
    norm: NormalizationParams | None

    def __post_init__(self):
        ch = np.array(self.channels, dtype=np.float64)
        if ch.ndim != 3 or ch.shape[2] != 3:
            raise ValueError(f"PNCC channels must be H x W x 3, got {ch.shape}")
        valid = np.array(self.valid, dtype=bool)
        if valid.shape != ch.shape[:2]:
            raise ValueError(f"mask shape {valid.shape} != image shape {ch.shape[:2]}")
        ch.flags.writeable = False
        valid.flags.writeable = False
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.channels.shape[0]

    @property
    def width(self) -> int:
        return self.channels.shape[1]


def fill_invalid(channels: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Copy into each invalid pixel the values of its nearest valid pixel.

    Distance is Euclidean in pixel units. Equidistant candidates resolve to
    the one first in row-major order (smallest v, then smallest u). Works on
    H x W or H x W x C arrays; valid pixels are returned untouched.
    """
    channels = np.asarray(channels)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != channels.shape[:2]:
        raise ValueError(f"mask shape {valid.shape} != image shape {channels.shape[:2]}")
    src = np.argwhere(valid)
    if len(src) == 0:
        raise EmptyInputError("fill_invalid needs at least one valid pixel")
    out = channels.copy()
    dst = np.argwhere(~valid)
    if len(dst) == 0:
        return out

    tree = cKDTree(src, leafsize=16)
    k = min(2, len(src))
    dist, idx = tree.query(dst, k=k)
    if k == 1:
        dist, idx = dist[:, None], idx[:, None]
    nearest = idx[:, 0].copy()
    best_sq = ((src[idx[:, 0]] - dst) ** 2).sum(axis=1)
    if k == 2:
        second_sq = ((src[idx[:, 1]] - dst) ** 2).sum(axis=1)
        tied = np.flatnonzero(second_sq == best_sq)
        for i in tied:
            # integer squared distances: neighbouring values differ by >= 1
            cand = tree.query_ball_point(dst[i], np.sqrt(best_sq[i]) + 1e-6)
            cand = np.asarray(cand)
            sq = ((src[cand] - dst[i]) ** 2).sum(axis=1)
            nearest[i] = cand[sq == best_sq[i]].min()
    out[dst[:, 0], dst[:, 1]] = channels[src[nearest, 0], src[nearest, 1]]
    return out


def compute_normalization(xyz: np.ndarray, valid: np.ndarray, s: float) -> NormalizationParams:
    """Per-axis minima and one shared extent over the valid pixels of ``xyz``."""
    pts = xyz[valid]
    if len(pts) == 0:
        raise EmptyInputError("PNCC encoding needs at least one valid pixel")
    lo = pts.min(axis=0)
    extent = float((pts.max(axis=0) - lo).max())
    if extent > 0:
        return NormalizationParams(tuple(lo), extent, s)
    return NormalizationParams(tuple(lo), 1.0, s, degenerate=True)


def encode(
    d: DepthMap, intr: Intrinsics, s: float = DEFAULT_S, norm: NormalizationParams | None = None
) -> PnccImage:
    """Encode a depth map as a PNCC image.

    With ``norm`` given, those parameters are applied as-is instead of being
    fitted to ``d``; values may then fall outside [0, 1].
    """
    check_resolution(intr, d.width, d.height)
    if norm is None:
        if not s > 0:
            raise ValueError(f"s must be positive, got {s}")
        xyz = project_coordinates(d.data, intr, s)
        norm = compute_normalization(xyz, d.valid, s)
    else:
        if not d.valid.any():
            raise EmptyInputError("PNCC encoding needs at least one valid pixel")
        xyz = project_coordinates(d.data, intr, norm.s)
    channels = fill_invalid(norm.normalize(xyz), d.valid)
    return PnccImage(channels, d.valid, norm)


def channels_from_depth(depth: np.ndarray, intr: Intrinsics, norm: NormalizationParams) -> np.ndarray:
    """Normalized XYZ for every pixel of a dense depth array (no mask, no fill)."""
    check_resolution(intr, depth.shape[1], depth.shape[0])
    return norm.normalize(project_coordinates(depth, intr, norm.s))


def _require_norm(p: PnccImage) -> NormalizationParams:
    if p.norm is None:
        raise StateError("PNCC image carries no normalization parameters")
    return p.norm


def decode_depth(p: PnccImage) -> DepthMap:
    norm = _require_norm(p)
    z = (p.channels[..., 2] * norm.scale + norm.offset[2]) * norm.s
    valid = p.valid & (z > 0)
    return DepthMap(np.where(valid, z, 0.0), valid)


def decode_pointcloud(p: PnccImage) -> PointCloud:
    norm = _require_norm(p)
    return PointCloud(norm.unnormalize(p.channels[p.valid]))
