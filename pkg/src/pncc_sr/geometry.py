"""Core value types and pinhole backprojection.

Depths are meters everywhere inside the library. Pixel (u, v) sits at the
continuous position (u, v); there is no half-pixel offset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Intrinsics:
    f_x: float
    f_y: float
    c_x: float
    c_y: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.f_x > 0 and self.f_y > 0):
            raise ValueError(f"focal lengths must be positive, got ({self.f_x}, {self.f_y})")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"resolution must be >= 1x1, got {self.width}x{self.height}")

    def to_dict(self) -> dict:
        return {
            "f_x": float(self.f_x),
            "f_y": float(self.f_y),
            "c_x": float(self.c_x),
            "c_y": float(self.c_y),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(
            float(d["f_x"]), float(d["f_y"]), float(d["c_x"]), float(d["c_y"]),
            int(d["width"]), int(d["height"]),
        )


@dataclass(frozen=True, eq=False)
class DepthMap:
    """H x W metric depth with an authoritative validity mask.

    Invalid pixels are forced to the sentinel 0.0 on construction, so two
    maps that agree on their valid pixels are indistinguishable.
    """

    data: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"depth must be 2-D, got shape {data.shape}")
        if self.valid is None:
            valid = np.isfinite(data) & (data > 0)
        else:
            valid = np.array(self.valid, dtype=bool)
            if valid.shape != data.shape:
                raise ValueError(f"mask shape {valid.shape} != depth shape {data.shape}")
        bad = valid & ~(np.isfinite(data) & (data > 0))
        if bad.any():
            v, u = np.argwhere(bad)[0]
            raise ValueError(f"valid pixel (u={u}, v={v}) has non-positive depth {data[v, u]}")
        data[~valid] = 0.0
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "valid", _frozen(valid))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, DepthMap):
            return NotImplemented
        return np.array_equal(self.valid, other.valid) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return np.array_equal(self.points, other.points)


def rescale_intrinsics(intr: Intrinsics, target_w: int, target_h: int) -> Intrinsics:
    """Intrinsics for the same camera sampled at ``target_w`` x ``target_h``."""
    if target_w < 1 or target_h < 1:
        raise ValueError(f"target resolution must be >= 1x1, got {target_w}x{target_h}")
    kx = target_w / intr.width
    ky = target_h / intr.height
    return Intrinsics(
        intr.f_x * kx, intr.f_y * ky, intr.c_x * kx, intr.c_y * ky, int(target_w), int(target_h)
    )


def check_resolution(intr: Intrinsics, width: int, height: int) -> None:
    if (intr.width, intr.height) != (width, height):
        raise ValueError(
            f"intrinsics are for {intr.width}x{intr.height}, image is {width}x{height}"
        )


def pixel_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major (u, v) coordinate arrays of shape (height, width)."""
    v, u = np.mgrid[0:height, 0:width]
    return u.astype(np.float64), v.astype(np.float64)


def project_coordinates(depth: np.ndarray, intr: Intrinsics, s: float = 1.0) -> np.ndarray:
    """Per-pixel camera coordinates divided by ``s``, shape (H, W, 3)."""
    h, w = depth.shape
    u, v = pixel_grid(w, h)
    x = (u - intr.c_x) * depth / (intr.f_x * s)
    y = (v - intr.c_y) * depth / (intr.f_y * s)
    z = depth / s
    return np.stack([x, y, z], axis=-1)


def backproject(d: DepthMap, intr: Intrinsics) -> PointCloud:
    """One camera-frame point per valid pixel, in row-major pixel order."""
    check_resolution(intr, d.width, d.height)
    xyz = project_coordinates(d.data, intr)
    return PointCloud(xyz[d.valid])
