"""Separable cubic-convolution resizing and the LR degradation protocol."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .geometry import DepthMap, Intrinsics, rescale_intrinsics
from .pncc import fill_invalid

CATMULL_ROM = -0.5
SCALES = (4, 8, 16)


@dataclass(frozen=True)
class ResampleSpec:
    factor: Fraction
    a: float = CATMULL_ROM

    def __post_init__(self):
        f = Fraction(self.factor).limit_denominator(1 << 16)
        if f <= 0:
            raise ValueError(f"resample factor must be positive, got {self.factor}")
        object.__setattr__(self, "factor", f)

    def output_size(self, n: int) -> int:
        m = round(n * self.factor)
        if m < 1:
            raise ValueError(f"resampling {n} pixels by {self.factor} gives an empty output")
        return m


def cubic_kernel(x: np.ndarray, a: float = CATMULL_ROM) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=np.float64))
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_weights(n_in: int, n_out: int, factor: Fraction, a: float = CATMULL_ROM):
    """Tap indices and weights, each (n_out, taps), for one axis.

    Output pixel j samples the input at (j + 0.5) / factor - 0.5. When
    shrinking, the kernel is stretched by 1/factor to suppress aliasing.
    Indices past the border are clamped, and each row is normalized to 1.
    """
    stretch = max(1.0, float(1 / factor))
    support = 2.0 * stretch
    centers = (np.arange(n_out) + 0.5) / float(factor) - 0.5
    first = np.floor(centers - support).astype(np.int64) + 1
    taps = int(np.ceil(2 * support))
    idx = first[:, None] + np.arange(taps)[None, :]
    w = cubic_kernel((idx - centers[:, None]) / stretch, a)
    w = w / w.sum(axis=1, keepdims=True)
    return np.clip(idx, 0, n_in - 1), w


def resize_axis(img: np.ndarray, axis: int, n_out: int, factor: Fraction, a: float) -> np.ndarray:
    idx, w = resize_weights(img.shape[axis], n_out, factor, a)
    moved = np.moveaxis(img, axis, 0)
    shape = (n_out,) + (1,) * (moved.ndim - 1)
    out = np.zeros((n_out,) + moved.shape[1:])
    # fixed tap order keeps results independent of how rows are split
    for t in range(idx.shape[1]):
        out += w[:, t].reshape(shape) * moved[idx[:, t]]
    return np.moveaxis(out, 0, axis)


def bicubic_resize(img: np.ndarray, spec: ResampleSpec | Fraction | float | int) -> np.ndarray:
    """Resize an H x W or H x W x C image by ``spec.factor``."""
    if not isinstance(spec, ResampleSpec):
        spec = ResampleSpec(Fraction(spec))
    img = np.asarray(img, dtype=np.float64)
    if not np.isfinite(img).all():
        raise ValueError("bicubic_resize input contains non-finite values")
    h_out = spec.output_size(img.shape[0])
    w_out = spec.output_size(img.shape[1])
    out = resize_axis(img, 0, h_out, spec.factor, spec.a)
    return resize_axis(out, 1, w_out, spec.factor, spec.a)


def minpool_mask(valid: np.ndarray, r: int) -> np.ndarray:
    """An LR pixel is valid only if all r x r HR pixels under it are."""
    valid = np.asarray(valid, dtype=bool)
    h, w = valid.shape
    if r < 1 or h % r or w % r:
        raise ValueError(f"mask {w}x{h} is not divisible by {r}; crop first")
    return valid.reshape(h // r, r, w // r, r).all(axis=(1, 3))


def check_scale(r: int) -> int:
    if r not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}, got {r}")
    return r


def make_lr_pair(hr: DepthMap, intr: Intrinsics, r: int) -> tuple[DepthMap, Intrinsics]:
    """Degrade an HR depth map: fill holes, bicubic-shrink, min-pool the mask."""
    check_scale(r)
    filled = fill_invalid(hr.data, hr.valid)
    lr = bicubic_resize(filled, ResampleSpec(Fraction(1, r)))
    valid = minpool_mask(hr.valid, r) & (lr > 0)
    lr_intr = rescale_intrinsics(intr, hr.width // r, hr.height // r)
    return DepthMap(np.where(valid, lr, 0.0), valid), lr_intr
