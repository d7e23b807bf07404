"""Masked RMSE, Chamfer distance and wall-clock timing."""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInputError
from .geometry import DepthMap, PointCloud

LEAF_SIZE = 16
# candidates re-scored exactly per query; guards against last-bit disagreement
# between the tree's internal distance and the canonical formula
_CANDIDATES = 8


def rmse_masked(pred: DepthMap, gt: DepthMap) -> float:
    """RMSE in centimeters over pixels valid in both maps."""
    if pred.data.shape != gt.data.shape:
        raise ValueError(f"resolution mismatch {pred.data.shape} vs {gt.data.shape}")
    mask = pred.valid & gt.valid
    if not mask.any():
        raise EmptyInputError("no pixel is valid in both depth maps")
    diff = pred.data[mask] - gt.data[mask]
    return math.sqrt(math.fsum(diff * diff) / diff.size) * 100.0


def _as_points(c) -> np.ndarray:
    pts = c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyInputError("Chamfer distance needs two non-empty clouds")
    return pts


def point_distance(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Euclidean distance with a fixed evaluation order, broadcasting over rows."""
    dx = p[..., 0] - q[..., 0]
    dy = p[..., 1] - q[..., 1]
    dz = p[..., 2] - q[..., 2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """For every point of ``src``, the distance to its nearest point of ``dst``."""
    tree = cKDTree(dst, leafsize=LEAF_SIZE, balanced_tree=True)
    k = min(_CANDIDATES, len(dst))
    _, idx = tree.query(src, k=k)
    idx = idx.reshape(len(src), k)
    return point_distance(src[:, None, :], dst[idx]).min(axis=1)


def nearest_distances_brute(src: np.ndarray, dst: np.ndarray, block: int = 256) -> np.ndarray:
    out = np.empty(len(src))
    for i in range(0, len(src), block):
        out[i:i + block] = point_distance(src[i:i + block, None, :], dst[None, :, :]).min(axis=1)
    return out


def _symmetric_mean(ab: np.ndarray, ba: np.ndarray) -> float:
    # fsum is exactly rounded, so the result does not depend on summation order
    return 0.5 * (math.fsum(ab) / len(ab) + math.fsum(ba) / len(ba))


def chamfer(a, b) -> float:
    """0.5 * (mean nearest distance a->b + mean nearest distance b->a)."""
    pa, pb = _as_points(a), _as_points(b)
    return _symmetric_mean(nearest_distances(pa, pb), nearest_distances(pb, pa))


def chamfer_brute(a, b) -> float:
    pa, pb = _as_points(a), _as_points(b)
    return _symmetric_mean(nearest_distances_brute(pa, pb), nearest_distances_brute(pb, pa))


@dataclass(frozen=True)
class TimingStats:
    median_s: float
    mean_s: float
    stdev_s: float
    n_reps: int

    @property
    def cv(self) -> float:
        return self.stdev_s / self.mean_s if self.mean_s > 0 else 0.0


def bench(run, n_warmup: int = 1, n_reps: int = 5) -> TimingStats:
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    for _ in range(n_warmup):
        run()
    times = []
    for _ in range(n_reps):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    stdev = statistics.stdev(times) if n_reps > 1 else 0.0
    return TimingStats(statistics.median(times), statistics.fmean(times), stdev, n_reps)


@dataclass(frozen=True)
class EvalReport:
    rmse: float
    chamfer: float
    time_total_s: float | None
    time_per_frame_s: float | None
    param_count: int
    n_frames: int
    label: str | None = None

    def __post_init__(self):
        for name in ("rmse", "chamfer", "time_total_s", "time_per_frame_s"):
            val = getattr(self, name)
            if val is not None and not (math.isfinite(val) and val >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {val}")

    def to_json(self) -> dict:
        doc = {
            "rmse_cm": self.rmse,
            "chamfer": self.chamfer,
            "time_s": self.time_per_frame_s,
            "params": self.param_count,
            "frames": self.n_frames,
        }
        if self.label is not None:
            doc["label"] = self.label
        return doc


def aggregate(frames: list[EvalReport], label: str = "aggregate") -> EvalReport:
    """Mean RMSE and Chamfer over frames; times are summed when present."""
    if not frames:
        raise EmptyInputError("nothing to aggregate")
    times = [f.time_per_frame_s for f in frames]
    total = math.fsum(times) if all(t is not None for t in times) else None
    return EvalReport(
        rmse=math.fsum(f.rmse for f in frames) / len(frames),
        chamfer=math.fsum(f.chamfer for f in frames) / len(frames),
        time_total_s=total,
        time_per_frame_s=None if total is None else total / len(frames),
        param_count=frames[0].param_count,
        n_frames=len(frames),
        label=label,
    )


def write_jsonl(path, reports: list[EvalReport]) -> None:
    with open(path, "w") as fh:
        for rep in reports:
            fh.write(json.dumps(rep.to_json(), sort_keys=True) + "\n")
