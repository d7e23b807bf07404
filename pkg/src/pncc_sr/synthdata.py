"""Seeded analytic depth scenes and LR/HR training pairs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import DepthMap, Intrinsics, check_resolution, pixel_grid
from .pncc import DEFAULT_S, PnccImage, encode
from .resample import check_scale, make_lr_pair

KINDS = ("slanted_plane", "sphere", "step_edge", "composite")


@dataclass(frozen=True)
class SceneSpec:
    """One analytic scene.

    Parameters per kind (depths in meters, gradients in meters per pixel,
    positions relative to the principal point):

    - slanted_plane: depth, grad_u, grad_v
    - step_edge: depth, step, normal_u, normal_v, offset
    - composite: the union of both sets above
    - sphere: center_x, center_y, center_z, radius, wall (0 means no wall)
    """

    kind: str
    params: dict = field(default_factory=dict)
    width: int = 128
    height: int = 96
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        object.__setattr__(self, "params", {k: float(v) for k, v in self.params.items()})

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": dict(sorted(self.params.items())),
            "width": self.width,
            "height": self.height,
            "dropout_rate": self.dropout_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(d["kind"], d["params"], int(d["width"]), int(d["height"]),
                   float(d["dropout_rate"]), int(d["seed"]))


def default_intrinsics(width: int = 128, height: int = 96) -> Intrinsics:
    """Kinect-like field of view (about 63 x 50 degrees) at any resolution."""
    f = 0.81 * width
    return Intrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


def _plane(p, du, dv):
    return p["depth"] + p["grad_u"] * du + p["grad_v"] * dv


def _step(p, du, dv):
    side = p["normal_u"] * du + p["normal_v"] * dv > p["offset"]
    return np.where(side, p["step"], 0.0)


def _sphere_hit(p, rx, ry):
    # ray (rx, ry, 1) * t; the returned t is the depth of the near hit
    cx, cy, cz, rad = p["center_x"], p["center_y"], p["center_z"], p["radius"]
    rr = rx * rx + ry * ry + 1.0
    rc = rx * cx + ry * cy + cz
    disc = rc * rc - rr * (cx * cx + cy * cy + cz * cz - rad * rad)
    with np.errstate(invalid="ignore"):
        t = (rc - np.sqrt(disc)) / rr
    return np.where(disc >= 0, t, np.inf)


def render(spec: SceneSpec, intr: Intrinsics) -> DepthMap:
    """Per-pixel analytic depth plus seeded dropout."""
    check_resolution(intr, spec.width, spec.height)
    u, v = pixel_grid(spec.width, spec.height)
    du, dv = u - intr.c_x, v - intr.c_y
    p = spec.params
    if spec.kind == "slanted_plane":
        depth = _plane(p, du, dv)
    elif spec.kind == "step_edge":
        depth = p["depth"] + _step(p, du, dv)
    elif spec.kind == "composite":
        depth = _plane(p, du, dv) + _step(p, du, dv)
    else:
        depth = _sphere_hit(p, du / intr.f_x, dv / intr.f_y)
        if p.get("wall", 0.0) > 0:
            depth = np.minimum(depth, p["wall"])
    valid = np.isfinite(depth) & (depth > 0)
    if spec.dropout_rate > 0:
        valid &= np.random.default_rng(spec.seed).random(depth.shape) >= spec.dropout_rate
    return DepthMap(np.where(valid, depth, 0.0), valid)


def depth_at(spec: SceneSpec, intr: Intrinsics, u: float, v: float) -> float:
    """Analytic depth at one pixel, ignoring dropout; NaN where nothing is hit."""
    p = spec.params
    du, dv = u - intr.c_x, v - intr.c_y
    plane = p.get("depth", 0.0) + p.get("grad_u", 0.0) * du + p.get("grad_v", 0.0) * dv
    step = 0.0
    if spec.kind in ("step_edge", "composite"):
        if p["normal_u"] * du + p["normal_v"] * dv > p["offset"]:
            step = p["step"]
    if spec.kind == "slanted_plane":
        return plane
    if spec.kind == "step_edge":
        return p["depth"] + step
    if spec.kind == "composite":
        return plane + step
    # solve |t*ray - c|^2 = radius^2 for the smaller root
    ray = (du / intr.f_x, dv / intr.f_y, 1.0)
    c = (p["center_x"], p["center_y"], p["center_z"])
    a = sum(x * x for x in ray)
    b = sum(x * y for x, y in zip(ray, c))
    q = sum(x * x for x in c) - p["radius"] ** 2
    disc = b * b - a * q
    hit = (b - math.sqrt(disc)) / a if disc >= 0 else math.inf
    wall = p.get("wall", 0.0)
    if wall > 0:
        hit = min(hit, wall)
    return hit if math.isfinite(hit) and hit > 0 else math.nan


def random_scene(rng: np.random.Generator, width: int, height: int, dropout_rate: float,
                 kind: str | None = None) -> SceneSpec:
    intr = default_intrinsics(width, height)
    if kind is None:
        kind = str(rng.choice(["composite", "composite", "sphere", "step_edge", "slanted_plane"]))
    seed = int(rng.integers(0, 2**31 - 1))
    span = max(width, height)
    plane = {
        "depth": rng.uniform(2.0, 4.0),
        "grad_u": rng.uniform(-0.8, 0.8) / span,
        "grad_v": rng.uniform(-0.8, 0.8) / span,
    }
    angle = rng.uniform(0, 2 * np.pi)
    step = {
        "depth": plane["depth"],
        "step": rng.choice([-1, 1]) * rng.uniform(0.2, 1.0),
        "normal_u": np.cos(angle),
        "normal_v": np.sin(angle),
        "offset": rng.uniform(-0.3, 0.3) * span,
    }
    if kind == "slanted_plane":
        params = plane
    elif kind == "step_edge":
        params = step
    elif kind == "composite":
        params = {**plane, **step}
    else:
        cz = rng.uniform(2.0, 3.5)
        params = {
            "center_x": rng.uniform(-0.25, 0.25) * width * cz / intr.f_x,
            "center_y": rng.uniform(-0.25, 0.25) * height * cz / intr.f_y,
            "center_z": cz,
            "radius": rng.uniform(0.3, 0.8),
            "wall": rng.uniform(4.0, 5.0),
        }
    return SceneSpec(kind, params, width, height, dropout_rate, seed)


@dataclass(frozen=True, eq=False)
class Sample:
    """One training pair; iterates as (LR PNCC, HR PNCC, HR mask)."""

    lr: PnccImage
    hr: PnccImage
    mask: np.ndarray
    spec: SceneSpec
    hr_depth: DepthMap
    hr_intr: Intrinsics
    lr_depth: DepthMap
    lr_intr: Intrinsics

    def __iter__(self):
        return iter((self.lr, self.hr, self.mask))


def make_sample(spec: SceneSpec, r: int, s: float = DEFAULT_S) -> Sample:
    """Render, degrade, and encode both halves with the HR scene's normalization."""
    intr = default_intrinsics(spec.width, spec.height)
    hr_depth = render(spec, intr)
    lr_depth, lr_intr = make_lr_pair(hr_depth, intr, r)
    hr = encode(hr_depth, intr, s)
    lr = encode(lr_depth, lr_intr, norm=hr.norm)
    return Sample(lr, hr, hr_depth.valid, spec, hr_depth, intr, lr_depth, lr_intr)


def scene_specs(n_scenes: int, seed: int, width: int = 128, height: int = 96,
                dropout_rate: float = 0.002) -> list[SceneSpec]:
    rng = np.random.default_rng(seed)
    return [random_scene(rng, width, height, dropout_rate) for _ in range(n_scenes)]


def build_dataset(n_scenes: int, r: int, seed: int, width: int = 128, height: int = 96,
                  s: float = DEFAULT_S, dropout_rate: float = 0.002) -> list[Sample]:
    check_scale(r)
    specs = scene_specs(n_scenes, seed, width, height, dropout_rate)
    return [make_sample(spec, r, s) for spec in specs]


def manifest(samples, r: int, seed: int, s: float, paths: list[dict] | None = None) -> dict:
    """JSON-ready description that regenerates ``samples`` bit for bit."""
    scenes = []
    for i, sample in enumerate(samples):
        entry = {"spec": sample.spec.to_dict(), "intrinsics": sample.hr_intr.to_dict()}
        if paths is not None:
            entry.update(paths[i])
        scenes.append(entry)
    return {"r": r, "seed": seed, "s": s, "scenes": scenes}


def from_manifest(doc: dict) -> list[Sample]:
    return [make_sample(SceneSpec.from_dict(e["spec"]), int(doc["r"]), float(doc["s"]))
            for e in doc["scenes"]]
