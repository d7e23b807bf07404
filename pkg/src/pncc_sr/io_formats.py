"""Readers and writers for depth, PNCC, point cloud, intrinsics and checkpoints.

Byte layouts are documented in docs/FORMATS.md. Every writer is
deterministic; every reader rejects trailing bytes.
"""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedVersionError
from .geometry import DepthMap, Intrinsics, PointCloud
from .pncc import NormalizationParams, PnccImage
from .srnet import AdamState, SrModel

DEFAULT_UNIT = 1e-3  # meters per depth16 count
CHECKPOINT_MAGIC = b"PNSR"
CHECKPOINT_VERSION = 1
PNCC_MAX = 65535

_NETPBM = re.compile(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


# ------------------------------------------------------------- netpbm


def _read_netpbm(path, magic: bytes) -> tuple[int, int, np.ndarray]:
    raw = Path(path).read_bytes()
    m = _NETPBM.match(raw)
    if not m or m.group(1) != magic:
        raise FormatError(f"{path}: not a {magic.decode()} file (bad header at byte 0)")
    w, h, maxval = (int(g) for g in m.group(2, 3, 4))
    if maxval != PNCC_MAX:
        raise FormatError(f"{path}: expected maxval 65535, got {maxval}")
    nch = 1 if magic == b"P5" else 3
    start = m.end()
    need = start + w * h * nch * 2
    if len(raw) < need:
        raise FormatError(f"{path}: truncated at byte {len(raw)}, expected {need} bytes")
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes starting at byte {need}")
    data = np.frombuffer(raw, dtype=">u2", count=w * h * nch, offset=start)
    return w, h, data.reshape(h, w, nch) if nch == 3 else data.reshape(h, w)


def _write_netpbm(path, magic: bytes, counts: np.ndarray) -> None:
    h, w = counts.shape[:2]
    header = b"%s\n%d %d\n%d\n" % (magic, w, h, PNCC_MAX)
    Path(path).write_bytes(header + counts.astype(">u2").tobytes())


def write_depth16(path, d: DepthMap, unit_scale: float = DEFAULT_UNIT) -> None:
    """16-bit P5 graymap; count = round(depth / unit_scale), 0 = invalid."""
    counts = np.round(d.data / unit_scale)
    bad = d.valid & ((counts < 1) | (counts > PNCC_MAX))
    if bad.any():
        v, u = np.argwhere(bad)[0]
        raise ValueError(
            f"depth {d.data[v, u]} m at pixel (u={u}, v={v}) is not representable "
            f"with unit {unit_scale} m ({int(bad.sum())} pixels out of range)"
        )
    _write_netpbm(path, b"P5", np.where(d.valid, counts, 0).astype(np.uint16))


def read_depth16(path, unit_scale: float = DEFAULT_UNIT) -> DepthMap:
    _, _, counts = _read_netpbm(path, b"P5")
    valid = counts > 0
    return DepthMap(counts.astype(np.float64) * unit_scale, valid)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, alternating, starting with a run of False."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    if sum(runs) != shape[0] * shape[1]:
        raise FormatError(f"mask runs cover {sum(runs)} pixels, image has {shape[0] * shape[1]}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(shape)


def write_pncc48(path, p: PnccImage) -> None:
    """16-bit-per-channel P6 pixmap plus a JSON sidecar with params and mask."""
    if p.norm is None:
        raise ValueError("cannot write a PNCC image without normalization parameters")
    ch = p.channels
    if ch.min() < 0 or ch.max() > 1:
        raise ValueError(f"PNCC channels must lie in [0, 1], got [{ch.min()}, {ch.max()}]")
    _write_netpbm(path, b"P6", np.round(ch * PNCC_MAX).astype(np.uint16))
    doc = {"norm": p.norm.to_dict(), "width": p.width, "height": p.height, "mask_rle": rle_encode(p.valid)}
    sidecar_path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def read_pncc48(path) -> PnccImage:
    side = sidecar_path(path)
    if not side.exists():
        raise FormatError(f"{path}: sidecar {side} is missing")
    w, h, counts = _read_netpbm(path, b"P6")
    try:
        doc = json.loads(side.read_text())
        norm = NormalizationParams.from_dict(doc["norm"])
        runs = doc["mask_rle"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{side}: malformed sidecar ({exc})") from exc
    if (doc.get("width"), doc.get("height")) != (w, h):
        raise FormatError(f"{side}: sidecar size does not match pixmap {w}x{h}")
    return PnccImage(counts.astype(np.float64) / PNCC_MAX, rle_decode(runs, (h, w)), norm)


# ---------------------------------------------------------------- PLY


def write_ply(path, pc: PointCloud) -> None:
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pc)}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in pc.points.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> PointCloud:
    text = Path(path).read_bytes().decode("ascii", errors="replace")
    lines = text.split("\n")
    if lines[:2] != ["ply", "format ascii 1.0"]:
        raise FormatError(f"{path}: not an ASCII PLY file (header at byte 0)")
    n = None
    props = []
    offset = len(lines[0]) + len(lines[1]) + 2
    i = 2
    while i < len(lines) and lines[i] != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["element", "vertex"] and len(parts) == 3:
            n = int(parts[2])
        elif parts[:1] == ["property"] and len(parts) == 3:
            props.append(parts[2])
        elif parts[:1] not in (["comment"], ["obj_info"]):
            raise FormatError(f"{path}: unexpected header line at byte {offset}: {lines[i]!r}")
        offset += len(lines[i]) + 1
        i += 1
    if i == len(lines) or n is None or props[:3] != ["x", "y", "z"]:
        raise FormatError(f"{path}: malformed header ending near byte {offset}")
    offset += len("end_header") + 1
    body = lines[i + 1:]
    if body and body[-1] == "":
        body = body[:-1]
    if len(body) != n:
        raise FormatError(f"{path}: expected {n} vertices after byte {offset}, found {len(body)} lines")
    pts = np.empty((n, 3))
    for j, line in enumerate(body):
        vals = line.split()
        if len(vals) != len(props):
            raise FormatError(f"{path}: bad vertex line at byte {offset}: {line!r}")
        pts[j] = [float(v) for v in vals[:3]]
        offset += len(line) + 1
    return PointCloud(pts)


# ---------------------------------------------------------- intrinsics


def write_intrinsics(path, intr: Intrinsics) -> None:
    Path(path).write_text(json.dumps(intr.to_dict(), indent=2) + "\n")


def read_intrinsics(path) -> Intrinsics:
    try:
        return Intrinsics.from_dict(json.loads(Path(path).read_text()))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed intrinsics ({exc})") from exc


# ---------------------------------------------------------- checkpoint


def checkpoint_bytes(model: SrModel, train_config: dict | None = None, norm_policy: str = "per-image") -> bytes:
    """Magic, u16 version, u32 header length, JSON header, f32 LE blob.

    The blob holds the parameters in declaration order, then (when present)
    the optimizer's first and second moments in the same order.
    """
    arrays = list(model.params)
    header = {
        "architecture": model.architecture(),
        "train_config": train_config,
        "normalization_policy": norm_policy,
        "optimizer": None,
    }
    if model.adam is not None:
        header["optimizer"] = {"name": "adam", "step": model.adam.t}
        arrays += list(model.adam.m) + list(model.adam.v)
    head = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(np.asarray(a, dtype="<f4").tobytes() for a in arrays)
    return CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(head)) + head + blob


def write_checkpoint(path, model: SrModel, train_config: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, train_config))


def parse_checkpoint(raw: bytes, name: str = "<bytes>") -> tuple[SrModel, dict]:
    if len(raw) < 10:
        raise FormatError(f"{name}: truncated at byte {len(raw)} (header needs 10 bytes)")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{name}: bad magic at byte 0")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{name}: checkpoint version {version} is not supported")
    if len(raw) < 10 + hlen:
        raise FormatError(f"{name}: truncated at byte {len(raw)} inside JSON header")
    try:
        header = json.loads(raw[10:10 + hlen])
        model = SrModel(**header["architecture"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{name}: malformed JSON header at byte 10 ({exc})") from exc
    shapes = model.layer_shapes()
    opt = header.get("optimizer")
    n_sets = 3 if opt else 1
    offset = 10 + hlen
    need = offset + 4 * n_sets * sum(int(np.prod(s)) for s in shapes)
    if len(raw) < need:
        raise FormatError(f"{name}: truncated at byte {len(raw)}, parameter blob needs {need}")
    if len(raw) > need:
        raise FormatError(f"{name}: {len(raw) - need} trailing bytes starting at byte {need}")
    arrays = []
    for shape in shapes * n_sets:
        count = int(np.prod(shape))
        a = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).astype(np.float64)
        arrays.append(a.reshape(shape))
        offset += 4 * count
    k = len(shapes)
    model.params = arrays[:k]
    if opt:
        model.adam = AdamState(arrays[k:2 * k], arrays[2 * k:], int(opt["step"]))
    return model, header


def read_checkpoint(path) -> tuple[SrModel, dict]:
    return parse_checkpoint(Path(path).read_bytes(), str(path))
