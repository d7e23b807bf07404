import json

import numpy as np
import pytest

from pncc_sr.errors import FormatError, UnsupportedVersionError
from pncc_sr.geometry import DepthMap, Intrinsics, PointCloud
from pncc_sr.io_formats import (
    CHECKPOINT_VERSION,
    checkpoint_bytes,
    parse_checkpoint,
    read_checkpoint,
    read_depth16,
    read_intrinsics,
    read_pncc48,
    read_ply,
    rle_decode,
    rle_encode,
    sidecar_path,
    write_checkpoint,
    write_depth16,
    write_intrinsics,
    write_pncc48,
    write_ply,
)
from pncc_sr.metrics import rmse_masked
from pncc_sr.pncc import PnccImage, decode_depth, decode_pointcloud, encode
from pncc_sr.srnet import AdamState, init_model
from pncc_sr.synthdata import build_dataset


@pytest.fixture(scope="module")
def samples():
    return build_dataset(4, 4, seed=5, width=64, height=48)


def quantized_depth(rng, shape=(12, 17)):
    counts = rng.integers(1, 65536, shape)
    valid = rng.random(shape) > 0.3
    return DepthMap(counts * 1e-3, valid)


def test_depth16_round_trip_exact(tmp_path):
    d = quantized_depth(np.random.default_rng(0))
    write_depth16(tmp_path / "d.pgm", d)
    back = read_depth16(tmp_path / "d.pgm")
    assert back == d


def test_depth16_header_and_endianness(tmp_path):
    d = DepthMap(np.array([[0.258, 1.0]]), np.array([[True, False]]))
    write_depth16(tmp_path / "d.pgm", d)
    raw = (tmp_path / "d.pgm").read_bytes()
    assert raw == b"P5\n2 1\n65535\n\x01\x02\x00\x00"


def test_depth16_out_of_range(tmp_path):
    with pytest.raises(ValueError, match="u=1, v=0"):
        write_depth16(tmp_path / "d.pgm", DepthMap(np.array([[1.0, 70.0]])))


def test_depth16_parses_in_pillow(tmp_path):
    image = pytest.importorskip("PIL.Image")
    d = quantized_depth(np.random.default_rng(1))
    write_depth16(tmp_path / "d.pgm", d)
    with image.open(tmp_path / "d.pgm") as im:
        arr = np.asarray(im).astype(np.int64)
    assert arr.shape == d.data.shape
    assert np.array_equal(arr, np.round(d.data / 1e-3).astype(np.int64))


def test_depth16_rejects_trailing_and_truncated(tmp_path):
    d = quantized_depth(np.random.default_rng(2))
    p = tmp_path / "d.pgm"
    write_depth16(p, d)
    raw = p.read_bytes()
    p.write_bytes(raw + b"\x00")
    with pytest.raises(FormatError, match=f"byte {len(raw)}"):
        read_depth16(p)
    p.write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated"):
        read_depth16(p)
    p.write_bytes(b"P2\n1 1\n65535\n1\n")
    with pytest.raises(FormatError):
        read_depth16(p)


@pytest.mark.parametrize("bits", [[], [True], [False], [True, True, False, True], [False, False, True]])
def test_rle_round_trip(bits):
    m = np.array(bits, dtype=bool).reshape(1, -1)
    runs = rle_encode(m)
    assert rle_decode(runs, m.shape).tolist() == m.tolist()


def test_rle_rejects_wrong_total():
    with pytest.raises(FormatError):
        rle_decode([1, 2], (2, 2))


def test_pncc48_round_trip(tmp_path, samples):
    for i, s in enumerate(samples):
        p = tmp_path / f"p{i}.ppm"
        write_pncc48(p, s.hr)
        back = read_pncc48(p)
        assert np.abs(back.channels - s.hr.channels).max() <= 1 / (2 * 65535) + 1e-15
        assert np.array_equal(back.valid, s.hr.valid)
        assert back.norm == s.hr.norm
        assert sidecar_path(p).name == f"p{i}.ppm.json"


def test_pncc48_rmse_impact(tmp_path, samples):
    for s in samples:
        write_pncc48(tmp_path / "p.ppm", s.hr)
        disk = decode_depth(read_pncc48(tmp_path / "p.ppm"))
        mem = decode_depth(s.hr)
        assert abs(rmse_masked(disk, s.hr_depth) - rmse_masked(mem, s.hr_depth)) < 0.01


def test_pncc48_missing_sidecar(tmp_path, samples):
    p = tmp_path / "p.ppm"
    write_pncc48(p, samples[0].hr)
    sidecar_path(p).unlink()
    with pytest.raises(FormatError, match="sidecar"):
        read_pncc48(p)


def test_pncc48_bad_sidecar(tmp_path, samples):
    p = tmp_path / "p.ppm"
    write_pncc48(p, samples[0].hr)
    sidecar_path(p).write_text("{not json")
    with pytest.raises(FormatError):
        read_pncc48(p)


def test_pncc48_rejects_out_of_range(tmp_path, samples):
    bad = PnccImage(samples[0].hr.channels * 1.5, samples[0].hr.valid, samples[0].hr.norm)
    with pytest.raises(ValueError):
        write_pncc48(tmp_path / "p.ppm", bad)


def test_ply_empty(tmp_path):
    write_ply(tmp_path / "e.ply", PointCloud(np.zeros((0, 3))))
    assert "element vertex 0" in (tmp_path / "e.ply").read_text()
    assert len(read_ply(tmp_path / "e.ply")) == 0


def test_ply_round_trip_exact(tmp_path, samples):
    pc = decode_pointcloud(samples[1].hr)
    write_ply(tmp_path / "c.ply", pc)
    assert read_ply(tmp_path / "c.ply") == pc


def test_ply_parses_in_plyfile(tmp_path):
    plyfile = pytest.importorskip("plyfile")
    pts = np.random.default_rng(3).standard_normal((40, 3))
    write_ply(tmp_path / "c.ply", PointCloud(pts))
    v = plyfile.PlyData.read(str(tmp_path / "c.ply"))["vertex"]
    assert np.array_equal(np.stack([v["x"], v["y"], v["z"]], axis=1), pts)


def test_ply_malformed(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nend_header\n")
    with pytest.raises(FormatError):
        read_ply(p)
    p.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nproperty double y\n"
                 "property double z\nend_header\n1 2 3\n4 5 6\n")
    with pytest.raises(FormatError, match="byte"):
        read_ply(p)
    p.write_bytes(b"PK\x03\x04")
    with pytest.raises(FormatError):
        read_ply(p)


def test_intrinsics_round_trip(tmp_path):
    intr = Intrinsics(525.1234567891234, 524.0, 319.5, 239.5, 640, 480)
    write_intrinsics(tmp_path / "i.json", intr)
    assert read_intrinsics(tmp_path / "i.json") == intr
    assert set(json.loads((tmp_path / "i.json").read_text())) == {"f_x", "f_y", "c_x", "c_y", "width", "height"}
    (tmp_path / "j.json").write_text('{"f_x": 1}')
    with pytest.raises(FormatError):
        read_intrinsics(tmp_path / "j.json")


def trained_model():
    m = init_model("z", "pncc", 4, channels=4, n_layers=3, seed=2)
    rng = np.random.default_rng(0)
    m.params = [rng.standard_normal(p.shape).astype(np.float32).astype(np.float64) for p in m.params]
    m.adam = AdamState([p * 0.5 for p in m.params], [p * p for p in m.params], 17)
    return m


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = trained_model()
    write_checkpoint(tmp_path / "m.ckpt", m, {"lr": 0.001})
    back, header = read_checkpoint(tmp_path / "m.ckpt")
    assert back.architecture() == m.architecture()
    assert all(np.array_equal(a, b) for a, b in zip(back.params, m.params))
    assert all(np.array_equal(a, b) for a, b in zip(back.adam.m, m.adam.m))
    assert back.adam.t == 17
    assert header["train_config"] == {"lr": 0.001}
    assert checkpoint_bytes(back, {"lr": 0.001}) == (tmp_path / "m.ckpt").read_bytes()


def test_checkpoint_layout_prefix():
    raw = checkpoint_bytes(init_model("xyz", "pncc", 4, channels=2, n_layers=2))
    assert raw[:4] == b"PNSR"
    assert int.from_bytes(raw[4:6], "little") == CHECKPOINT_VERSION


def test_checkpoint_truncation_fuzz():
    raw = checkpoint_bytes(trained_model())
    rng = np.random.default_rng(4)
    cuts = sorted(set(rng.integers(0, len(raw), 60).tolist()) | {0, 3, 9, 10, len(raw) - 1})
    for cut in cuts:
        with pytest.raises(FormatError):
            parse_checkpoint(raw[:cut])


def test_checkpoint_trailing_and_version():
    raw = checkpoint_bytes(trained_model())
    with pytest.raises(FormatError, match="trailing"):
        parse_checkpoint(raw + b"\x00\x00")
    bumped = raw[:4] + (CHECKPOINT_VERSION + 1).to_bytes(2, "little") + raw[6:]
    with pytest.raises(UnsupportedVersionError):
        parse_checkpoint(bumped)
    with pytest.raises(FormatError, match="magic"):
        parse_checkpoint(b"XXXX" + raw[4:])


def test_writers_are_deterministic(tmp_path, samples):
    s = samples[2]
    for name in ("a", "b"):
        write_depth16(tmp_path / f"{name}.pgm", DepthMap(np.round(s.hr_depth.data, 3), s.hr_depth.valid))
        write_pncc48(tmp_path / f"{name}.ppm", encode(s.hr_depth, s.hr_intr))
        write_ply(tmp_path / f"{name}.ply", decode_pointcloud(s.hr))
        write_checkpoint(tmp_path / f"{name}.ckpt", trained_model())
    for ext in ("pgm", "ppm", "ppm.json", "ply", "ckpt"):
        assert (tmp_path / f"a.{ext}").read_bytes() == (tmp_path / f"b.{ext}").read_bytes()
