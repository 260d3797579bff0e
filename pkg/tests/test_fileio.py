import numpy as np
import pytest

from matrixkit.errors import SceneIOError
from matrixkit.fileio import read_pfm, read_pgm, read_ply, read_png, write_pfm, write_pgm, write_ply, write_png


def test_pfm_round_trip_and_header(tmp_path, rng):
    data = rng.uniform(0, 5, size=(5, 7)).astype(np.float32)
    path = tmp_path / "d.pfm"
    write_pfm(path, data)
    raw = path.read_bytes()
    assert raw.startswith(b"Pf\n7 5\n-1.0\n")
    # rows are stored bottom-up
    assert np.frombuffer(raw[len(b"Pf\n7 5\n-1.0\n"):][:28], "<f4").tolist() == data[-1].tolist()
    np.testing.assert_array_equal(read_pfm(path), data)


def test_pfm_big_endian_is_read(tmp_path):
    data = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = tmp_path / "be.pfm"
    path.write_bytes(b"Pf\n3 2\n1.0\n" + np.flipud(data).astype(">f4").tobytes())
    np.testing.assert_array_equal(read_pfm(path), data)


def test_pfm_errors(tmp_path):
    bad = tmp_path / "bad.pfm"
    bad.write_bytes(b"P6\n1 1\n255\n")
    with pytest.raises(SceneIOError, match="bad.pfm"):
        read_pfm(bad)
    short = tmp_path / "short.pfm"
    short.write_bytes(b"Pf\n4 4\n-1.0\n" + b"\0" * 10)
    with pytest.raises(SceneIOError, match="truncated"):
        read_pfm(short)
    with pytest.raises(SceneIOError):
        read_pfm(tmp_path / "missing.pfm")


def test_pgm_round_trip(tmp_path, rng):
    mask = rng.random((6, 9)) > 0.5
    path = tmp_path / "m.pgm"
    write_pgm(path, mask)
    assert path.read_bytes().startswith(b"P5\n9 6\n255\n")
    np.testing.assert_array_equal(read_pgm(path), mask)


def test_ply_round_trip(tmp_path, rng):
    pts = rng.normal(size=(50, 3))
    cols = rng.random((50, 3))
    write_ply(tmp_path / "c.ply", pts, cols)
    p, c = read_ply(tmp_path / "c.ply")
    np.testing.assert_array_equal(p, pts.astype(np.float32))
    assert np.abs(c - cols).max() <= 0.5 / 255 + 1e-12
    write_ply(tmp_path / "n.ply", pts)
    p, c = read_ply(tmp_path / "n.ply")
    assert c is None and p.shape == (50, 3)
    assert (tmp_path / "n.ply").stat().st_size == len(b"ply\nformat binary_little_endian 1.0\nelement vertex 50\n"
        b"property float x\nproperty float y\nproperty float z\nend_header\n") + 50 * 12


def test_ply_rejects_ascii(tmp_path):
    path = tmp_path / "a.ply"
    path.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(SceneIOError):
        read_ply(path)


def test_png_quantizes_to_8_bits(tmp_path, rng):
    rgb = rng.random((4, 5, 3))
    write_png(tmp_path / "i.png", rgb)
    back = read_png(tmp_path / "i.png")
    assert back.shape == (4, 5, 3)
    assert np.abs(back - rgb).max() <= 0.5 / 255 + 1e-12
    (tmp_path / "x.png").write_bytes(b"garbage")
    with pytest.raises(SceneIOError):
        read_png(tmp_path / "x.png")
