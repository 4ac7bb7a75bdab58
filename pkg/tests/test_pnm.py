import numpy as np
import pytest

from duostream.pnm import MARKER, fixation_overlay, normalise, read_pnm, write_pgm, write_ppm


def test_pgm_roundtrip_and_header(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    path = tmp_path / "a.pgm"
    write_pgm(path, img)
    assert path.read_bytes().startswith(b"P5")
    assert np.array_equal(read_pnm(path), np.round(img * 255).astype(np.uint8))


def test_ppm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    path = tmp_path / "a.ppm"
    write_ppm(path, img)
    assert path.read_bytes().startswith(b"P6")
    assert np.array_equal(read_pnm(path), img)


def test_writers_validate(tmp_path):
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 3)))
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", np.full((2, 2), np.nan))
    with pytest.raises(ValueError):
        write_ppm(tmp_path / "x.ppm", np.zeros((2, 2)))


def test_normalise():
    assert normalise(np.array([1.0, 2.0, 4.0])).tolist() == [0.25, 0.5, 1.0]
    assert normalise(np.zeros(3)).tolist() == [0.0, 0.0, 0.0]


def test_overlay_draws_one_marker_per_fixation():
    img = np.full((3, 32, 32), 0.5, dtype=np.float32)
    fix = np.array([[0.2, 0.2], [0.5, 0.5], [0.8, 0.3], [0.3, 0.8], [0.6, 0.7], [0.1, 0.5], [0.9, 0.9], [0.4, 0.1]])
    pic, markers = fixation_overlay(img, fix, scale=3)
    assert pic.shape == (96, 96, 3) and pic.dtype == np.uint8
    assert len(markers) == 8
    for cx, cy in markers:
        ring = pic[int(cy) - 8:int(cy) + 9, int(cx) - 8:int(cx) + 9]
        assert np.all(ring == MARKER, axis=-1).any()
    assert not np.array_equal(pic, fixation_overlay(img, fix[::-1])[0])
