"""Plain-text PGM reader/writer tests."""

import numpy as np
import pytest

from biopreimage import GrayImage, PgmError, dumps_pgm, load_pgm, loads_pgm, save_pgm


def test_round_trip():
    img = GrayImage(3, 2, [[0, 128, 255], [17, 42, 99]])
    assert loads_pgm(dumps_pgm(img)) == img


def test_round_trip_fuzz(tmp_path):
    rng = np.random.default_rng(29)
    for i in range(20):
        h = int(rng.integers(1, 12))
        w = int(rng.integers(1, 12))
        img = GrayImage(w, h, rng.integers(0, 256, size=(h, w)))
        path = tmp_path / f"img-{i}.pgm"
        save_pgm(img, path)
        assert load_pgm(path) == img


def test_line_wrapping():
    img = GrayImage(40, 1, np.arange(40).reshape(1, 40))
    text = dumps_pgm(img)
    for line in text.splitlines()[3:]:
        assert len(line.split()) <= 17


def test_comments_and_whitespace():
    text = "P2\n# a comment\n  2 2\n# another\n255\n0 1\n2 3\n"
    img = loads_pgm(text)
    assert np.array_equal(img.flat(), [0, 1, 2, 3])


def test_header_tokens_split_across_lines():
    assert loads_pgm("P2 2\n1 255 9 8").pixels.tolist() == [[9, 8]]


def test_rejects_wrong_magic():
    with pytest.raises(PgmError, match="P2"):
        loads_pgm("P5\n2 2\n255\n0 0 0 0")


def test_rejects_wrong_maxval():
    with pytest.raises(PgmError):
        loads_pgm("P2\n1 1\n65535\n0")


def test_rejects_pixel_count_mismatch():
    with pytest.raises(PgmError):
        loads_pgm("P2\n2 2\n255\n0 0 0")
    with pytest.raises(PgmError):
        loads_pgm("P2\n2 2\n255\n0 0 0 0 0")


def test_rejects_out_of_range_pixel():
    with pytest.raises(PgmError):
        loads_pgm("P2\n1 1\n255\n300")


def test_rejects_garbage_token():
    with pytest.raises(PgmError):
        loads_pgm("P2\n1 1\n255\nxyz")


def test_rejects_empty():
    with pytest.raises(PgmError):
        loads_pgm("")
