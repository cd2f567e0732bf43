"""Plain-text PGM (P2) image files, maxval 255.

Round trips are bit-exact: load(save(img)) == img.
"""

from __future__ import annotations

import numpy as np

from .pipeline import GrayImage

# Keep emitted lines under the format's 70-character cap: 17 values of
# at most "255 " each.
_VALUES_PER_LINE = 17


class PgmError(ValueError):
    """Malformed or unsupported PGM content."""


def _tokens(text: str):
    for line in text.splitlines():
        body = line.split("#", 1)[0]
        yield from body.split()


def loads_pgm(text: str) -> GrayImage:
    toks = _tokens(text)
    try:
        magic = next(toks)
    except StopIteration:
        raise PgmError("empty PGM input") from None
    if magic != "P2":
        raise PgmError(f"expected magic 'P2', got {magic!r}")
    try:
        width = int(next(toks))
        height = int(next(toks))
        maxval = int(next(toks))
    except (StopIteration, ValueError):
        raise PgmError("malformed PGM header") from None
    if maxval != 255:
        raise PgmError(f"only maxval 255 supported, got {maxval}")
    if width < 1 or height < 1:
        raise PgmError(f"bad dimensions {width}x{height}")
    try:
        values = [int(t) for t in toks]
    except ValueError as e:
        raise PgmError(f"non-integer pixel data: {e}") from None
    if len(values) != width * height:
        raise PgmError(f"expected {width * height} pixels, got {len(values)}")
    arr = np.array(values, dtype=np.int64)
    if arr.min() < 0 or arr.max() > 255:
        raise PgmError("pixel out of range [0, 255]")
    return GrayImage(width, height, arr.reshape(height, width))


def dumps_pgm(image: GrayImage) -> str:
    lines = ["P2", f"{image.width} {image.height}", "255"]
    flat = image.flat()
    for start in range(0, flat.size, _VALUES_PER_LINE):
        lines.append(" ".join(str(int(v)) for v in flat[start : start + _VALUES_PER_LINE]))
    return "\n".join(lines) + "\n"


def load_pgm(path) -> GrayImage:
    with open(path, "r", encoding="ascii") as fh:
        return loads_pgm(fh.read())


def save_pgm(image: GrayImage, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(dumps_pgm(image))
