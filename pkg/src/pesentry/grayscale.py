"""Bytes-as-pixels image, resized to 64x64 by exact area averaging."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput
from .pe import RawBinary

IMAGE_SIDE = 64

# (max size in KB, row width); larger files use 1024
WIDTH_TABLE = (
    (10, 32),
    (30, 64),
    (60, 128),
    (100, 256),
    (200, 384),
    (500, 512),
    (1000, 768),
)


@dataclass(frozen=True)
class GrayscaleImage:
    pixels: np.ndarray
    source_sha256: str = ""

    def flatten(self) -> np.ndarray:
        return self.pixels.reshape(-1).astype(np.float64)


def row_width(n_bytes: int) -> int:
    for max_kb, width in WIDTH_TABLE:
        if n_bytes <= max_kb * 1024:
            return width
    return 1024


def bytes_to_image(data: bytes) -> np.ndarray:
    """Row-major pixel matrix at the size-dependent width.

    A short final row is padded by repeating the file's last byte, so a
    constant file renders as a constant image at every size.
    """
    width = row_width(len(data))
    rows = -(-len(data) // width)
    buf = np.full(rows * width, data[-1] if data else 0, dtype=np.uint8)
    buf[: len(data)] = np.frombuffer(data, dtype=np.uint8)
    return buf.reshape(rows, width)


def _overlap_weights(src: int, dst: int) -> list[tuple[int, np.ndarray]]:
    """Integer overlap lengths between output cells and source cells.

    Output cell i spans [i*src, (i+1)*src) and source cell r spans
    [r*dst, (r+1)*dst) on a common grid, so every weight is an integer and
    each output row of weights sums to ``src``.
    """
    out = []
    for i in range(dst):
        lo, hi = i * src, (i + 1) * src
        first, last = lo // dst, (hi - 1) // dst
        r = np.arange(first, last + 1)
        w = np.minimum(hi, (r + 1) * dst) - np.maximum(lo, r * dst)
        out.append((first, w.astype(np.int64)))
    return out


def area_resize(img: np.ndarray, side: int = IMAGE_SIDE) -> np.ndarray:
    """Box-filter resize to ``side`` x ``side`` with round-half-up, in integer arithmetic."""
    h, w = img.shape
    src = img.astype(np.int64)
    tmp = np.empty((side, w), dtype=np.int64)
    for i, (first, wts) in enumerate(_overlap_weights(h, side)):
        tmp[i] = wts @ src[first:first + wts.size]
    acc = np.empty((side, side), dtype=np.int64)
    for j, (first, wts) in enumerate(_overlap_weights(w, side)):
        acc[:, j] = tmp[:, first:first + wts.size] @ wts
    den = h * w
    return ((2 * acc + den) // (2 * den)).astype(np.uint8)


def extract_grayscale(raw: RawBinary | bytes) -> GrayscaleImage:
    if isinstance(raw, RawBinary):
        data, digest = raw.bytes, raw.sha256
    else:
        data, digest = bytes(raw), ""
    if not data:
        raise EmptyInput("cannot render an empty file")
    return GrayscaleImage(area_resize(bytes_to_image(data)), digest)
