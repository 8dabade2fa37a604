"""Binary PPM (P6, maxval 255) read/write; pixel bytes map linearly to [0, 1]."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


class ImageFormatError(ValueError):
    pass


def decode_ppm(raw: bytes) -> np.ndarray:
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise ImageFormatError("truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise ImageFormatError(f"not a binary PPM (magic {fields[0]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ImageFormatError("non-integer PPM header field") from None
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte before the raster
    need = w * h * 3
    if len(raw) - pos < need:
        raise ImageFormatError(f"raster truncated: expected {need} bytes, found {len(raw) - pos}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def encode_ppm(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"expected an (H, W, 3) image, got shape {img.shape}")
    h, w = img.shape[:2]
    pixels = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_image(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_image(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))
