# utils/images.py
"""
Image IO.

PPM layout written by `encode_ppm` (binary P6, 8-bit):
    b"P6\\n{width} {height}\\n255\\n" followed by height*width*3 bytes,
    rows top to bottom, pixels left to right, channels R,G,B.
    Byte value = round(clip(v, 0, 1) * 255) with round-half-to-even.
"""

from __future__ import annotations

import os

import numpy as np

from utils.errors import InvalidInputError
from utils.persistence import atomic_write_bytes


def to_bytes_image(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise InvalidInputError(f"expected an H×W×3 image, got shape {rgb.shape}")
    return np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(rgb: np.ndarray) -> bytes:
    data = to_bytes_image(rgb)
    height, width = data.shape[:2]
    header = f"P6\n{width} {height}\n255\n".encode("ascii")
    return header + data.tobytes(order="C")


def decode_ppm(payload: bytes) -> np.ndarray:
    """Parse a binary P6 file into an H×W×3 float image in [0,1]."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(payload) and payload[pos:pos + 1].isspace():
            pos += 1
        if payload[pos:pos + 1] == b"#":
            while pos < len(payload) and payload[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(payload) and not payload[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InvalidInputError("truncated PPM header")
        tokens.append(payload[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P6":
        raise InvalidInputError(f"not a binary PPM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise InvalidInputError(f"unsupported PPM maxval {maxval}")
    body = payload[pos:pos + width * height * 3]
    if len(body) != width * height * 3:
        raise InvalidInputError("truncated PPM pixel data")
    data = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    return data.astype(np.float64) / 255.0


def write_image(path: str, rgb: np.ndarray) -> None:
    """Write .ppm always-supported; .png through Pillow."""
    if path.lower().endswith(".png"):
        from PIL import Image

        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        Image.fromarray(to_bytes_image(rgb), mode="RGB").save(path)
        return
    atomic_write_bytes(path, encode_ppm(rgb))


def read_image(path: str) -> np.ndarray:
    if path.lower().endswith(".ppm"):
        with open(path, "rb") as f:
            return decode_ppm(f.read())
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
