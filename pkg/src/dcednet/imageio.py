"""Binary PGM (P5) / PPM (P6) reading and writing, 8 bits per sample."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(data: bytes, count: int):
    """First ``count`` header tokens and the offset just past the last one."""
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i < len(data) and data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(data) and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise ImageFormatError("truncated header")
        tokens.append(data[start:i])
    return tokens, i + 1  # one whitespace byte separates header and raster


def decode_pnm(data: bytes) -> np.ndarray:
    (magic, w, h, maxval), offset = _tokens(data, 4)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}; expected P5 or P6")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255 or maxval < 1:
        raise ImageFormatError(f"only 8-bit images are supported (maxval {maxval})")
    channels = 3 if magic == b"P6" else 1
    size = w * h * channels
    raster = data[offset:offset + size]
    if len(raster) != size:
        raise ImageFormatError(f"expected {size} raster bytes, found {len(raster)}")
    img = np.frombuffer(raster, dtype=np.uint8).reshape((h, w, channels) if channels == 3 else (h, w))
    if maxval != 255:
        img = np.rint(img.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return img.copy()


def read_image(path) -> np.ndarray:
    """Load a P5/P6 file as ``(h, w)`` or ``(h, w, 3)`` uint8."""
    return decode_pnm(Path(path).read_bytes())


def encode_pnm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ImageFormatError(f"expected uint8 pixels, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"cannot encode image of shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temporary sibling file and rename on success."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_image(path, img: np.ndarray) -> None:
    atomic_write_bytes(path, encode_pnm(img))
