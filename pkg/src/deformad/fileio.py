"""Atomic file writes and 8-bit grayscale PNG helpers."""

from __future__ import annotations

import io
import os
import struct
import tempfile

import numpy as np
from PIL import Image


class DataError(ValueError):
    """Malformed or inconsistent on-disk data (CLI exit code 2)."""


def atomic_write_text(path, text):
    _atomic_write(path, text.encode("utf-8"))


def atomic_write_bytes(path, payload):
    _atomic_write(path, payload)


def _atomic_write(path, payload):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def to_bytes_image(pixels):
    """Map [-1, 1] float pixels to uint8; -1 -> 0 and +1 -> 255."""
    arr = np.asarray(pixels)
    return np.clip(np.rint((arr + 1.0) * 0.5 * 255.0), 0, 255).astype(np.uint8)


def from_bytes_image(arr):
    """Inverse of to_bytes_image: byte 0 -> -1.0, byte 255 -> +1.0."""
    return arr.astype(np.float64) / 255.0 * 2.0 - 1.0


def save_grayscale_png(path, pixels_unit_range):
    """Write a (H, W) float image in [-1, 1] as lossless 8-bit grayscale."""
    data = to_bytes_image(pixels_unit_range)
    if data.ndim == 3:
        if data.shape[0] != 1:
            raise ValueError("grayscale export expects a single channel")
        data = data[0]
    img = Image.fromarray(data, mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_grayscale_png(path):
    """Read an 8-bit grayscale PNG back into [-1, 1] floats, shape (1, H, W)."""
    check_png_structure(path)
    with Image.open(path) as img:
        if img.mode != "L":
            raise DataError(f"{path}: expected 8-bit grayscale, got mode "
                            f"{img.mode}")
        data = np.asarray(img, dtype=np.uint8)
    return from_bytes_image(data)[None]


_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def check_png_structure(path):
    """Walk PNG chunks; report the byte offset of the first violation."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _PNG_SIGNATURE:
        raise DataError(f"{path}: malformed PNG signature at byte 0")
    offset = 8
    saw_end = False
    while offset < len(blob):
        if offset + 8 > len(blob):
            raise DataError(f"{path}: truncated chunk header at byte {offset}")
        (length,) = struct.unpack(">I", blob[offset:offset + 4])
        chunk_type = blob[offset + 4:offset + 8]
        end = offset + 8 + length + 4
        if end > len(blob):
            raise DataError(f"{path}: truncated chunk body at byte {offset}")
        if not all(65 <= b <= 90 or 97 <= b <= 122 for b in chunk_type):
            raise DataError(f"{path}: invalid chunk type at byte {offset + 4}")
        if chunk_type == b"IEND":
            saw_end = True
            break
        offset = end
    if not saw_end:
        raise DataError(f"{path}: missing IEND chunk at byte {len(blob)}")
