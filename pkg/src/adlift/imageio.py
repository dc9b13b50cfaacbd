"""Image dumps: 8-bit PPM for viewing, LGIM for exact float64 exchange.

LGIM layout: b"LGIM", then width, height, channels as little-endian uint32,
then row-major little-endian float64 samples.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

LGIM_MAGIC = b"LGIM"


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM output needs an (H, W, 3) image")
    h, w, _ = img.shape
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6" or parts[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit P6 PPM")
    w, h = int(parts[1]), int(parts[2])
    pix = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8)
    if pix.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return pix.reshape(h, w, 3).astype(np.float64) / 255.0


def write_lgim(path: str | Path, array: np.ndarray) -> None:
    a = np.asarray(array, dtype="<f8")
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError("LGIM stores (H, W, C) arrays")
    h, w, c = a.shape
    with open(path, "wb") as fh:
        fh.write(LGIM_MAGIC + struct.pack("<III", w, h, c))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_lgim(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != LGIM_MAGIC:
        raise ValueError(f"{path}: missing LGIM header")
    w, h, c = struct.unpack("<III", data[4:16])
    n = w * h * c
    if len(data) != 16 + 8 * n:
        raise ValueError(f"{path}: expected {16 + 8 * n} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f8", offset=16).astype(np.float64).reshape(h, w, c)
