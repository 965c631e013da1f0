"""Image files: 8-bit PNG with a 2.2 gamma, and a raw float32 grid format.

Raw float format (little-endian)::

    magic    4 bytes  b"RPFG"
    height   u32
    width    u32
    channels u32
    data     float32 * height * width * channels, row-major
"""

import struct

import numpy as np
from PIL import Image

GAMMA = 2.2
RAW_MAGIC = b"RPFG"


def save_png(path, img, gamma=GAMMA):
    """Store a linear image in [0, 1] as 8-bit, gamma-encoded PNG."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    enc = np.round(img ** (1.0 / gamma) * 255.0).astype(np.uint8)
    Image.fromarray(enc).save(path)


def load_png(path, gamma=GAMMA):
    """Load a PNG and linearize it; returns float64 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr**gamma


def save_mask(path, mask):
    Image.fromarray(np.where(np.asarray(mask) > 0.5, 255, 0).astype(np.uint8)).save(path)


def load_mask(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.float64)


def save_raw(path, arr):
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ValueError("raw float grids are (H, W) or (H, W, C)")
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<3I", h, w, c))
        fh.write(np.ascontiguousarray(arr).tobytes())


def load_raw(path):
    """Returns a float32 array shaped (H, W, C)."""
    with open(path, "rb") as fh:
        if fh.read(4) != RAW_MAGIC:
            raise ValueError(f"{path}: not a raw float grid")
        h, w, c = struct.unpack("<3I", fh.read(12))
        data = np.frombuffer(fh.read(4 * h * w * c), dtype="<f4")
    if data.size != h * w * c:
        raise ValueError(f"{path}: truncated raw float grid")
    return data.reshape(h, w, c).astype(np.float32)
