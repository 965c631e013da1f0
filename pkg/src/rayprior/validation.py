"""Argument checks shared by the estimator and the command line."""

from __future__ import annotations

import numpy as np

from .geometry import Camera
from .scenes import Dataset, Frame


def check_frames(X, require_train=True):
    """Accept a Dataset, a list of Frames, or a single Frame; return a list."""
    if isinstance(X, Dataset):
        frames = list(X.frames)
    elif isinstance(X, Frame):
        frames = [X]
    else:
        frames = list(X)
    if not frames:
        raise ValueError("no frames given")
    for f in frames:
        if not isinstance(f, Frame):
            raise TypeError(f"expected Frame objects, got {type(f).__name__}")
        check_image(f.image, (f.camera.height, f.camera.width))
        if np.shape(f.mask) != (f.camera.height, f.camera.width):
            raise ValueError(f"{f.name}: mask shape {np.shape(f.mask)} does not match the camera")
    if require_train and not any(f.split == "train" for f in frames):
        raise ValueError("no frame is tagged for training")
    return frames


def check_image(img, hw=None):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if hw is not None and img.shape[:2] != tuple(hw):
        raise ValueError(f"image is {img.shape[:2]}, expected {tuple(hw)}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def check_cameras(cameras):
    if isinstance(cameras, Camera):
        return [cameras]
    out = []
    for c in cameras:
        c = c.camera if isinstance(c, Frame) else c
        if not isinstance(c, Camera):
            raise TypeError(f"expected Camera or Frame, got {type(c).__name__}")
        out.append(c)
    return out


def check_probability(name, p):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {p}")
    return float(p)
