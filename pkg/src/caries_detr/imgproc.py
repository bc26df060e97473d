"""Grayscale conversion, Scharr gradient magnitude and the structural target.

Images are numpy arrays: RGB as uint8 [H, W, 3], maps as float64 [H, W].
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


SCHARR_X = np.array([[-3.0, 0.0, 3.0], [-10.0, 0.0, 10.0], [-3.0, 0.0, 3.0]])
SCHARR_Y = SCHARR_X.T.copy()
LUMA = np.array([0.299, 0.587, 0.114])


def to_grayscale(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an RGB image [H, W, 3], got shape {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("zero-sized image")
    return (img.astype(np.float64) @ LUMA) / 255.0


def scharr_magnitude(gray: np.ndarray) -> np.ndarray:
    """sqrt(Gx^2 + Gy^2) with unnormalized Scharr kernels and replicate padding.

    Evaluated in separable form (central difference, then 3-10-3 smoothing)
    so flat regions give exactly zero.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise ValueError(f"expected a 2-d map, got shape {gray.shape}")
    if gray.shape[0] < 3 or gray.shape[1] < 3:
        raise ValueError(f"map {gray.shape} is smaller than the 3x3 Scharr kernel")
    p = np.pad(gray, 1, mode="edge")
    dx = p[:, 2:] - p[:, :-2]
    dy = p[2:, :] - p[:-2, :]
    gx = 3.0 * dx[:-2] + 10.0 * dx[1:-1] + 3.0 * dx[2:]
    gy = 3.0 * dy[:, :-2] + 10.0 * dy[:, 1:-1] + 3.0 * dy[:, 2:]
    return np.sqrt(gx**2 + gy**2)


def make_struct_target(gray: np.ndarray) -> np.ndarray:
    """log(1 + G) min-max normalized per image; all zeros when flat."""
    t = np.log1p(scharr_magnitude(gray))
    lo, hi = t.min(), t.max()
    if hi == lo:
        return np.zeros_like(t)
    return (t - lo) / (hi - lo)


def struct_target_from_rgb(img: np.ndarray) -> np.ndarray:
    return make_struct_target(to_grayscale(img))


def downsample_avg(m: np.ndarray, factor: int) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    h, w = m.shape[-2:]
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"map {h}x{w} is not divisible by factor {factor}")
    shaped = m.reshape(m.shape[:-2] + (h // factor, factor, w // factor, factor))
    return shaped.mean(axis=(-3, -1))


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_rgb(path, img: np.ndarray) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="RGB").save(Path(path))


def write_gray(path, m: np.ndarray) -> None:
    """Save a [0, 1] map as an 8-bit grayscale PNG (value * 255, rounded)."""
    vals = np.clip(np.rint(np.asarray(m, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(vals, mode="L").save(Path(path))
