"""RGB images in [0,1] with an explicit color-space tag, plus PNG round trips.

The exposure model is deliberately simple: +1 EV doubles linear irradiance,
saturation clips at 1, and display encoding is the gamma 1/2.2 power curve.
That keeps the clipping + gamma nonlinearity that makes correction
nontrivial while staying fully synthetic.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import cv2
import numpy as np

GAMMA = 2.2

SRGB = "srgb"
LINEAR = "linear"


@dataclass
class Image:
    """H x W x 3 pixels in [0,1]; ``space`` is "srgb" or "linear"."""

    pixels: np.ndarray
    space: str = SRGB

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected HxWx3 pixels, got shape {px.shape}")
        if self.space not in (SRGB, LINEAR):
            raise ValueError(f"unknown color space {self.space!r}")
        if px.size and (px.min() < -1e-9 or px.max() > 1 + 1e-9):
            raise ValueError(f"pixel values outside [0,1]: min={px.min()}, max={px.max()}")
        self.pixels = np.clip(px, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    return np.clip(linear, 0.0, 1.0) ** (1.0 / GAMMA)


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    return np.clip(encoded, 0.0, 1.0) ** GAMMA


def to_linear(img: Image) -> Image:
    if img.space == LINEAR:
        return img
    return Image(srgb_decode(img.pixels), LINEAR)


def to_srgb(img: Image) -> Image:
    if img.space == SRGB:
        return img
    return Image(srgb_encode(img.pixels), SRGB)


def render_ev(base: Image, delta_ev: float) -> Image:
    """Expose a linear image by ``delta_ev`` stops and display-encode it.

    pixel' = clip(pixel * 2**delta_ev, 0, 1) ** (1/gamma).  Clipping is the
    defined saturation behavior; delta_ev = 0 is plain encoding.
    """
    if base.space != LINEAR:
        raise ValueError("render_ev expects a linear-space base image")
    gained = np.clip(base.pixels * (2.0 ** float(delta_ev)), 0.0, 1.0)
    return Image(srgb_encode(gained), SRGB)


def save_png(path: str, img: Image, bitdepth: int = 8) -> None:
    """Write as PNG; 8-bit by default, 16-bit for loss-free round trips."""
    if bitdepth == 8:
        q = np.rint(img.pixels * 255.0).astype(np.uint8)
    elif bitdepth == 16:
        q = np.rint(img.pixels * 65535.0).astype(np.uint16)
    else:
        raise ValueError(f"bitdepth must be 8 or 16, got {bitdepth}")
    ok = cv2.imwrite(path, q[:, :, ::-1])
    if not ok:
        raise OSError(f"failed to write PNG {path}")


def load_png(path: str, space: str = SRGB) -> Image:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"failed to decode PNG {path}")
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    if raw.shape[2] == 4:
        raw = raw[:, :, :3]
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    px = raw[:, :, ::-1].astype(np.float64) / scale
    return Image(px, space)


def save_gray16_png(path: str, values: np.ndarray, lo: float, hi: float) -> None:
    """Map ``values`` in [lo,hi] onto a 16-bit single-channel PNG."""
    scaled = (np.clip(values, lo, hi) - lo) / (hi - lo)
    q = np.rint(scaled * 65535.0).astype(np.uint16)
    ok = cv2.imwrite(path, q)
    if not ok:
        raise OSError(f"failed to write PNG {path}")


def chw(img: Image) -> np.ndarray:
    """Image -> (3,H,W) float array (network layout)."""
    return np.ascontiguousarray(img.pixels.transpose(2, 0, 1))


def from_chw(arr: np.ndarray, space: str = SRGB) -> Image:
    return Image(np.clip(arr, 0.0, 1.0).transpose(1, 2, 0), space)


def resize_image(img: Image, height: int, width: int) -> Image:
    """Bilinear (align-corners) resize, matching the tensor op's convention."""
    from .tensor import Tensor, bilinear_resize

    arr = chw(img)
    out = bilinear_resize(Tensor(arr), height, width).data
    return Image(np.clip(out, 0.0, 1.0).transpose(1, 2, 0), img.space)
