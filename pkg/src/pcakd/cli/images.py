"""PNG/PPM image loading and saving.

Pixels are exchanged with the library as (H, W, 3) float32 in [0, 1]
(bytes scaled by 1/255, no per-channel normalization). Extent policy is
center-crop to divisible-by-8, never rescale.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from ..errors import ImageReadError
from ..tensor_math import DTYPE

SPATIAL_MULTIPLE = 8


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read a PNG or PPM file as (H, W, 3) float32 in [0, 1]."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except (OSError, ValueError, SyntaxError) as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from exc
    return (arr.astype(DTYPE) / 255.0).astype(DTYPE)


def save_png(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as an 8-bit RGB PNG."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageReadError(f"expected an (H, W, 3) image, got {arr.shape}")
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    tmp = f"{os.fspath(path)}.tmp-{os.getpid()}"
    Image.fromarray(data, mode="RGB").save(tmp, format="PNG")
    os.replace(tmp, path)


def center_crop_div8(image: np.ndarray) -> np.ndarray:
    """Center-crop both extents down to the nearest multiple of 8.

    Cropping instead of rescaling keeps metrics free of interpolation
    artifacts. Images smaller than 8 pixels on a side cannot be cropped.
    """
    arr = np.asarray(image)
    h, w = arr.shape[0], arr.shape[1]
    nh = (h // SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE
    nw = (w // SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE
    if nh == 0 or nw == 0:
        raise ImageReadError(
            f"image {h}x{w} is smaller than {SPATIAL_MULTIPLE} pixels on a side")
    top = (h - nh) // 2
    left = (w - nw) // 2
    return arr[top:top + nh, left:left + nw]
