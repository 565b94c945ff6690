"""PNG I/O with the fixed value mapping used across the package.

Color images live in [0, 1] float; PNG bytes are 8-bit with linear
scaling.  Depth maps are written as 16-bit grayscale, near -> 0 and
far -> 65535.  Pillow writes no timestamps, so identical arrays give
identical bytes.
"""

import numpy as np
from PIL import Image


def save_rgb(path, img01):
    arr = np.asarray(img01)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {arr.shape}")
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_rgb(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_depth16(path, depth, near, far):
    arr = np.asarray(depth, dtype=np.float64)
    scaled = (arr - near) / (far - near)
    data = np.clip(np.round(scaled * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(data).save(path, format="PNG")  # uint16 -> 16-bit grayscale


def to_diffusion_range(img01):
    """[0, 1] image -> the [-1, 1] range the noise model assumes."""
    return img01 * 2.0 - 1.0


def from_diffusion_range(img_pm1):
    return (np.asarray(img_pm1) + 1.0) / 2.0
