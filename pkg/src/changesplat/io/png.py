"""8-bit PNG import/export for images and masks."""

from __future__ import annotations

import numpy as np
from PIL import Image

from ..scene import ChangeMask, ImageBuffer


def load_image(path) -> ImageBuffer:
    with Image.open(path) as im:
        mode = "L" if im.mode in ("1", "L", "I", "I;16") else "RGB"
        arr = np.asarray(im.convert(mode), dtype=np.float64) / 255.0
    return ImageBuffer(arr)


def save_image(img: ImageBuffer, path) -> None:
    arr = np.round(np.clip(img.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def save_mask(mask: ChangeMask, path) -> None:
    arr = np.round(np.clip(mask.values, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_mask(path, binary: bool = False) -> ChangeMask:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    if binary:
        arr = (arr >= 0.5).astype(np.float64)
    return ChangeMask(arr, binary_flag=binary)
