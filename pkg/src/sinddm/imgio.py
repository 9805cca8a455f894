"""PNG loading and saving.

Images move through the toolkit as H x W x 3 float arrays in [-1, 1];
files on disk are plain 8-bit RGB PNGs. Anything with an alpha channel is
rejected rather than silently flattened.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

__all__ = ["load_png", "save_png"]


def load_png(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        im.load()
        mode = im.mode
        if mode in ("RGBA", "LA", "PA") or (mode == "P" and "transparency" in im.info):
            raise ValueError(
                f"{path}: image has an alpha channel; flatten it to 8-bit RGB first"
            )
        if mode != "RGB":
            raise ValueError(f"{path}: expected an 8-bit RGB PNG, got mode {mode!r}")
        arr = np.asarray(im, dtype=np.float64)
    return arr / 127.5 - 1.0


def save_png(img: np.ndarray, path: str | os.PathLike) -> None:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) array; got shape {arr.shape!r}")
    quantized = np.clip((arr + 1.0) * 127.5, 0.0, 255.0)
    Image.fromarray(np.round(quantized).astype(np.uint8), mode="RGB").save(path, format="PNG")
