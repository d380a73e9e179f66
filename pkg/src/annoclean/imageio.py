"""PNG read/write helpers. Images live in memory as float64 H×W×3 in [0, 1]."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def to_float(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float64) / 255.0


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return to_float(np.asarray(im.convert("RGB")))


def read_rgba(path) -> np.ndarray:
    with Image.open(path) as im:
        return to_float(np.asarray(im.convert("RGBA")))


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def write_rgb(path, image: np.ndarray) -> None:
    # PIL writes no timestamps into PNGs, so output bytes are a pure function of the pixels
    Image.fromarray(to_uint8(image), "RGB").save(Path(path), format="PNG")


def write_rgba(path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image), "RGBA").save(Path(path), format="PNG")


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, "L").save(Path(path), format="PNG")
