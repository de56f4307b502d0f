"""Colour overlays of a predicted mask on its input image (blue = 1, red = 0)."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, no_grad
from .models import Model, load_model
from .netpbm import read_pgm, write_ppm

BLUE = np.array([0.0, 0.0, 1.0])
RED = np.array([1.0, 0.0, 0.0])


def overlay_rgb(gray: np.ndarray, mask: np.ndarray, weight: float = 0.5) -> np.ndarray:
    """Blend ``gray`` with blue in proportion to ``mask`` and red in proportion to ``1 - mask``."""
    gray = np.asarray(gray, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if gray.shape != mask.shape:
        raise ValueError(f"image {gray.shape} and mask {mask.shape} differ in size")
    tint = mask[..., None] * BLUE + (1.0 - mask[..., None]) * RED
    return (1.0 - weight) * gray[..., None] + weight * tint


def predict_mask(model: Model, gray: np.ndarray) -> np.ndarray:
    if model.kind != "segmenter":
        raise ValueError("overlay needs a segmenter model, got a classifier")
    gray = np.asarray(gray, dtype=np.float64)
    if gray.shape != tuple(model.config.input_size):
        raise ValueError(f"image is {gray.shape}, model expects {tuple(model.config.input_size)}")
    with no_grad():
        out = model(Tensor(gray[None, None].astype(model.dtype)), training=False)
    return out.data[0, 0].astype(np.float64)


def render_overlay(model_file, image_file, out_file) -> np.ndarray:
    model = load_model(model_file)
    gray = read_pgm(image_file)
    rgb = overlay_rgb(gray, predict_mask(model, gray))
    write_ppm(out_file, rgb)
    return rgb
