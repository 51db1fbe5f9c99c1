"""Sliding-window occlusion heatmaps for the fusion model.

Slides an occluding window over the image, re-predicts, and records the
magnitude of the change against the unoccluded prediction. Scores are
magnitude-only (the method cannot tell positive from negative influence)
and normalized per image, so heatmaps are not comparable across images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DimensionError

FILL_RULES = ("train_mean", "gray")
OVERLAY_ALPHA = 0.45
SWEEP_BATCH = 64


@dataclass
class OcclusionSpec:
    window: int = 32
    stride: int = 16
    fill: str = "train_mean"

    def validate(self, image_size: int):
        if not (1 <= self.stride <= self.window <= image_size):
            raise ValueError(
                f"occlusion spec requires 1 <= stride <= window <= image size, "
                f"got stride {self.stride}, window {self.window}, image {image_size}")
        if self.fill not in FILL_RULES:
            raise ValueError(f"unknown fill rule '{self.fill}' (expected one of {FILL_RULES})")

    def grid_shape(self, image_size: int):
        n = (image_size - self.window) // self.stride + 1
        return (n, n)

    def to_dict(self):
        return {"window": self.window, "stride": self.stride, "fill": self.fill}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Heatmap:
    raw: np.ndarray          # (gy, gx) non-negative |delta prediction|
    normalized: np.ndarray   # (gy, gx) in [0, 1]
    window: int
    stride: int
    base_prediction: float
    fill: str = "train_mean"

    def to_dict(self):
        return {
            "raw": self.raw.tolist(),
            "normalized": self.normalized.tolist(),
            "window": self.window,
            "stride": self.stride,
            "fill": self.fill,
            "base_prediction": self.base_prediction,
        }

    def save_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, d):
        return cls(
            raw=np.asarray(d["raw"], dtype=np.float32),
            normalized=np.asarray(d["normalized"], dtype=np.float32),
            window=d["window"], stride=d["stride"],
            base_prediction=d["base_prediction"], fill=d.get("fill", "train_mean"),
        )


def _fill_values(model, fill: str) -> np.ndarray:
    """Occluder pixel value per channel, in the model's input space.

    Inputs are standardized per channel with training-set stats, so the
    training mean is 0 there; constant gray is 0.5 pushed through the same
    standardization.
    """
    schema = getattr(model, "schema", None)
    stats = None
    if schema is not None and schema.image_mean is not None and schema.image_std is not None:
        stats = (np.asarray(schema.image_mean, dtype=np.float32),
                 np.asarray(schema.image_std, dtype=np.float32))
    if fill == "train_mean":
        if stats is None:
            raise ValueError("fill 'train_mean' requires image channel stats on the model schema")
        return np.zeros(3, dtype=np.float32)
    if stats is None:
        return np.full(3, 0.5, dtype=np.float32)
    mean, std = stats
    return (0.5 - mean) / std


def occlusion_sweep(model, image: np.ndarray, tabular: np.ndarray,
                    spec: OcclusionSpec) -> Heatmap:
    """Dense occlusion scan: one |prediction delta| per window position.

    Windows are top-left anchored on a row-major stride grid; the tabular
    input is held fixed throughout. Occluded predictions are batched.
    """
    if getattr(model, "kind", None) != "fusion":
        raise ValueError("occlusion_sweep requires a fusion model")
    if image.ndim != 3 or image.shape[0] != 3 or image.shape[1] != image.shape[2]:
        raise DimensionError(f"occlusion_sweep: image must be (3, s, s), got {image.shape}")
    size = image.shape[1]
    spec.validate(size)
    tabular = np.asarray(tabular, dtype=np.float32).reshape(1, -1)
    fill = _fill_values(model, spec.fill).reshape(3, 1, 1)

    base = float(model.forward(tabular, image[None]).reshape(()))
    gy, gx = spec.grid_shape(size)
    anchors = [(r * spec.stride, c * spec.stride) for r in range(gy) for c in range(gx)]
    raw = np.zeros(gy * gx, dtype=np.float32)
    for start in range(0, len(anchors), SWEEP_BATCH):
        chunk = anchors[start:start + SWEEP_BATCH]
        batch = np.repeat(image[None], len(chunk), axis=0)
        for j, (y0, x0) in enumerate(chunk):
            batch[j, :, y0:y0 + spec.window, x0:x0 + spec.window] = fill
        preds = model.forward(np.repeat(tabular, len(chunk), axis=0), batch).reshape(-1)
        raw[start:start + len(chunk)] = np.abs(preds - base)
    raw = raw.reshape(gy, gx)
    return Heatmap(raw=raw, normalized=normalize_heatmap(raw), window=spec.window,
                   stride=spec.stride, base_prediction=base, fill=spec.fill)


def normalize_heatmap(raw: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1] per image; a constant grid maps to all zeros."""
    raw = np.asarray(raw, dtype=np.float32)
    if raw.size == 0:
        raise ValueError("normalize_heatmap: empty grid")
    if np.any(raw < 0):
        raise ValueError("normalize_heatmap: raw influence scores must be non-negative")
    lo, hi = float(raw.min()), float(raw.max())
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def upsample_grid(grid: np.ndarray, window: int, stride: int, size: int) -> np.ndarray:
    """Bilinear upsample with grid values anchored at window centers."""
    gy, gx = grid.shape
    center0 = window / 2.0
    coords = (np.arange(size, dtype=np.float64) - center0) / stride
    u = np.clip(coords, 0.0, gy - 1.0)
    v = np.clip(coords, 0.0, gx - 1.0)
    y0 = np.floor(u).astype(int)
    x0 = np.floor(v).astype(int)
    y1 = np.minimum(y0 + 1, gy - 1)
    x1 = np.minimum(x0 + 1, gx - 1)
    fy = (u - y0)[:, None]
    fx = (v - x0)[None, :]
    g = grid.astype(np.float64)
    top = g[np.ix_(y0, x0)] * (1 - fx) + g[np.ix_(y0, x1)] * fx
    bot = g[np.ix_(y1, x0)] * (1 - fx) + g[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def render_heatmap_overlay(image: np.ndarray, heatmap: Heatmap) -> np.ndarray:
    """Blend a blue-to-red influence tint over the source image.

    `image` is the displayable (3, s, s) array in [0, 1]. Returns an RGBA
    uint8 array (s, s, 4); blue marks low influence, red high, at fixed
    opacity.
    """
    if image.ndim != 3 or image.shape[0] != 3 or image.shape[1] != image.shape[2]:
        raise DimensionError(f"render: image must be (3, s, s), got {image.shape}")
    size = image.shape[1]
    expected = (size - heatmap.window) // heatmap.stride + 1
    if heatmap.normalized.shape != (expected, expected):
        raise DimensionError(
            f"render: grid {heatmap.normalized.shape} does not match image size {size} "
            f"with window {heatmap.window} / stride {heatmap.stride}")
    heat = upsample_grid(heatmap.normalized, heatmap.window, heatmap.stride, size)
    color = np.empty((size, size, 3), dtype=np.float64)
    color[..., 0] = 255.0 * heat          # red rises with influence
    color[..., 1] = 0.0
    color[..., 2] = 255.0 * (1.0 - heat)  # blue fades with influence
    base = np.clip(image, 0.0, 1.0).transpose(1, 2, 0) * 255.0
    blended = (1.0 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * color
    rgba = np.empty((size, size, 4), dtype=np.uint8)
    rgba[..., :3] = np.clip(np.round(blended), 0, 255).astype(np.uint8)
    rgba[..., 3] = 255
    return rgba


def save_overlay_png(rgba: np.ndarray, path):
    Image.fromarray(rgba, mode="RGBA").save(path, format="PNG")
