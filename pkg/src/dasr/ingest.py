"""Image decoding, preprocessing, and result rendering.

Preprocessing resizes so the long side hits the target (aspect ratio kept,
short side rounded), scales pixels to [0, 1], then applies the graph's
per-channel (v - mean) / scale. Channel order is RGB throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from . import nnops
from .errors import ConfigError, DataError, IOFormatError
from .graph import Preprocessing
from .regions import Box, SalientRegion

DEFAULT_LONG_SIDE = 512

# five-stop blue -> cyan -> green -> yellow -> red ramp for heat maps
_RAMP_POS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
_RAMP_RGB = np.array([(0, 0, 255), (0, 255, 255), (0, 255, 0),
                      (255, 255, 0), (255, 0, 0)], dtype=np.float64)


@dataclass(frozen=True)
class PreprocessSpec:
    long_side: int = DEFAULT_LONG_SIDE
    mean: tuple[float, ...] = (0.0, 0.0, 0.0)
    scale: tuple[float, ...] = (1.0, 1.0, 1.0)
    interpolation: str = "bilinear"

    def __post_init__(self):
        if self.long_side <= 0:
            raise ConfigError("long side target must be positive")

    @classmethod
    def from_graph_preprocessing(cls, pre: Preprocessing,
                                 long_side: int = DEFAULT_LONG_SIDE):
        return cls(long_side=long_side, mean=tuple(pre.mean),
                   scale=tuple(pre.scale))


def resized_extent(h: int, w: int, target: int) -> tuple[int, int]:
    """New (H, W) with the long side at `target`, short side rounded."""
    if h >= w:
        return target, max(1, round(w * target / h))
    return max(1, round(h * target / w)), target


def load_image(path) -> np.ndarray:
    """Decode to an 8-bit RGB array of shape (H, W, 3)."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
    except FileNotFoundError as exc:
        raise IOFormatError(f"cannot read image {path}: {exc}") from exc
    except Exception as exc:
        raise IOFormatError(f"cannot decode image {path}: {exc}") from exc
    arr = np.asarray(rgb, dtype=np.uint8)
    if arr.size == 0:
        raise DataError(f"image {path} has zero area")
    return arr


def preprocess(image: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    """Resize + normalize an 8-bit RGB array into a float32 input tensor."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError("preprocess expects an (H, W, 3) RGB array")
    h, w = image.shape[:2]
    if h == 0 or w == 0:
        raise DataError("image has zero area")
    nh, nw = resized_extent(h, w, spec.long_side)
    if (nh, nw) != (h, w):
        pil = Image.fromarray(image, mode="RGB")
        image = np.asarray(pil.resize((nw, nh), Image.Resampling.BILINEAR))
    x = image.astype(np.float32) / 255.0
    mean = np.asarray(spec.mean, dtype=np.float32)
    scale = np.asarray(spec.scale, dtype=np.float32)
    return nnops.as_tensor((x - mean) / scale)


def preprocess_file(path, spec: PreprocessSpec) -> np.ndarray:
    return preprocess(load_image(path), spec)


def heatmap_rgb(mean_map: np.ndarray, size_hw: tuple[int, int]) -> np.ndarray:
    """Color-ramped rendering of a 2-D map, bilinearly upscaled to size_hw."""
    m = np.asarray(mean_map, dtype=np.float64)
    top = m.max()
    v = m / top if top > 0 else np.zeros_like(m)
    channels = [np.interp(v, _RAMP_POS, _RAMP_RGB[:, c]) for c in range(3)]
    small = np.stack(channels, axis=2).astype(np.uint8)
    pil = Image.fromarray(small, mode="RGB")
    h, w = size_hw
    return np.asarray(pil.resize((w, h), Image.Resampling.BILINEAR))


def render_heatmap(image: np.ndarray, mean_map: np.ndarray, path,
                   alpha: float = 0.5) -> None:
    """Blend the activation heat map over the image and save it."""
    heat = heatmap_rgb(mean_map, image.shape[:2]).astype(np.float64)
    blended = (1.0 - alpha) * image.astype(np.float64) + alpha * heat
    Image.fromarray(blended.round().astype(np.uint8), mode="RGB").save(path)


def _ellipse_points(region: SalientRegion, steps: int = 72) -> list[tuple[float, float]]:
    e = region.ellipse
    cy, cx = e.center
    ca, sa = math.cos(e.orientation), math.sin(e.orientation)
    pts = []
    for i in range(steps):
        t = 2.0 * math.pi * i / steps
        u = e.semi_major * math.cos(t)
        v = e.semi_minor * math.sin(t)
        pts.append((cx + u * ca - v * sa, cy + u * sa + v * ca))
    return pts


def render_regions(image: np.ndarray, regions: list[SalientRegion], path) -> None:
    """Draw region boxes and their ellipses on a copy of the image."""
    pil = Image.fromarray(image, mode="RGB")
    draw = ImageDraw.Draw(pil)
    for region in regions:
        t, l, b, r = region.bbox
        draw.rectangle([l, t, r - 1, b - 1], outline=(255, 0, 0), width=2)
        draw.polygon(_ellipse_points(region), outline=(255, 255, 0))
    pil.save(path)


def render_box(image: np.ndarray, box: Box, path,
               color: tuple[int, int, int] = (0, 255, 0)) -> None:
    pil = Image.fromarray(image, mode="RGB")
    draw = ImageDraw.Draw(pil)
    t, l, b, r = box
    draw.rectangle([l, t, r - 1, b - 1], outline=color, width=2)
    pil.save(path)
