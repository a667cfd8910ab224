"""Overlay rendering: detection boxes and segmentation on top of the input image.

Everything happens on 8-bit ``[H, W, 3]`` pixel arrays so reruns produce
byte-identical P6 files.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import structlog

from stuffnet.boxgeom import Box
from stuffnet.config import InferenceSettings, ProposalSettings
from stuffnet.layers import IGNORE_LABEL
from stuffnet.model import Model, detect, segment
from stuffnet.utils import atomic_write_bytes

logger = None


def _get_logger() -> Any:
    """Get or create logger instance."""
    global logger
    if logger is None:
        logger = structlog.get_logger()
    return logger


def class_palette(n: int) -> np.ndarray:
    """VOC-style colour map: bits of the class index spread over R, G and B.

    Example:
        >>> class_palette(3).tolist()
        [[0, 0, 0], [128, 0, 0], [0, 128, 0]]
    """
    if n < 1:
        raise ValueError(f"palette size must be >= 1, got {n}")
    palette = np.zeros((n, 3), dtype=np.uint8)
    for k in range(n):
        c = k
        r = g = b = 0
        for shift in range(7, -1, -1):
            r |= (c & 1) << shift
            g |= ((c >> 1) & 1) << shift
            b |= ((c >> 2) & 1) << shift
            c >>= 3
        palette[k] = (r, g, b)
    return palette


def to_pixels(image: np.ndarray) -> np.ndarray:
    """``[3,H,W]`` floats in [0, 1] to ``[H,W,3]`` uint8."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0).copy()


def overlay_segmentation(
    pixels: np.ndarray, labels: np.ndarray, alpha: float = 0.5, palette: np.ndarray | None = None
) -> np.ndarray:
    """Blend class colours over the image; ignore-labelled pixels stay untouched."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != pixels.shape[:2]:
        raise ValueError(f"label map {labels.shape} does not match image {pixels.shape[:2]}")
    palette = palette if palette is not None else class_palette(int(labels.max(initial=0)) + 1)
    colors = palette[np.clip(labels, 0, None)].astype(np.float64)
    blended = np.round((1.0 - alpha) * pixels.astype(np.float64) + alpha * colors)
    out = blended.astype(np.uint8)
    keep = labels == IGNORE_LABEL
    out[keep] = pixels[keep]
    return out


def box_pixel_bounds(box: Box, width: int, height: int) -> tuple[int, int, int, int]:
    """Inclusive pixel rectangle ``(c0, r0, c1, r1)`` covered by a box."""
    c0 = int(np.clip(np.floor(box.x0), 0, width - 1))
    r0 = int(np.clip(np.floor(box.y0), 0, height - 1))
    c1 = int(np.clip(np.ceil(box.x1) - 1, c0, width - 1))
    r1 = int(np.clip(np.ceil(box.y1) - 1, r0, height - 1))
    return c0, r0, c1, r1


def draw_boxes(
    pixels: np.ndarray,
    boxes: Sequence[Box],
    width: int = 2,
    palette: np.ndarray | None = None,
) -> np.ndarray:
    """Draw ``width``-pixel borders, coloured by class id, inside each box."""
    out = pixels.copy()
    if not boxes:
        return out
    h, w = out.shape[:2]
    max_class = max(int(b.class_id or 0) for b in boxes)
    palette = palette if palette is not None else class_palette(max_class + 1)
    for box in boxes:
        color = palette[int(box.class_id or 0)]
        c0, r0, c1, r1 = box_pixel_bounds(box, w, h)
        out[r0 : min(r0 + width, r1 + 1), c0 : c1 + 1] = color
        out[max(r1 - width + 1, r0) : r1 + 1, c0 : c1 + 1] = color
        out[r0 : r1 + 1, c0 : min(c0 + width, c1 + 1)] = color
        out[r0 : r1 + 1, max(c1 - width + 1, c0) : c1 + 1] = color
    return out


def encode_pixels_ppm(pixels: np.ndarray) -> bytes:
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes()


@dataclass
class RenderResult:
    pixels: np.ndarray
    detections: list[Box]
    segmented: bool


def render_overlay(
    model: Model,
    image: np.ndarray,
    proposal_settings: ProposalSettings | None = None,
    inference_settings: InferenceSettings | None = None,
    alpha: float = 0.5,
) -> RenderResult:
    """Segmentation overlay (when the model has a seg stage) plus detections above
    the render threshold."""
    inference_settings = inference_settings or InferenceSettings()
    pixels = to_pixels(image)
    segmented = model.spec.has_segmentation
    if segmented:
        labels = np.argmax(segment(model, image), axis=0)
        pixels = overlay_segmentation(
            pixels, labels, alpha, class_palette(model.spec.num_seg_classes)
        )
    detections = [
        d
        for d in detect(model, image, proposal_settings, inference_settings)
        if (d.score or 0.0) >= inference_settings.render_threshold
    ]
    # Box colours index the object palette, offset past the seg classes to stay distinct.
    palette = class_palette(model.spec.num_seg_classes + model.spec.num_classes)
    pixels = draw_boxes(pixels, detections, palette=palette[model.spec.num_seg_classes :])
    return RenderResult(pixels=pixels, detections=detections, segmented=segmented)


def write_render(result: RenderResult, path: str | Path) -> Path:
    path = Path(path)
    atomic_write_bytes(path, encode_pixels_ppm(result.pixels))
    _get_logger().debug("render_written", path=str(path), detections=len(result.detections))
    return path
