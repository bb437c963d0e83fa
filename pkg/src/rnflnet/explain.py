"""Grad-CAM heatmaps over input photographs.

The target layer is the final feature map of the last stage (the
activations feeding global average pooling). Channel weights are the
spatial means of the target's gradient with respect to those
activations; the map is relu of the weighted channel sum, normalized by
its maximum (an all-zero map passes through untouched to avoid a divide
by zero), then bilinearly upsampled to input resolution.

For the regression target the "score" is the raw z-scored output, which
is monotone in micrometers, so gradient signs stay meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import imagefiles
from . import ndtensor as nd
from .ndtensor import Tensor

TARGETS = ("regression", "abnormality")


@dataclass
class Heatmap:
    grid: np.ndarray        # (h, w) in [0, 1], max exactly 1 unless all zero
    upsampled: np.ndarray   # (H, W) at input resolution


def bilinear_upsample(grid, size):
    """Corner-aligned bilinear interpolation of (h, w) onto (size, size)."""
    h, w = grid.shape
    if h == 1 and w == 1:
        return np.full((size, size), grid[0, 0])
    ys = np.linspace(0.0, h - 1, size)
    xs = np.linspace(0.0, w - 1, size)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    return (grid[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
            + grid[np.ix_(y0, x1)] * (1 - fy) * fx
            + grid[np.ix_(y1, x0)] * fy * (1 - fx)
            + grid[np.ix_(y1, x1)] * fy * fx)


def weighted_activation_map(activations, gradients):
    """relu(sum_k alpha_k * A_k) / max, with alpha_k the spatial gradient
    means. Shapes are (K, h, w); an identically-zero map stays zero."""
    alphas = gradients.mean(axis=(1, 2))
    cam = np.maximum((alphas[:, None, None] * activations).sum(axis=0), 0.0)
    peak = cam.max()
    if peak > 0.0:
        cam = cam / peak
    return cam


def gradcam(model, image, target="regression") -> Heatmap:
    """Heatmap for one image ((C, H, W) array) against the chosen head."""
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}, got {target!r}")
    batch = np.asarray(image, dtype=np.float64)
    if batch.ndim == 3:
        batch = batch[None]
    if batch.shape[0] != 1:
        raise ValueError("gradcam explains one image at a time")

    x = Tensor(batch)
    out = model.forward(x, train=False, capture_features=True)
    features = out.get("features")
    if features is None or features.data.ndim != 4:
        raise ValueError("model exposes no convolutional feature map")
    if target == "regression":
        head = out.get("regression")
        if head is None:
            raise ValueError("model has no regression head")
    else:
        head = out.get("classification")
        if head is None:
            raise ValueError("model has no classification head (abnormality target)")

    model.zero_grad()
    nd.backward(nd.tensor_sum(head))
    grads = features.grad
    if grads is None:
        raise ValueError("no gradient reached the feature map")
    grid = weighted_activation_map(features.data[0], grads[0])
    model.zero_grad()
    upsampled = np.clip(bilinear_upsample(grid, batch.shape[2]), 0.0, 1.0)
    return Heatmap(grid=grid, upsampled=upsampled)


BLUE = np.array([0.0, 0.0, 1.0])
RED = np.array([1.0, 0.0, 0.0])


def color_ramp(values):
    """Fixed blue-to-red ramp over [0, 1] -> (..., 3)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return BLUE * (1.0 - v[..., None]) + RED * v[..., None]


def overlay(image, heatmap, alpha=0.4):
    """Alpha-blend the color-ramped heatmap onto the photo.

    ``image`` is (C, H, W) or (H, W) in [0, 1]; grayscale replicates to
    RGB. Pixel-wise: out = (1 - alpha) * img + alpha * ramp(heat).
    Returns (H, W, 3).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0) if img.shape[0] != 3 else img.transpose(1, 2, 0)
    heat = heatmap.upsampled if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    if img.shape[:2] != heat.shape:
        raise ValueError(f"image {img.shape[:2]} and heatmap {heat.shape} disagree")
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return (1.0 - alpha) * img + alpha * color_ramp(heat)


def write_outputs(prefix, image, heatmap, alpha=0.4):
    """Write <prefix>_heatmap.pgm, <prefix>_overlay.ppm, and an SVG that
    embeds photo, heatmap, and overlay side by side."""
    from . import svgplot

    blended = overlay(image, heatmap, alpha)
    heat_path = f"{prefix}_heatmap.pgm"
    over_path = f"{prefix}_overlay.ppm"
    svg_path = f"{prefix}_gradcam.svg"
    imagefiles.write_pgm(heat_path, heatmap.upsampled)
    imagefiles.write_ppm(over_path, blended)

    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0) if img.shape[0] != 3 else img.transpose(1, 2, 0)
    panels = [("photo", img), ("heatmap", heatmap.upsampled), ("overlay", blended)]
    svgplot.write_image_row_svg(svg_path, panels)
    return heat_path, over_path, svg_path
