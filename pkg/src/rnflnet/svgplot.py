"""Hand-rolled SVG figures: scatter with marginal histograms, violins,
ROC curves, Bland-Altman plots, LOWESS panels, Grad-CAM strips, and
gallery contact sheets.

SVG is the single plotting format on purpose: text-based, diffable, and
viewer-agnostic. Every writer formats floats with fixed precision, so a
rerun with identical inputs produces byte-identical files. Raster
panels (photos, heatmaps) embed as base64 PNG data URIs.
"""

from __future__ import annotations

import math

import numpy as np

from . import imagefiles

_PALETTE = ("#2b6cb0", "#c05621", "#2f855a", "#9b2c2c")


def _fmt(v):
    return f"{v:.3f}".rstrip("0").rstrip(".")


class Canvas:
    def __init__(self, width, height):
        self.width = width
        self.height = height
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
        ]

    def add(self, element):
        self.parts.append(element)

    def text(self, x, y, s, size=11, anchor="start", color="#222"):
        self.add(f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-family="sans-serif" '
                 f'font-size="{size}" text-anchor="{anchor}" fill="{color}">{s}</text>')

    def line(self, x1, y1, x2, y2, color="#444", width=1, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.add(f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" '
                 f'stroke="{color}" stroke-width="{width}"{d}/>')

    def circle(self, x, y, r, color, opacity=0.6):
        self.add(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{r}" fill="{color}" '
                 f'fill-opacity="{opacity}"/>')

    def rect(self, x, y, w, h, color, opacity=1.0):
        self.add(f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(w)}" height="{_fmt(h)}" '
                 f'fill="{color}" fill-opacity="{opacity}"/>')

    def polyline(self, points, color, width=1.5):
        pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
        self.add(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                 f'stroke-width="{width}"/>')

    def polygon(self, points, color, opacity=0.5):
        pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
        self.add(f'<polygon points="{pts}" fill="{color}" fill-opacity="{opacity}" '
                 f'stroke="{color}"/>')

    def image(self, x, y, w, h, array):
        uri = imagefiles.png_data_uri(array)
        self.add(f'<image x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(w)}" height="{_fmt(h)}" '
                 f'preserveAspectRatio="none" href="{uri}"/>')

    def write(self, path):
        self.parts.append("</svg>")
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(self.parts) + "\n")


class Axes:
    """Maps data coordinates onto a pixel box and draws simple ticks."""

    def __init__(self, canvas, box, x_range, y_range):
        self.canvas = canvas
        self.x0, self.y0, self.w, self.h = box
        xspan = x_range[1] - x_range[0] or 1.0
        yspan = y_range[1] - y_range[0] or 1.0
        self.x_range = (x_range[0], x_range[0] + xspan)
        self.y_range = (y_range[0], y_range[0] + yspan)

    def px(self, x):
        return self.x0 + (x - self.x_range[0]) / (self.x_range[1] - self.x_range[0]) * self.w

    def py(self, y):
        return self.y0 + self.h - (y - self.y_range[0]) / (self.y_range[1] - self.y_range[0]) * self.h

    def frame(self, x_label="", y_label="", ticks=5):
        c = self.canvas
        c.line(self.x0, self.y0 + self.h, self.x0 + self.w, self.y0 + self.h)
        c.line(self.x0, self.y0, self.x0, self.y0 + self.h)
        for i in range(ticks + 1):
            xv = self.x_range[0] + i * (self.x_range[1] - self.x_range[0]) / ticks
            yv = self.y_range[0] + i * (self.y_range[1] - self.y_range[0]) / ticks
            xp, yp = self.px(xv), self.py(yv)
            c.line(xp, self.y0 + self.h, xp, self.y0 + self.h + 4)
            c.text(xp, self.y0 + self.h + 16, _fmt(xv), size=9, anchor="middle")
            c.line(self.x0 - 4, yp, self.x0, yp)
            c.text(self.x0 - 6, yp + 3, _fmt(yv), size=9, anchor="end")
        if x_label:
            c.text(self.x0 + self.w / 2, self.y0 + self.h + 32, x_label, anchor="middle")
        if y_label:
            c.add(f'<text x="{_fmt(self.x0 - 38)}" y="{_fmt(self.y0 + self.h / 2)}" '
                  f'font-family="sans-serif" font-size="11" text-anchor="middle" '
                  f'transform="rotate(-90 {_fmt(self.x0 - 38)} {_fmt(self.y0 + self.h / 2)})" '
                  f'fill="#222">{y_label}</text>')


def _padded_range(values, pad=0.05):
    lo = float(np.min(values))
    hi = float(np.max(values))
    span = (hi - lo) or 1.0
    return lo - pad * span, hi + pad * span


def _histogram_bars(axes, values, bins, horizontal, box, color):
    counts, edges = np.histogram(values, bins=bins)
    peak = counts.max() or 1
    x0, y0, w, h = box
    for count, lo_e, hi_e in zip(counts, edges[:-1], edges[1:]):
        frac = count / peak
        if horizontal:
            y_top = axes.py(hi_e)
            y_bot = axes.py(lo_e)
            axes.canvas.rect(x0, y_top, frac * w, y_bot - y_top, color, opacity=0.55)
        else:
            x_lo = axes.px(lo_e)
            x_hi = axes.px(hi_e)
            axes.canvas.rect(x_lo, y0 + (1 - frac) * h, x_hi - x_lo, frac * h,
                             color, opacity=0.55)


def write_scatter_svg(path, pred, obs, x_label="observed thickness (um)",
                      y_label="predicted thickness (um)"):
    """Scatter of predictions against observations with marginal
    histograms and the identity line."""
    pred = np.asarray(pred)
    obs = np.asarray(obs)
    c = Canvas(560, 560)
    lo = min(_padded_range(obs)[0], _padded_range(pred)[0])
    hi = max(_padded_range(obs)[1], _padded_range(pred)[1])
    ax = Axes(c, (70, 130, 380, 360), (lo, hi), (lo, hi))
    ax.frame(x_label, y_label)
    _histogram_bars(ax, obs, 24, horizontal=False, box=(70, 40, 380, 80), color=_PALETTE[0])
    _histogram_bars(ax, pred, 24, horizontal=True, box=(462, 130, 80, 360), color=_PALETTE[1])
    c.line(ax.px(lo), ax.py(lo), ax.px(hi), ax.py(hi), color="#999", dash="4,3")
    for x, y in zip(obs, pred):
        c.circle(ax.px(x), ax.py(y), 2.2, _PALETTE[0], opacity=0.45)
    c.text(70, 24, f"n = {pred.size}")
    c.write(path)


def _gaussian_kde(values, grid):
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    if n < 2:
        return np.ones_like(grid)
    sd = v.std(ddof=1)
    iqr = np.subtract(*np.percentile(v, [75, 25]))
    scale = min(sd, iqr / 1.34) if iqr > 0 else sd
    bw = 0.9 * (scale if scale > 0 else 1.0) * n ** (-0.2)
    z = (grid[:, None] - v[None, :]) / bw
    return np.exp(-0.5 * z * z).sum(axis=1) / (n * bw * math.sqrt(2 * math.pi))


def write_violin_svg(path, groups, y_label="thickness (um)"):
    """Violin per (label, values) pair; Gaussian KDE with Silverman
    bandwidth."""
    labels = [g[0] for g in groups]
    allv = np.concatenate([np.asarray(g[1]) for g in groups])
    lo, hi = _padded_range(allv, pad=0.08)
    c = Canvas(120 + 90 * len(groups), 480)
    ax = Axes(c, (70, 40, 90 * len(groups), 380), (0, len(groups)), (lo, hi))
    ax.frame("", y_label, ticks=5)
    grid = np.linspace(lo, hi, 120)
    for i, (label, values) in enumerate(groups):
        values = np.asarray(values, dtype=np.float64)
        density = _gaussian_kde(values, grid)
        half_width = 0.42 * density / (density.max() or 1.0)
        center = i + 0.5
        right = [(ax.px(center + hw), ax.py(g)) for g, hw in zip(grid, half_width)]
        left = [(ax.px(center - hw), ax.py(g)) for g, hw in zip(grid[::-1], half_width[::-1])]
        c.polygon(right + left, _PALETTE[i % len(_PALETTE)], opacity=0.5)
        med = float(np.median(values))
        c.line(ax.px(center - 0.2), ax.py(med), ax.px(center + 0.2), ax.py(med),
               color="#222", width=1.5)
        c.text(ax.px(center), 452, label, size=10, anchor="middle")
    c.write(path)


def write_roc_svg(path, curves):
    """curves: iterable of (label, fpr, tpr, auc_text)."""
    c = Canvas(520, 520)
    ax = Axes(c, (70, 40, 400, 400), (0, 1), (0, 1))
    ax.frame("1 - specificity", "sensitivity", ticks=5)
    c.line(ax.px(0), ax.py(0), ax.px(1), ax.py(1), color="#bbb", dash="4,3")
    for i, (label, fpr, tpr, auc_text) in enumerate(curves):
        color = _PALETTE[i % len(_PALETTE)]
        c.polyline([(ax.px(x), ax.py(y)) for x, y in zip(fpr, tpr)], color)
        c.text(80, 60 + 16 * i, f"{label}: {auc_text}", size=11, color=color)
    c.write(path)


def write_bland_altman_svg(path, pred, obs, bias, loa_low, loa_high):
    pred = np.asarray(pred)
    obs = np.asarray(obs)
    means = (pred + obs) / 2.0
    diffs = pred - obs
    c = Canvas(560, 460)
    xr = _padded_range(means)
    spread = max(abs(float(diffs.min())), abs(float(diffs.max())), abs(loa_low), abs(loa_high))
    ax = Axes(c, (70, 40, 440, 360), xr, (-1.15 * spread, 1.15 * spread))
    ax.frame("mean of prediction and observation (um)", "prediction - observation (um)")
    for x, y in zip(means, diffs):
        c.circle(ax.px(x), ax.py(y), 2.2, _PALETTE[0], opacity=0.45)
    for value, label in ((bias, "bias"), (loa_low, "-1.96 SD"), (loa_high, "+1.96 SD")):
        c.line(ax.px(xr[0]), ax.py(value), ax.px(xr[1]), ax.py(value),
               color="#9b2c2c", dash="5,3")
        c.text(ax.px(xr[1]) - 4, ax.py(value) - 4, f"{label} = {value:.2f}",
               size=9, anchor="end", color="#9b2c2c")
    c.write(path)


def write_lowess_svg(path, panels):
    """panels: iterable of (title, x, y, x_fit, y_fit); one subplot each."""
    panels = list(panels)
    c = Canvas(80 + 460 * len(panels), 460)
    for i, (title, x, y, x_fit, y_fit) in enumerate(panels):
        x = np.asarray(x)
        y = np.asarray(y)
        ax = Axes(c, (70 + 460 * i, 50, 380, 340), _padded_range(x), _padded_range(y))
        ax.frame("SAP mean deviation (dB)", "thickness (um)" if i == 0 else "")
        for xi, yi in zip(x, y):
            c.circle(ax.px(xi), ax.py(yi), 2.0, _PALETTE[0], opacity=0.35)
        c.polyline([(ax.px(a), ax.py(b)) for a, b in zip(x_fit, y_fit)], _PALETTE[3], width=2)
        c.text(70 + 460 * i, 30, title, size=12)
    c.write(path)


def write_image_row_svg(path, panels, panel_px=192, caption=None):
    """panels: iterable of (title, image array in [0, 1])."""
    panels = list(panels)
    pad = 12
    width = pad + len(panels) * (panel_px + pad)
    height = panel_px + 64
    c = Canvas(width, height)
    for i, (title, array) in enumerate(panels):
        x = pad + i * (panel_px + pad)
        c.image(x, 40, panel_px, panel_px, array)
        c.text(x, 28, title, size=11)
    if caption:
        c.text(pad, height - 10, caption, size=10, color="#555")
    c.write(path)


def write_gallery_svg(path, entries, per_row=4, panel_px=160, title=""):
    """Contact sheet: entries of (image, caption_lines)."""
    entries = list(entries)
    pad = 14
    caption_h = 46
    rows = max(1, math.ceil(len(entries) / per_row)) if entries else 1
    width = pad + per_row * (panel_px + pad)
    height = 50 + rows * (panel_px + caption_h + pad)
    c = Canvas(width, height)
    if title:
        c.text(pad, 28, title, size=13)
    if not entries:
        c.text(pad, 60, "(no examples available)", size=11, color="#555")
    for i, (image, caption_lines) in enumerate(entries):
        r, k = divmod(i, per_row)
        x = pad + k * (panel_px + pad)
        y = 44 + r * (panel_px + caption_h + pad)
        c.image(x, y, panel_px, panel_px, image)
        for j, line in enumerate(caption_lines):
            c.text(x, y + panel_px + 14 + 12 * j, line, size=9)
    c.write(path)
