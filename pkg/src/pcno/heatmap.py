"""Tiny dependency-free PNG writer and heatmap rendering for field matrices.

Figures are offline inspection artifacts, so the rasterizer is deliberately
minimal: 8-bit RGB, no text, one pixel per grid cell (optionally integer
upscaled).
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

# Five-anchor sequential colormap (dark blue -> teal -> yellow), linearly
# interpolated; index 0 maps the field minimum, 255 the maximum.
_ANCHORS = np.array([
    (13, 8, 135),
    (84, 2, 163),
    (186, 55, 121),
    (240, 140, 60),
    (240, 249, 33),
], dtype=np.float64)


def _colormap() -> np.ndarray:
    stops = np.linspace(0.0, 1.0, len(_ANCHORS))
    xs = np.linspace(0.0, 1.0, 256)
    table = np.empty((256, 3), dtype=np.uint8)
    for c in range(3):
        table[:, c] = np.clip(np.interp(xs, stops, _ANCHORS[:, c]), 0, 255)
    return table


_TABLE = _colormap()


def write_png(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as a PNG file."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("expected an (H, W, 3) uint8 array")
    height, width = rgb.shape[:2]
    raw = b"".join(b"\x00" + rgb[row].tobytes() for row in range(height))

    def chunk(tag: bytes, payload: bytes) -> bytes:
        body = tag + payload
        return struct.pack(">I", len(payload)) + body \
            + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)

    header = struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0)
    blob = b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", header) \
        + chunk(b"IDAT", zlib.compress(raw, 6)) + chunk(b"IEND", b"")
    with open(path, "wb") as fh:
        fh.write(blob)


def render_heatmap(field: np.ndarray, vmin: float | None = None,
                   vmax: float | None = None, grayscale: bool = False,
                   upscale: int = 1) -> np.ndarray:
    """Map a 2-D field to an RGB image (rows = time, columns = position)."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise ValueError("expected a 2-D field")
    lo = float(np.min(field)) if vmin is None else vmin
    hi = float(np.max(field)) if vmax is None else vmax
    if hi <= lo:
        hi = lo + 1.0
    idx = np.clip((field - lo) / (hi - lo) * 255.0, 0, 255).astype(np.uint8)
    if grayscale:
        rgb = np.repeat(idx[:, :, None], 3, axis=2)
    else:
        rgb = _TABLE[idx]
    if upscale > 1:
        rgb = np.repeat(np.repeat(rgb, upscale, axis=0), upscale, axis=1)
    return rgb


def save_heatmap(path, field: np.ndarray, vmin: float | None = None,
                 vmax: float | None = None, grayscale: bool = False,
                 upscale: int = 1) -> None:
    write_png(path, render_heatmap(field, vmin, vmax, grayscale, upscale))
