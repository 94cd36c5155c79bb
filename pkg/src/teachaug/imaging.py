"""Minimal PNG writer (8-bit RGB) and the before/after grid used by ``visualize``."""
from __future__ import annotations

import struct
import zlib

import numpy as np

from .checkpoint import atomic_write


def encode_png(rgb: np.ndarray) -> bytes:
    """``rgb`` is [H, W, 3] uint8 or float in [0, 1]."""
    if rgb.dtype != np.uint8:
        rgb = np.rint(np.clip(rgb, 0, 1) * 255).astype(np.uint8)
    h, w, _ = rgb.shape
    raw = b"".join(b"\x00" + rgb[i].tobytes() for i in range(h))

    def chunk(tag: bytes, body: bytes) -> bytes:
        return struct.pack(">I", len(body)) + tag + body + struct.pack(">I", zlib.crc32(tag + body))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(raw, 9)) + \
        chunk(b"IEND", b"")


def decode_png_rgb(data: bytes) -> np.ndarray:
    """Inverse of ``encode_png`` for its own output (filter type 0 only)."""
    pos = 8
    idat = b""
    w = h = 0
    while pos < len(data):
        (n,) = struct.unpack(">I", data[pos:pos + 4])
        tag = data[pos + 4:pos + 8]
        body = data[pos + 8:pos + 8 + n]
        if tag == b"IHDR":
            w, h = struct.unpack(">II", body[:8])
        elif tag == b"IDAT":
            idat += body
        pos += 12 + n
    raw = np.frombuffer(zlib.decompress(idat), dtype=np.uint8).reshape(h, 1 + 3 * w)
    return raw[:, 1:].reshape(h, w, 3)


def scatter_panel(before: np.ndarray, after: np.ndarray, size: int = 96) -> np.ndarray:
    """Two side-by-side red/green projections of pixel colours, blue ignored.

    Each point is drawn in its own colour on a dark background; left panel is
    before, right panel after augmentation.
    """
    panel = np.full((size, 2 * size + 4, 3), 0.1)
    for k, pix in enumerate((before, after)):
        pts = pix.reshape(-1, 3)
        xs = np.clip((pts[:, 0] * (size - 1)).astype(int), 0, size - 1)
        ys = np.clip(((1 - pts[:, 1]) * (size - 1)).astype(int), 0, size - 1)
        panel[ys, xs + k * (size + 4)] = pts
    return panel


def image_grid(originals: np.ndarray, augmented: np.ndarray, pad: int = 2) -> np.ndarray:
    """Row 1 originals, row 2 augmented, then the colour scatter strip."""
    n, h, w, _ = originals.shape
    width = n * (w + pad) + pad
    rows = np.ones((2 * (h + pad) + pad, width, 3))
    for r, imgs in enumerate((originals, augmented)):
        for i in range(n):
            y0 = pad + r * (h + pad)
            x0 = pad + i * (w + pad)
            rows[y0:y0 + h, x0:x0 + w] = imgs[i]
    strip = scatter_panel(originals, augmented)
    full_w = max(width, strip.shape[1])
    canvas = np.ones((rows.shape[0] + strip.shape[0] + pad, full_w, 3))
    canvas[:rows.shape[0], :width] = rows
    canvas[rows.shape[0] + pad:, :strip.shape[1]] = strip
    return canvas


def write_png(path, rgb: np.ndarray) -> None:
    atomic_write(path, encode_png(rgb))
