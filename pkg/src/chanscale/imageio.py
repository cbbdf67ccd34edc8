"""Netpbm (PGM/PPM) reading and writing, bilinear resizing, heatmap palette."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError


def _tokens(data, count, pos):
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError("truncated netpbm header")
        out.append(data[start:pos])
    return out, pos


def read_pnm(path):
    """Read P2/P3/P5/P6 into ``(h, w, c)`` float32 in [0, 1]."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise DataError(f"{path}: not a PGM/PPM file")
    channels = 1 if magic in (b"P2", b"P5") else 3
    (w, h, maxval), pos = _tokens(data, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise DataError(f"{path}: bad maxval {maxval}")
    count = w * h * channels
    if magic in (b"P5", b"P6"):
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = data[pos:pos + count * dtype.itemsize]
        if len(raw) != count * dtype.itemsize:
            raise DataError(f"{path}: truncated pixel data")
        values = np.frombuffer(raw, dtype=dtype)
    else:
        tokens, _ = _tokens(data, count, pos)
        values = np.array([int(t) for t in tokens])
    return (values.reshape(h, w, channels).astype(np.float32) / np.float32(maxval))


def _to_uint8(image):
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, image):
    """Write a 2-D array in [0, 1] (or uint8) as binary 8-bit PGM."""
    image = np.asarray(image)
    pixels = image if image.dtype == np.uint8 else _to_uint8(image)
    if pixels.ndim == 3:
        pixels = pixels[..., 0]
    h, w = pixels.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes())
    return path


def write_ppm(path, image):
    """Write an ``(h, w, 3)`` array in [0, 1] (or uint8) as binary PPM."""
    image = np.asarray(image)
    pixels = image if image.dtype == np.uint8 else _to_uint8(image)
    h, w, _ = pixels.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels).tobytes())
    return path


def resize_bilinear(image, out_h, out_w):
    """Half-pixel-centred bilinear resize of ``(h, w)`` or ``(h, w, c)``."""
    image = np.asarray(image)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[..., None]
    h, w = image.shape[:2]

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo)

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    img = image.astype(np.float64)
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    out = out.astype(image.dtype if image.dtype.kind == "f" else np.float32)
    return out[..., 0] if squeeze else out


def jet_palette():
    """256 x 3 uint8 jet-style palette.

    Entry ``i`` with ``x = i / 255`` has channels
    ``r = clip(1.5 - |4x - 3|)``, ``g = clip(1.5 - |4x - 2|)``, ``b = clip(1.5 - |4x - 1|)``,
    each clipped to [0, 1] and scaled to 0..255.
    """
    x = np.arange(256) / 255.0
    rgb = np.stack([1.5 - np.abs(4 * x - 3), 1.5 - np.abs(4 * x - 2), 1.5 - np.abs(4 * x - 1)], axis=1)
    return _to_uint8(np.clip(rgb, 0, 1))


def overlay(image, heatmap, alpha=0.5):
    """Blend a [0, 1] heatmap through the jet palette over a grayscale image."""
    gray = np.asarray(image, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    colors = jet_palette()[_to_uint8(heatmap)] / 255.0
    return (1 - alpha) * gray[..., None] + alpha * colors
