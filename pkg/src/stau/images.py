"""Grayscale image output: binary PGM (own reader/writer), PNG via Pillow, grids."""

from __future__ import annotations

import numpy as np
from PIL import Image


def to_uint8(img):
    img = np.clip(np.asarray(img, np.float64), 0.0, 1.0)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def minmax(img):
    """Scale to [0, 1]; a constant map becomes all zeros."""
    img = np.asarray(img, np.float64)
    lo, hi = img.min(), img.max()
    if hi <= lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def tile(images, cols, pad=1, fill=1.0):
    """Arrange equally sized (H, W) images in a grid with ``pad`` pixel borders."""
    images = [np.asarray(i, np.float64) for i in images]
    if not images:
        raise ValueError("no images to tile")
    h, w = images[0].shape
    rows = -(-len(images) // cols)
    grid = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad), fill)
    for n, img in enumerate(images):
        r, c = divmod(n, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y:y + h, x:x + w] = img
    return grid


def write_pgm(path, img):
    data = to_uint8(img)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    """Read a binary (P5, maxval 255) PGM written by write_pgm; returns uint8 (H, W)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only binary 8-bit PGM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    data = np.frombuffer(raw, np.uint8, w * h, pos)
    return data.reshape(h, w)


def write_png(path, img):
    Image.fromarray(to_uint8(img), mode="L").save(path)


def read_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def save_gray(stem, img, formats=("pgm", "png")):
    """Write ``img`` as stem.pgm / stem.png; returns the written paths."""
    paths = []
    for fmt in formats:
        path = f"{stem}.{fmt}"
        (write_pgm if fmt == "pgm" else write_png)(path, img)
        paths.append(path)
    return paths
