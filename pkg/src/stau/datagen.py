"""Bouncing-sprite sequences (Moving-MNIST style), IDX loading, sequence container.

Randomness comes from an explicit xoshiro256++ generator seeded through
SplitMix64, so a (seed, index) pair yields the same sequence on any platform.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

SEQ_MAGIC = b"STAUSEQ1"
SEQ_VERSION = 1
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class FormatError(ValueError):
    pass


class SplitMix64:
    def __init__(self, seed):
        self.state = seed & MASK64

    def next(self):
        self.state = (self.state + GOLDEN) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256pp:
    def __init__(self, seed=None, state=None):
        if state is None:
            sm = SplitMix64(seed)
            state = [sm.next() for _ in range(4)]
        if not any(state):
            raise ValueError("xoshiro state must not be all zero")
        self.s = list(state)

    @classmethod
    def for_stream(cls, seed, index):
        """Independent stream for sequence ``index`` under a global ``seed``."""
        return cls(((seed & MASK64) * GOLDEN + index) & MASK64)

    def next(self):
        s0, s1, s2, s3 = self.s
        result = (_rotl((s0 + s3) & MASK64, 23) + s0) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def uniform(self, lo=0.0, hi=1.0):
        return lo + (hi - lo) * ((self.next() >> 11) * (1.0 / (1 << 53)))

    def randbelow(self, n):
        # Lemire-free rejection keeps the mapping exact and portable
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next()
            if x < limit:
                return x % n


# ---------------------------------------------------------------------------
# sprites and trajectories


def rect_sprite(h, w):
    return np.ones((h, w), np.float32)


def cross_sprite(size):
    img = np.zeros((size, size), np.float32)
    arm = max(1, size // 3)
    lo = (size - arm) // 2
    img[lo:lo + arm, :] = 1.0
    img[:, lo:lo + arm] = 1.0
    return img


def reflect(pos, vel, upper):
    """Advance one frame with elastic reflection inside [0, upper]."""
    if upper <= 0:
        return 0.0, vel
    pos += vel
    while pos < 0 or pos > upper:
        if pos < 0:
            pos = -pos
        else:
            pos = 2 * upper - pos
        vel = -vel
    return pos, vel


def trajectory(start, velocity, upper, length):
    """Real-valued 1-D positions over ``length`` frames."""
    out = [float(start)]
    pos, vel = float(start), float(velocity)
    for _ in range(length - 1):
        pos, vel = reflect(pos, vel, upper)
        out.append(pos)
    return out


def pixel(pos, upper):
    # round half up; np.round would round half to even
    return min(max(int(math.floor(pos + 0.5)), 0), max(upper, 0))


def render(canvas_hw, sprites, tracks, composite="max"):
    """Render frames (T, 1, H, W) from sprite images and (ys, xs) tracks."""
    h, w = canvas_hw
    length = len(tracks[0][0])
    frames = np.zeros((length, 1, h, w), np.float32)
    for img, (ys, xs) in zip(sprites, tracks):
        sh, sw = img.shape
        for t in range(length):
            y, x = pixel(ys[t], h - sh), pixel(xs[t], w - sw)
            region = frames[t, 0, y:y + sh, x:x + sw]
            if composite == "max":
                np.maximum(region, img, out=region)
            else:
                region += img
    np.clip(frames, 0.0, 1.0, out=frames)
    return frames


@dataclass
class SpriteSequenceSpec:
    height: int = 64
    width: int = 64
    length: int = 20
    sprites: int = 2
    source: str = "mnist"  # rect | cross | mnist
    sprite_h: int = 28
    sprite_w: int = 28
    velocity_min: float = 1.0
    velocity_max: float = 3.0
    seed: int = 0
    composite: str = "max"

    def validate(self):
        if self.length < 2:
            raise ValueError("sequence length must be >= 2")
        if self.source not in ("rect", "cross", "mnist"):
            raise ValueError(f"unknown sprite source {self.source!r}")
        sh, sw = (28, 28) if self.source == "mnist" else (self.sprite_h, self.sprite_w)
        if sh > self.height or sw > self.width:
            raise ValueError(f"sprite {sh}x{sw} larger than canvas {self.height}x{self.width}")
        if not 0 <= self.velocity_min <= self.velocity_max:
            raise ValueError("velocity range must satisfy 0 <= min <= max")
        if self.velocity_max >= min(self.height, self.width):
            raise ValueError("per-frame displacement must be smaller than the canvas")
        if self.composite not in ("max", "add"):
            raise ValueError("composite must be 'max' or 'add'")


def _sprite(spec, rng, digits):
    if spec.source == "rect":
        return rect_sprite(spec.sprite_h, spec.sprite_w)
    if spec.source == "cross":
        return cross_sprite(spec.sprite_h)
    if digits is None or len(digits) == 0:
        raise ValueError("mnist sprites need a digit image set (see load_idx)")
    return digits[rng.randbelow(len(digits))]


def generate_one(spec: SpriteSequenceSpec, index, digits=None):
    rng = Xoshiro256pp.for_stream(spec.seed, index)
    sprites, tracks = [], []
    for _ in range(spec.sprites):
        img = _sprite(spec, rng, digits)
        sh, sw = img.shape
        uy, ux = spec.height - sh, spec.width - sw
        y0, x0 = rng.uniform(0, uy), rng.uniform(0, ux)
        vy = rng.uniform(spec.velocity_min, spec.velocity_max)
        vx = rng.uniform(spec.velocity_min, spec.velocity_max)
        if rng.next() >> 63:
            vy = -vy
        if rng.next() >> 63:
            vx = -vx
        sprites.append(img)
        tracks.append((trajectory(y0, vy, uy, spec.length), trajectory(x0, vx, ux, spec.length)))
    return render((spec.height, spec.width), sprites, tracks, spec.composite)


def generate(spec: SpriteSequenceSpec, count, digits=None, start=0):
    """Batch of ``count`` sequences shaped (count, T, 1, H, W), values in [0, 1]."""
    spec.validate()
    out = np.empty((count, spec.length, 1, spec.height, spec.width), np.float32)
    for i in range(count):
        out[i] = generate_one(spec, start + i, digits)
    return out


# ---------------------------------------------------------------------------
# IDX files


def _open(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx(path, expect_magic):
    raw = _open(path)
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise FormatError(f"{path}: expected {count} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, np.uint8, count, header).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array, np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path, labels_path=None):
    """Load MNIST-style digits as float32 (N, 28, 28) in [0, 1] (and labels)."""
    images = read_idx(images_path, IDX_IMAGES)
    digits = images.astype(np.float32) / 255.0
    if labels_path is None:
        return digits, None
    labels = read_idx(labels_path, IDX_LABELS)
    if labels.shape[0] != images.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return digits, labels


# ---------------------------------------------------------------------------
# STAUSEQ1 container


def save_batch(path, batch):
    batch = np.asarray(batch)
    if batch.ndim != 5:
        raise ValueError("batch must be (B, T, C, H, W)")
    with open(path, "wb") as fh:
        fh.write(SEQ_MAGIC)
        fh.write(struct.pack("<I", SEQ_VERSION))
        fh.write(struct.pack("<5I", *batch.shape))
        fh.write(np.ascontiguousarray(batch, dtype="<f4").tobytes())


def load_batch(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 32 or raw[:8] != SEQ_MAGIC:
        raise FormatError(f"{path}: not a STAUSEQ1 file")
    (version,) = struct.unpack("<I", raw[8:12])
    if version != SEQ_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    dims = struct.unpack("<5I", raw[12:32])
    count = int(np.prod(dims))
    if len(raw) - 32 != 4 * count:
        raise FormatError(f"{path}: header promises {count} values, payload has {(len(raw) - 32) / 4:g}")
    return np.frombuffer(raw, "<f4", count, 32).astype(np.float32).reshape(dims)
