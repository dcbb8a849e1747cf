"""Image I/O (binary PGM/PPM), the built-in toy texture source, and patch sampling."""
from __future__ import annotations

import glob as globmod
import os
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class DataError(ValueError):
    pass


@dataclass
class ImageRecord:
    pixels: np.ndarray  # (C, H, W) uint8-valued int64
    source: str = ""


# -- PNM ------------------------------------------------------------------------

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def read_pnm(path_or_bytes):
    """Read an 8-bit binary PGM (P5) or PPM (P6) into a (C, H, W) int64 array."""
    if isinstance(path_or_bytes, (bytes, bytearray)):
        data = bytes(path_or_bytes)
    else:
        with open(path_or_bytes, "rb") as f:
            data = f.read()
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if not m:
            raise DataError("truncated PNM header")
        fields.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = fields
    if magic not in (b"P5", b"P6"):
        raise DataError(f"unsupported format {magic!r}; only binary P5/P6")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise DataError("16-bit PNM is not supported")
    if maxval < 1:
        raise DataError("bad maxval")
    pos += 1  # single whitespace after maxval
    c = 1 if magic == b"P5" else 3
    n = w * h * c
    if len(data) < pos + n:
        raise DataError("truncated PNM pixel data")
    px = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).reshape(h, w, c)
    return px.transpose(2, 0, 1).astype(np.int64)


def write_pnm(path, x):
    """Write a (C, H, W) or (H, W) image as P5/P6, clipping to [0, 255] for display."""
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    c, h, w = x.shape
    if c not in (1, 3):
        raise DataError("PNM needs 1 or 3 channels")
    px = np.clip(x, 0, 255).astype(np.uint8).transpose(1, 2, 0)
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode()
    data = header + px.tobytes()
    if path is not None:
        with open(path, "wb") as f:
            f.write(data)
    return data


def ingest(pattern):
    """Load all P5/P6 images matching a path or glob, sorted by path."""
    paths = sorted(globmod.glob(pattern)) if any(ch in pattern for ch in "*?[") else [pattern]
    paths = [p for p in paths if os.path.isfile(p)]
    if not paths:
        raise DataError(f"no images match {pattern!r}")
    return [ImageRecord(read_pnm(p), p) for p in paths]


def random_patches(records, size, rng):
    """Endless iterator of random (C, size, size) crops."""
    records = [r for r in records if r.pixels.shape[1] >= size and r.pixels.shape[2] >= size]
    if not records:
        raise DataError(f"no image is at least {size}x{size}")
    while True:
        r = records[rng.integers(len(records))]
        _, h, w = r.pixels.shape
        i = rng.integers(h - size + 1)
        j = rng.integers(w - size + 1)
        yield r.pixels[:, i:i + size, j:j + size]


def patch_batch(records, size, n, rng):
    it = random_patches(records, size, rng)
    return np.stack([next(it) for _ in range(n)])


# -- toy texture source ---------------------------------------------------------

def _truncated_dlogistic(support, weights, means, scales):
    """Normalized pmf on integer ``support`` of a discretized logistic mixture."""
    z = np.asarray(support, dtype=np.float64)[:, None]
    mass = expit((z + 0.5 - means) / scales) - expit((z - 0.5 - means) / scales)
    pmf = mass @ np.asarray(weights, dtype=np.float64)
    return pmf / pmf.sum()


def entropy_bits(pmf):
    p = pmf[pmf > 0]
    return float(-(p * np.log2(p)).sum())


@dataclass
class ToyTexture:
    """Blocky texture with an exactly computable entropy rate.

    Each 2x2 block has a base level drawn from a discretized logistic
    mixture; its top-left pixel is the base and the other three add
    independent discretized-logistic offsets.  Both pmfs are truncated so
    every pixel stays in [0, 255], which keeps the map from
    (base, offsets) to pixels injective; the entropy per pixel is therefore
    ``(H(base) + 3 H(offset)) / 4``.
    """

    channels: int = 1
    size: int = 16
    weights: tuple = (0.3, 0.5, 0.2)
    means: tuple = (64.0, 128.0, 192.0)
    scales: tuple = (8.0, 10.0, 6.0)
    offset_scale: float = 1.5
    offset_range: int = 24
    _pmfs: tuple = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.size % 2:
            raise ValueError("toy texture size must be even")
        r = self.offset_range
        if not 0 < r < 128:
            raise ValueError("offset_range must be in (0, 128)")
        w = np.asarray(self.weights, dtype=np.float64)
        self.base_support = np.arange(r, 256 - r)
        self.offset_support = np.arange(-r, r + 1)
        self.base_pmf = _truncated_dlogistic(self.base_support, w / w.sum(),
                                             np.asarray(self.means), np.asarray(self.scales))
        self.offset_pmf = _truncated_dlogistic(self.offset_support, [1.0], np.zeros(1),
                                               np.asarray([self.offset_scale]))

    def entropy_rate(self):
        """Bits per pixel, by direct summation over both pmfs."""
        return (entropy_bits(self.base_pmf) + 3 * entropy_bits(self.offset_pmf)) / 4

    def sample(self, n, rng):
        c, s = self.channels, self.size
        nb = (n, c, s // 2, s // 2)
        base = rng.choice(self.base_support, size=nb, p=self.base_pmf)
        off = rng.choice(self.offset_support, size=nb + (3,), p=self.offset_pmf)
        x = np.empty((n, c, s // 2, 2, s // 2, 2), dtype=np.int64)
        x[:, :, :, 0, :, 0] = base
        x[:, :, :, 0, :, 1] = base + off[..., 0]
        x[:, :, :, 1, :, 0] = base + off[..., 1]
        x[:, :, :, 1, :, 1] = base + off[..., 2]
        return x.reshape(n, c, s, s)

    def records(self, n, rng):
        return [ImageRecord(x, f"toy:{i}") for i, x in enumerate(self.sample(n, rng))]
