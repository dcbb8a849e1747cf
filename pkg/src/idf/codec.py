"""Lossless image container: flow latents entropy-coded with rANS, one substream per level.

Container layout (little-endian)::

    "IDFC" | u8 version | 32-byte model hash | u16 C, H, W | u8 flags
    flags bit0 = escape, bits 1-5 = pmf precision
    escape:  C*H*W raw bytes
    else:    u8 L | L x u32 substream lengths | substreams, z_L first

Symbols inside a level are pushed in reverse raster order so the decoder
pops them in raster order.  The two edge bins of every pmf window mean
"at or beyond" the edge and are followed by the exact overshoot, coded as
a 6-bit length and raw low bits, so no latent value is unrepresentable.
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .priors import DLogisticParams, MixtureParams, quantize_pmf, sample
from .rans import CorruptStream, RansDecoder, RansEncoder

MAGIC = b"IDFC"
VERSION = 1
_HEAD = struct.Struct("<4sB32sHHHB")
DEFAULT_PRECISION = 16


class CodecError(ValueError):
    pass


class HashMismatch(CodecError):
    pass


class CorruptContainer(CodecError):
    pass


@dataclass
class CompressedImage:
    model_hash: bytes
    shape: tuple
    escape: bool
    precision: int = DEFAULT_PRECISION
    substreams: list = field(default_factory=list)
    raw: bytes = b""
    version: int = VERSION

    @property
    def framing_bytes(self):
        n = _HEAD.size
        return n if self.escape else n + 1 + 4 * len(self.substreams)

    @property
    def header_bits(self):
        """Content-independent overhead: framing plus each substream's 8-byte state flush."""
        return 8 * self.framing_bytes + (0 if self.escape else 64 * len(self.substreams))

    def to_bytes(self):
        c, h, w = self.shape
        flags = int(self.escape) | (self.precision << 1)
        out = [_HEAD.pack(MAGIC, self.version, self.model_hash, c, h, w, flags)]
        if self.escape:
            out.append(self.raw)
        else:
            out.append(struct.pack(f"<B{len(self.substreams)}I", len(self.substreams),
                                   *[len(s) for s in self.substreams]))
            out.extend(self.substreams)
        return b"".join(out)

    def __len__(self):
        return len(self.to_bytes())

    @classmethod
    def from_bytes(cls, data, allow_partial=False):
        """Parse a container.  With ``allow_partial`` a prefix is accepted and only
        the substreams fully present are returned."""
        data = bytes(data)
        if len(data) < _HEAD.size:
            raise CorruptContainer("truncated header")
        magic, version, mhash, c, h, w, flags = _HEAD.unpack_from(data)
        if magic != MAGIC:
            raise CorruptContainer("not an IDFC container")
        if version != VERSION:
            raise CorruptContainer(f"unsupported container version {version}")
        escape = bool(flags & 1)
        precision = (flags >> 1) & 0x1F
        off = _HEAD.size
        if escape:
            raw = data[off:]
            if len(raw) != c * h * w:
                raise CorruptContainer("raw payload length mismatch")
            return cls(mhash, (c, h, w), True, precision, raw=raw, version=version)
        if len(data) < off + 1:
            raise CorruptContainer("truncated level table")
        n = data[off]
        off += 1
        if len(data) < off + 4 * n:
            raise CorruptContainer("truncated level table")
        lengths = struct.unpack_from(f"<{n}I", data, off)
        off += 4 * n
        streams = []
        for length in lengths:
            if off + length > len(data):
                if allow_partial:
                    break
                raise CorruptContainer("truncated substream")
            streams.append(data[off:off + length])
            off += length
        if off != len(data) and not allow_partial:
            raise CorruptContainer("trailing bytes after substreams")
        img = cls(mhash, (c, h, w), False, precision, streams, version=version)
        img.level_lengths = list(lengths)
        return img


@dataclass
class CodecStats:
    images: int = 0
    coded_bits: int = 0
    header_bits: int = 0
    dims: int = 0
    nll_bits: float = 0.0
    escapes: int = 0

    @property
    def bpd(self):
        return self.coded_bits / self.dims if self.dims else float("nan")

    @property
    def payload_bpd(self):
        return (self.coded_bits - self.header_bits) / self.dims if self.dims else float("nan")

    @property
    def nll_bpd(self):
        return self.nll_bits / self.dims if self.dims else float("nan")

    @property
    def rate(self):
        return 8.0 / self.bpd

    def add(self, other):
        for name in ("images", "coded_bits", "header_bits", "dims", "nll_bits", "escapes"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self

    def record(self):
        return {
            "images": self.images,
            "dims": self.dims,
            "coded_bits": self.coded_bits,
            "header_bits": self.header_bits,
            "escapes": self.escapes,
            "bpd": self.bpd,
            "bpd_without_header": self.payload_bpd,
            "nll_bpd": self.nll_bpd,
            "rate": self.rate,
        }


def _check_image(x, model):
    x = np.asarray(x)
    if x.dtype.kind not in "iu":
        raise TypeError(f"expected integer pixels, got {x.dtype}")
    if tuple(x.shape) != model.config.in_shape:
        raise ValueError(f"image shape {x.shape} does not match model {model.config.in_shape}")
    if x.size and (x.min() < 0 or x.max() > 255):
        raise ValueError("pixel values must lie in [0, 255]")
    return x.astype(np.int64)


EXCESS_LEN_BITS = 6  # uniform code for the overshoot's bit length
MAX_EXCESS_BITS = 40
CHUNK = 16


def _push_excess(enc, e):
    """Push overshoot e >= 0 so the decoder pops its bit length, then the low bits."""
    n = e.bit_length()
    if n > 1:
        low = e - (1 << (n - 1))
        nb = n - 1
        chunks = []
        while nb > 0:
            w = min(CHUNK, nb)
            chunks.append((low & ((1 << w) - 1), w))
            low >>= w
            nb -= w
        for v, w in reversed(chunks):
            enc.encode(v, 1, w)
    enc.encode(n, 1, EXCESS_LEN_BITS)


def _pop_excess(dec):
    n = dec.peek(EXCESS_LEN_BITS)
    dec.pop(n, 1, EXCESS_LEN_BITS)
    if n <= 1:
        return n
    if n > MAX_EXCESS_BITS:
        raise CorruptStream("overshoot length out of range")
    low, shift, nb = 0, 0, n - 1
    while nb > 0:
        w = min(CHUNK, nb)
        v = dec.peek(w)
        dec.pop(v, 1, w)
        low |= v << shift
        shift += w
        nb -= w
    return (1 << (n - 1)) + low


def _encode_level(z, p, precision):
    """rANS substream for one level, or None if the image has to escape.

    The first and last window bins stand for "at or below" and "at or
    above" the window edges; a symbol in one of them is followed by its
    exact overshoot.
    """
    try:
        table = quantize_pmf(p, precision)
    except ValueError:
        return None  # pathological prior; the image escapes
    zf = z.reshape(-1)
    off = zf - table.lo
    last = table.width - 1
    idx = np.clip(off, 0, last)
    excess = np.where(off <= 0, -off, off - last)
    edge = (idx == 0) | (idx == last)
    if np.any(excess[edge] >= 1 << MAX_EXCESS_BITS):
        return None
    rows = np.arange(len(zf))
    start = table.cum[rows, idx].tolist()
    freq = table.freq[rows, idx].tolist()
    edge, excess = edge.tolist(), excess.tolist()
    enc = RansEncoder()
    for i in range(len(zf) - 1, -1, -1):
        if edge[i]:
            _push_excess(enc, excess[i])
        enc.encode(start[i], freq[i], precision)
    return enc.to_bytes()


def _decode_level(stream, p, shape, precision):
    table = quantize_pmf(p, precision)
    dec = RansDecoder(stream)
    out = np.empty(len(table), dtype=np.int64)
    cum, width, lo = table.cum, table.width.tolist(), table.lo.tolist()
    for i in range(len(out)):
        k = dec.decode(cum[i, :width[i] + 1].tolist(), precision)
        if k == 0:
            out[i] = lo[i] - _pop_excess(dec)
        elif k == width[i] - 1:
            out[i] = lo[i] + k + _pop_excess(dec)
        else:
            out[i] = lo[i] + k
    dec.finish()
    return out.reshape(shape)


def _first(p):
    """Strip the batch axis of size one from prior parameters."""
    if isinstance(p, MixtureParams):
        return p
    return DLogisticParams(p.mu[0], p.s[0])


def compress_with_stats(x, model, precision=DEFAULT_PRECISION, model_hash=None, allow_escape=True):
    """Encode ``x`` and return ``(CompressedImage, CodecStats)``.

    With ``allow_escape=False`` the image is coded even when raw storage would
    be smaller; it still escapes if the prior cannot be quantized.
    """
    if not 8 <= precision <= 24:
        raise CodecError(f"pmf precision must be in [8, 24], got {precision}")
    x = _check_image(x, model)
    mhash = model.hash() if model_hash is None else model_hash
    if len(mhash) != 32:
        raise CodecError("model hash must be 32 bytes")
    levels, ll = model.analyze(x[None])
    streams = []
    escape = False
    for z, p in reversed(levels):
        s = _encode_level(z[0], _first(p), precision)
        if s is None:
            escape = True
            break
        streams.append(s)
    img = CompressedImage(mhash, x.shape, escape, precision, [] if escape else streams)
    raw_size = _HEAD.size + x.size
    if allow_escape and not escape and len(img) >= raw_size:
        escape = True
    if escape:
        img = CompressedImage(mhash, x.shape, True, precision, raw=x.astype(np.uint8).tobytes())
    stats = CodecStats(images=1, coded_bits=8 * len(img), header_bits=img.header_bits,
                       dims=x.size, nll_bits=float(-ll[0]), escapes=int(escape))
    return img, stats


def compress(x, model, precision=DEFAULT_PRECISION, allow_escape=True):
    """Losslessly encode one (C, H, W) image in [0, 255] under ``model``."""
    return compress_with_stats(x, model, precision, allow_escape=allow_escape)[0]


def _parse(c, model, allow_partial=False, model_hash=None):
    if not isinstance(c, CompressedImage):
        c = CompressedImage.from_bytes(c, allow_partial=allow_partial)
    if c.model_hash != (model.hash() if model_hash is None else model_hash):
        raise HashMismatch("container was produced with a different model")
    if tuple(c.shape) != model.config.in_shape:
        raise CorruptContainer(f"container shape {c.shape} does not match model")
    if not c.escape and len(getattr(c, "level_lengths", c.substreams)) != len(model.levels):
        raise CorruptContainer("level count does not match model")
    if not c.escape and not 8 <= c.precision <= 24:
        raise CorruptContainer(f"bad pmf precision {c.precision}")
    return c


def _raw(c):
    return np.frombuffer(c.raw, dtype=np.uint8).astype(np.int64).reshape(c.shape)


def _decode(c, model, k, rng):
    """Decode the first ``k`` substreams (z_L first) exactly, sample the rest."""
    nlev = len(model.levels)
    shapes = model.latent_shapes
    try:
        if k >= 1:
            top = _decode_level(c.substreams[0], model.top_prior(), shapes[-1], c.precision)
        else:
            top = sample(model.top_prior(), rng)

        def provide(i, y):
            p = _first(model.conditional(i, y))
            j = nlev - 1 - i  # substream index of level i
            if j < k:
                return _decode_level(c.substreams[j], p, shapes[i], c.precision)[None]
            return sample(p, rng)[None]

        x = model.decode_levels(top[None], provide)
    except CorruptStream as e:
        raise CorruptContainer(str(e)) from e
    return x[0]


def decompress(c, model, model_hash=None):
    """Exact inverse of :func:`compress`; raises on hash mismatch or corruption."""
    c = _parse(c, model, model_hash=model_hash)
    if c.escape:
        return _raw(c)
    return _decode(c, model, len(model.levels), None)


def progressive_decode(c, model, levels=None, rng=None):
    """Render from the first ``levels`` substreams (default: all fully present).

    Missing levels are drawn from their conditional priors by ancestral
    sampling.  Values are not clipped.
    """
    c = _parse(c, model, allow_partial=True)
    if c.escape:
        return _raw(c)
    k = len(c.substreams) if levels is None else levels
    if not 0 <= k <= len(c.substreams):
        raise ValueError(f"only {len(c.substreams)} level substreams available, asked for {k}")
    if k < len(model.levels) and rng is None:
        raise ValueError("an rng is needed to sample missing levels")
    return _decode(c, model, k, rng)


def levels_for_fraction(c, fraction):
    """Number of whole substreams inside the first ``fraction`` of the container bytes."""
    if isinstance(c, (bytes, bytearray)):
        c = CompressedImage.from_bytes(c)
    if c.escape:
        return 0
    budget = fraction * len(c)
    used = c.framing_bytes
    k = 0
    for s in c.substreams:
        used += len(s)
        if used > budget + 1e-9:
            break
        k += 1
    return k


def compress_batch(images, model, parallelism=1, precision=DEFAULT_PRECISION):
    """Compress images independently; output bytes do not depend on ``parallelism``."""
    mhash = model.hash()

    def one(item):
        i, x = item
        try:
            return compress_with_stats(x, model, precision, mhash)
        except Exception as e:
            raise CodecError(f"image {i}: {e}") from e

    items = list(enumerate(images))
    if parallelism > 1:
        with ThreadPoolExecutor(parallelism) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(it) for it in items]
    stats = CodecStats()
    for _, s in results:
        stats.add(s)
    return [r for r, _ in results], stats
