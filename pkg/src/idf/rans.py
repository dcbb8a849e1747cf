"""Streaming rANS with a 64-bit state and 32-bit renormalization words.

The per-symbol algebra is the textbook one::

    encode:  c' = (c // l) * m + (c % l) + b
    decode:  s  = t such that b_t <= c' % m < b_{t+1}
             c  = l * (c' // m) + (c' % m) - b

Between operations the state lives in [2**32, 2**64).  Stream layout: the
final encoder state as u64 little-endian, then u32 little-endian words in
the order the decoder consumes them (reverse of emission).
"""
from __future__ import annotations

import struct
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

STATE_LO = 1 << 32
STATE_HI = 1 << 64
WORD_MASK = (1 << 32) - 1


class CorruptStream(ValueError):
    """Truncated or inconsistent rANS stream."""


@dataclass(frozen=True)
class SymbolSpec:
    start: int
    freq: int
    precision: int

    def __post_init__(self):
        if self.freq < 1:
            raise ValueError("symbol frequency must be >= 1")
        if self.start < 0 or self.start + self.freq > (1 << self.precision):
            raise ValueError("symbol interval outside [0, m)")


def encode_step(c, start, freq, precision):
    """Pure rANS encoding map, no renormalization."""
    return (c // freq << precision) + c % freq + start


def decode_slot(c, precision):
    return c & ((1 << precision) - 1)


def decode_step(c, start, freq, precision):
    """Pure rANS decoding map: previous state from c' given the decoded symbol's interval."""
    return freq * (c >> precision) + (c & ((1 << precision) - 1)) - start


class RansEncoder:
    def __init__(self, state=STATE_LO):
        self.state = state
        self.words = []

    def encode(self, start, freq, precision):
        if freq < 1:
            raise ValueError("symbol frequency must be >= 1")
        x = self.state
        if x >= ((STATE_LO >> precision) << 32) * freq:
            self.words.append(x & WORD_MASK)
            x >>= 32
        self.state = (x // freq << precision) + x % freq + start

    def encode_symbol(self, spec):
        self.encode(spec.start, spec.freq, spec.precision)

    def to_bytes(self):
        words = self.words[::-1]
        return struct.pack(f"<Q{len(words)}I", self.state, *words)


class RansDecoder:
    def __init__(self, data):
        if len(data) < 8 or (len(data) - 8) % 4:
            raise CorruptStream(f"bad stream length {len(data)}")
        self.state = struct.unpack_from("<Q", data)[0]
        self.words = np.frombuffer(data, dtype="<u4", offset=8).tolist()
        self.pos = 0
        if self.state < STATE_LO:
            raise CorruptStream("initial state below the normalization interval")

    def peek(self, precision):
        return self.state & ((1 << precision) - 1)

    def pop(self, start, freq, precision):
        x = freq * (self.state >> precision) + (self.state & ((1 << precision) - 1)) - start
        if x < STATE_LO:
            if self.pos >= len(self.words):
                raise CorruptStream("stream exhausted")
            x = (x << 32) | self.words[self.pos]
            self.pos += 1
        self.state = x

    def decode(self, cum, precision):
        """Decode one symbol index given cumulative frequencies ``cum`` (len nb+1, cum[-1] = m)."""
        slot = self.peek(precision)
        s = bisect_right(cum, slot) - 1
        self.pop(cum[s], cum[s + 1] - cum[s], precision)
        return s

    def finish(self, initial=STATE_LO):
        """Check that the stream was consumed exactly."""
        if self.pos != len(self.words) or self.state != initial:
            raise CorruptStream("stream did not end in the initial state")


def encode_symbol(enc, spec):
    enc.encode_symbol(spec)
    return enc


def decode_symbol(dec, cum, precision):
    return dec.decode(cum, precision), dec


def encode_sequence(symbols, specs, initial=STATE_LO):
    """Encode ``symbols`` where ``specs[i]`` maps symbol i to (start, freq, precision).

    ``specs`` may be a sequence of :class:`SymbolSpec` already resolved for the
    symbols, or a callable ``specs(i, symbol) -> SymbolSpec``.
    """
    enc = RansEncoder(initial)
    n = len(symbols)
    for i in range(n - 1, -1, -1):
        spec = specs(i, symbols[i]) if callable(specs) else specs[i]
        enc.encode(spec.start, spec.freq, spec.precision)
    return enc.to_bytes()


def decode_sequence(data, n, tables, initial=STATE_LO):
    """Decode ``n`` symbols; ``tables(i, decoded_so_far) -> (cum, precision, offset)``.

    The returned symbol is ``offset + index`` into ``cum``.
    """
    dec = RansDecoder(data)
    out = []
    for i in range(n):
        cum, precision, offset = tables(i, out)
        out.append(offset + dec.decode(cum, precision))
    dec.finish(initial)
    return out


def shannon_bits(freqs, precision):
    """Ideal code length sum(-log2(l/m)) for the given frequencies."""
    f = np.asarray(freqs, dtype=np.float64)
    return float(np.sum(precision - np.log2(f)))
