"""Exact integer bijections: coupling, lower-triangular coupling, permutation,
squeeze and factor-out.

Layers act on batched integer arrays of shape (N, C, H, W).  Two entry
points exist per layer: ``forward``/``inverse`` on int64 arrays (exact, used
by evaluation and the coder) and ``forward_train`` on float tensors, which
uses :func:`round_ste` so gradients flow through the rounding.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .nn import DenseBlock
from .tensor import round_half_away

# Networks see x / SCALE and emit translations in units of 1 / SCALE.
SCALE = 256.0


def _as_int(x):
    x = np.asarray(x)
    if x.dtype.kind not in "iu":
        raise TypeError(f"expected an integer array, got {x.dtype}")
    return x.astype(np.int64, copy=False)


# beyond this a float64 translation no longer represents every integer
_MAX_SHIFT = 2.0 ** 52


def _round_int(t):
    if not np.all(np.abs(t) < _MAX_SHIFT):
        raise ValueError("coupling translation is non-finite or too large for exact rounding")
    return round_half_away(t).astype(np.int64)


def _check_channels(x, expected):
    if x.ndim != 4 or x.shape[1] != expected:
        raise ValueError(f"expected (N, {expected}, H, W) input, got {x.shape}")


class Coupling:
    """Additive integer coupling: z_a = x_a, z_b = x_b + round(t(x_a))."""

    def __init__(self, num_channels, split=0.75, depth=4, channels=64, growth=None, rng=None,
                 name="coupling"):
        self.num_channels = num_channels
        self.ca = int(math.ceil(split * num_channels))
        if not 0 < self.ca < num_channels:
            raise ValueError(f"cannot split {num_channels} channels at {split}")
        self.cb = num_channels - self.ca
        self.net = DenseBlock(self.ca, self._net_out(), depth, channels, growth, rng, name)

    def _net_out(self):
        return self.cb

    def parameters(self):
        return self.net.parameters()

    def translation(self, xa):
        """Real-valued translation t(x_a) on the integer grid (float64, no tape)."""
        with T.no_grad():
            out = self.net(T.Tensor(xa.astype(np.float64) / SCALE)).data
        return out * SCALE

    def forward(self, x):
        x = _as_int(x)
        _check_channels(x, self.num_channels)
        xa, xb = x[:, :self.ca], x[:, self.ca:]
        return np.concatenate([xa, xb + _round_int(self.translation(xa))], axis=1)

    def inverse(self, z):
        z = _as_int(z)
        _check_channels(z, self.num_channels)
        za, zb = z[:, :self.ca], z[:, self.ca:]
        return np.concatenate([za, zb - _round_int(self.translation(za))], axis=1)

    def forward_train(self, x):
        xa = T.channels(x, 0, self.ca)
        xb = T.channels(x, self.ca, self.num_channels)
        t = self.net(xa * (1.0 / SCALE)) * SCALE
        return T.concat([xa, xb + T.round_ste(t)], axis=1)


class LowerTriangularCoupling(Coupling):
    """Coupling with a per-pixel strictly lower-triangular mixing of x_b.

    z_b = x_b + round(t(x_a) + L(x_a) x_b), rounding applied once to the sum.
    The network emits ``cb`` translation channels followed by the
    ``cb * (cb - 1) / 2`` below-diagonal entries of L in row-major order.
    """

    def _net_out(self):
        return self.cb + self.cb * (self.cb - 1) // 2

    def _tril_index(self):
        return [(i, j) for i in range(self.cb) for j in range(i)]

    def matrices(self, xa):
        """Translation (N, cb, H, W) and L as (N, H, W, cb, cb), float64."""
        with T.no_grad():
            out = self.net(T.Tensor(xa.astype(np.float64) / SCALE)).data
        t = out[:, :self.cb] * SCALE
        n, _, h, w = xa.shape
        lmat = np.zeros((n, h, w, self.cb, self.cb))
        for k, (i, j) in enumerate(self._tril_index()):
            lmat[..., i, j] = out[:, self.cb + k]
        return t, lmat

    def forward(self, x):
        x = _as_int(x)
        _check_channels(x, self.num_channels)
        xa, xb = x[:, :self.ca], x[:, self.ca:]
        t, lmat = self.matrices(xa)
        assert not np.any(np.triu(lmat)), "L must be strictly lower triangular"
        return np.concatenate([xa, xb + _round_int(self._shift(t, lmat, xb))], axis=1)

    @staticmethod
    def _shift(t, lmat, xb, upto=None):
        # same accumulation order as the inverse, so both round identical floats
        rows = range(t.shape[1]) if upto is None else [upto]
        out = []
        for i in rows:
            acc = t[:, i].copy()
            for j in range(i):
                acc += lmat[..., i, j] * xb[:, j]
            out.append(acc)
        return np.stack(out, axis=1) if upto is None else out[0]

    def inverse(self, z):
        z = _as_int(z)
        _check_channels(z, self.num_channels)
        za, zb = z[:, :self.ca], z[:, self.ca:]
        t, lmat = self.matrices(za)
        xb = np.empty_like(zb)
        # forward substitution, one channel at a time, spatially parallel
        for i in range(self.cb):
            xb[:, i] = zb[:, i] - _round_int(self._shift(t, lmat, xb, upto=i))
        return np.concatenate([za, xb], axis=1)

    def forward_train(self, x):
        xa = T.channels(x, 0, self.ca)
        xb = T.channels(x, self.ca, self.num_channels)
        out = self.net(xa * (1.0 / SCALE))
        rows = []
        k = self.cb
        for i in range(self.cb):
            acc = T.channels(out, i, i + 1) * SCALE
            for j in range(i):
                acc = acc + T.channels(out, k, k + 1) * T.channels(xb, j, j + 1)
                k += 1
            rows.append(acc)
        shift = rows[0] if self.cb == 1 else T.concat(rows, axis=1)
        return T.concat([xa, xb + T.round_ste(shift)], axis=1)


class Permutation:
    """Fixed channel permutation drawn once from a seeded generator."""

    def __init__(self, num_channels=None, rng=None, perm=None):
        if perm is None:
            perm = rng.permutation(num_channels) if rng is not None else np.arange(num_channels)
        perm = np.asarray(perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(len(perm))):
            raise ValueError("not a permutation")
        self.perm = perm
        self.inv = np.argsort(perm)

    def __len__(self):
        return len(self.perm)

    def parameters(self):
        return []

    def _check(self, x):
        if x.shape[1] != len(self.perm):
            raise ValueError(f"permutation of {len(self.perm)} channels applied to {x.shape[1]}")

    def forward(self, x):
        self._check(x)
        return x[:, self.perm]

    def inverse(self, z):
        self._check(z)
        return z[:, self.inv]

    def forward_train(self, x):
        self._check(x)
        return T.take(x, (slice(None), self.perm))


def permute(x, p, inverse=False):
    return p.inverse(x) if inverse else p.forward(x)


def squeeze(x):
    """(N, C, H, W) -> (N, 4C, H/2, W/2).

    Output channel ``4c + 2dy + dx`` holds input channel ``c`` at offset
    (dy, dx) inside each 2x2 block, i.e. each channel's block is laid out in
    raster order.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"squeeze needs even spatial extents, got {h}x{w}")
    y = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 5, 2, 4)
    return y.reshape(n, 4 * c, h // 2, w // 2)


def unsqueeze(x):
    n, c, h, w = x.shape
    if c % 4:
        raise ValueError(f"unsqueeze needs a multiple of 4 channels, got {c}")
    y = x.reshape(n, c // 4, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3)
    return y.reshape(n, c // 4, 2 * h, 2 * w)


def squeeze_train(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"squeeze needs even spatial extents, got {h}x{w}")
    y = T.reshape(x, (n, c, h // 2, 2, w // 2, 2))
    y = T.transpose(y, (0, 1, 3, 5, 2, 4))
    return T.reshape(y, (n, 4 * c, h // 2, w // 2))


def factor_split(y, ratio=0.5):
    """Split channels into (emitted, retained); the emitted part comes first."""
    c = y.shape[1]
    k = c * ratio
    if k != int(k) or not 0 < k < c:
        raise ValueError(f"cannot factor {c} channels at ratio {ratio}")
    k = int(k)
    if isinstance(y, T.Tensor):
        return T.channels(y, 0, k), T.channels(y, k, c)
    return y[:, :k], y[:, k:]


def factor_merge(z, y):
    return np.concatenate([z, y], axis=1)
