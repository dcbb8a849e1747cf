"""Discretized logistic priors and their quantization for the entropy coder.

All coder-facing evaluation happens in float64 with a fixed operation
order, so the encoder and decoder derive bitwise-identical frequency tables
from identical inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_softmax, logsumexp

from . import tensor as T
from .nn import DenseBlock
from .tensor import round_half_away

S_MIN = 1e-3
W_MIN = 16
K_TAIL = 16
LATENT_BOUND = 2 ** 20

# network outputs live in units of 1/256, see flows.SCALE
SCALE = 256.0
S0_COND = 16.0  # initial conditional scale


@dataclass
class DLogisticParams:
    mu: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.s = np.asarray(self.s, dtype=np.float64)

    def ravel(self):
        return DLogisticParams(self.mu.reshape(-1), self.s.reshape(-1))


@dataclass
class MixtureParams:
    """K-component mixture; the component axis is axis 0 of every field."""

    logpi: np.ndarray
    mu: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.logpi = np.asarray(self.logpi, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.s = np.asarray(self.s, dtype=np.float64)
        if self.logpi.shape[0] < 1:
            raise ValueError("mixture needs at least one component")

    @classmethod
    def from_logits(cls, logits, mu, s):
        return cls(log_softmax(np.asarray(logits, dtype=np.float64), axis=0), mu, s)

    @classmethod
    def from_weights(cls, pi, mu, s):
        return cls(np.log(np.asarray(pi, dtype=np.float64)), mu, s)

    @property
    def pi(self):
        return np.exp(self.logpi)

    @property
    def k(self):
        return self.logpi.shape[0]

    def ravel(self):
        k = self.k
        return MixtureParams(self.logpi.reshape(k, -1), self.mu.reshape(k, -1),
                             self.s.reshape(k, -1))


def dlogistic_logpmf(z, p):
    """log DLogistic(z | mu, s) = log(sig((z+1/2-mu)/s) - sig((z-1/2-mu)/s))."""
    return T.dlogistic_logpmf_arrays(np.asarray(z, dtype=np.float64), p.mu, p.s)


def mixture_logpmf(z, p):
    z = np.asarray(z, dtype=np.float64)
    comp = p.logpi + T.dlogistic_logpmf_arrays(z[None], p.mu, p.s)
    if p.k == 1:
        return comp[0]
    return logsumexp(comp, axis=0)


def logpmf(z, p):
    return mixture_logpmf(z, p) if isinstance(p, MixtureParams) else dlogistic_logpmf(z, p)


def _softplus(x):
    return np.logaddexp(0.0, x)


class Conditioner:
    """Predicts (mu, s) for the factored-out latent from the retained half."""

    def __init__(self, in_channels, out_channels, depth=4, channels=64, growth=None, rng=None,
                 name="cond"):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.net = DenseBlock(in_channels, 2 * out_channels, depth, channels, growth, rng, name)
        # start centred on mid-grey with a broad scale instead of (0, 0.69)
        bias = self.net.project.bias.value
        bias[:out_channels] = 0.5
        bias[out_channels:] = np.log(np.expm1(S0_COND)) / SCALE

    def parameters(self):
        return self.net.parameters()

    def params(self, y):
        """Coder-facing (float64) parameters for integer input y of shape (N, C, H, W)."""
        y = np.asarray(y)
        if y.ndim != 4 or y.shape[1] != self.in_channels:
            raise ValueError(f"conditioner expects (N, {self.in_channels}, H, W), got {y.shape}")
        with T.no_grad():
            out = self.net(T.Tensor(y.astype(np.float64) / SCALE)).data
        c = self.out_channels
        return DLogisticParams(out[:, :c] * SCALE, _softplus(out[:, c:] * SCALE) + S_MIN)

    def params_train(self, y):
        out = self.net(y * (1.0 / SCALE))
        c = self.out_channels
        mu = T.channels(out, 0, c) * SCALE
        s = T.softplus(T.channels(out, c, 2 * c) * SCALE) + S_MIN
        return mu, s


class TopPrior:
    """Per-dimension K-component mixture on the last latent.

    Stored as a (3, K, C, H, W) parameter: logits, location and scale
    pre-activations.  Component locations start spread over [0, 256) so the
    components can separate.
    """

    def __init__(self, shape, k=5):
        self.k = k
        self.shape = tuple(shape)
        raw = np.zeros((3, k) + self.shape)
        raw[1] = ((np.arange(k) + 0.5) / k).reshape((k,) + (1,) * len(self.shape))
        s0 = SCALE / (2 * k)
        raw[2] = np.log(np.expm1(s0)) / SCALE
        self.raw = T.Parameter(raw, "top.raw")

    def parameters(self):
        return [self.raw]

    def params(self):
        r = self.raw.value
        return MixtureParams.from_logits(r[0], r[1] * SCALE, _softplus(r[2] * SCALE) + S_MIN)

    def logpmf_train(self, z):
        """Per-dimension log-likelihood of a batch z (N, C, H, W) as a tensor."""
        r = self.raw.tensor(z.dtype)
        logpi = T.log_softmax(r[0], axis=0)
        mu = r[1] * SCALE
        s = T.softplus(r[2] * SCALE) + S_MIN
        zz = T.reshape(z, (z.shape[0], 1) + z.shape[1:])
        comp = T.dlogistic_logpmf(zz, mu, s) + logpi
        return T.reshape(T.logsumexp(comp, axis=1), z.shape)


# -- sampling ---------------------------------------------------------------

def sample(p, rng, size=None):
    """Draw integers from a DLogistic or mixture by inverse-CDF of the continuous logistic."""
    if isinstance(p, MixtureParams):
        shape = p.mu.shape[1:]
        u = rng.random(shape)
        cdf = np.cumsum(p.pi, axis=0)
        k = np.minimum((u[None] > cdf).sum(axis=0), p.k - 1)
        mu = np.take_along_axis(p.mu, k[None], 0)[0]
        s = np.take_along_axis(p.s, k[None], 0)[0]
    else:
        mu, s = p.mu, p.s
        shape = np.broadcast_shapes(np.shape(mu), np.shape(s)) if size is None else size
    u = rng.random(shape)
    u = np.clip(u, 1e-300, 1 - 1e-16)
    x = mu + s * (np.log(u) - np.log1p(-u))
    return np.floor(x + 0.5).astype(np.int64)


# -- quantization -----------------------------------------------------------

@dataclass
class QuantizedPmf:
    """Integer frequencies over the window [lo, lo + len(freq)) summing to 2**precision."""

    lo: int
    freq: np.ndarray
    precision: int

    @property
    def hi(self):
        return self.lo + len(self.freq) - 1

    @property
    def m(self):
        return 1 << self.precision

    @property
    def cum(self):
        return np.concatenate([[0], np.cumsum(self.freq)])

    def spec(self, z):
        """(start, freq) of symbol z."""
        i = z - self.lo
        if not 0 <= i < len(self.freq):
            raise ValueError(f"symbol {z} outside window [{self.lo}, {self.hi}]")
        cum = self.cum
        return int(cum[i]), int(self.freq[i])


class PmfTable:
    """Quantized pmfs for a flat sequence of symbols (one row per symbol).

    Rows are padded to a common width with zero-frequency bins after the
    window; ``cum`` is padded with ``m``.
    """

    def __init__(self, lo, width, freq, precision):
        self.lo = lo
        self.width = width
        self.freq = freq
        self.precision = precision
        self.cum = np.zeros((freq.shape[0], freq.shape[1] + 1), dtype=np.int64)
        np.cumsum(freq, axis=1, out=self.cum[:, 1:])

    def __len__(self):
        return len(self.lo)

    def row(self, i):
        return QuantizedPmf(int(self.lo[i]), self.freq[i, :self.width[i]].copy(), self.precision)

    def in_window(self, z):
        off = np.asarray(z, dtype=np.int64) - self.lo
        return (off >= 0) & (off < self.width)

    def lookup(self, z):
        """Vectorized (start, freq) for symbols z; all must be in their windows."""
        off = np.asarray(z, dtype=np.int64) - self.lo
        if not np.all((off >= 0) & (off < self.width)):
            raise ValueError("symbol outside its pmf window")
        idx = np.arange(len(off))
        return self.cum[idx, off], self.freq[idx, off]

    def symbol(self, i, slot):
        return int(self.lo[i]) + slot


def tail_multiple(precision, k_tail=K_TAIL):
    """Window reach in logistic scales: k_tail, capped at ln(2**precision).

    Beyond ln(m) scales every bin's logistic mass is below 1/m, yet each
    bin still costs one count, so wider windows only leak probability.
    """
    return min(float(k_tail), precision * np.log(2.0))


def _centers_and_halfwidths(p, w_min, k_tail, precision):
    """Window centre and half-width per row.

    For a mixture the half-width also covers every component's own
    interval, so separated modes never fall outside.
    """
    k = tail_multiple(precision, k_tail)
    if isinstance(p, MixtureParams):
        center = round_half_away(np.sum(p.pi * p.mu, axis=0))
        reach = np.max(np.abs(p.mu - center) + k * p.s, axis=0)
        half = np.maximum(w_min, np.ceil(np.minimum(reach, 2.0 * LATENT_BOUND)))
    else:
        center = round_half_away(p.mu)
        half = window_halfwidth(p.s, w_min, k)
    center = np.clip(np.atleast_1d(center), -4.0 * LATENT_BOUND, 4.0 * LATENT_BOUND)
    return center.astype(np.int64), np.atleast_1d(half).astype(np.int64)


def _cdf(edges, p):
    """CDF at edges (rows, nb-1) for flat params p (rows,) or (K, rows)."""
    if isinstance(p, MixtureParams):
        pi = p.pi
        acc = np.zeros_like(edges)
        for k in range(p.k):
            acc += pi[k][:, None] * expit((edges - p.mu[k][:, None]) / p.s[k][:, None])
        return acc
    return expit((edges - p.mu[:, None]) / p.s[:, None])


def _take_rows(p, rows):
    if isinstance(p, MixtureParams):
        return MixtureParams(p.logpi[:, rows], p.mu[:, rows], p.s[:, rows])
    return DLogisticParams(p.mu[rows], p.s[rows])


def _apportion(prob, m):
    """Largest-remainder apportionment of m over rows of prob, every bin >= 1."""
    rows, nb = prob.shape
    free = m - nb
    target = prob * free
    base = np.floor(target)
    rem = target - base
    freq = base.astype(np.int64) + 1
    short = free - (freq.sum(axis=1) - nb)
    order = np.argsort(-rem, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(nb)[None].repeat(rows, 0), axis=1)
    freq += (rank < short[:, None]).astype(np.int64)
    over = freq.sum(axis=1) - m
    for r in np.nonzero(over > 0)[0]:
        # only reachable through float round-off; take from the largest bins
        for j in np.argsort(-freq[r], kind="stable")[:over[r]]:
            freq[r, j] -= 1
    return freq


def window_halfwidth(smax, w_min=W_MIN, k_tail=K_TAIL):
    reach = np.minimum(k_tail * np.asarray(smax, dtype=np.float64), 2.0 * LATENT_BOUND)
    return np.maximum(w_min, np.ceil(reach).astype(np.int64))


def quantize_pmf(p, precision=16, w_min=W_MIN, k_tail=K_TAIL):
    """Quantize per-symbol priors into integer frequency tables.

    ``p`` holds parameters of any shape; the result has one row per element
    in C order.  The window is centred on the rounded mean with half-width
    max(w_min, ceil(k * s)), k = min(k_tail, ln 2**precision); for
    mixtures it is widened to reach every component.  The two edge bins
    hold the tail mass beyond them (the codec sends the exact overshoot).
    """
    if not 8 <= precision <= 24:
        raise ValueError("precision must be in [8, 24]")
    p = p.ravel()
    if not (np.all(np.isfinite(p.mu)) and np.all(np.isfinite(p.s))):
        raise ValueError("non-finite prior parameters")
    center, half = _centers_and_halfwidths(p, w_min, k_tail, precision)
    if np.any(np.abs(center) + half > LATENT_BOUND):
        raise ValueError("pmf window exceeds the latent bound (pathological scale)")
    m = 1 << precision
    width = 2 * half + 1
    if np.any(width > m):
        raise ValueError("pmf window wider than the frequency denominator")
    n = len(center)
    lo = center - half
    freq = np.zeros((n, int(width.max()) if n else 1), dtype=np.int64)
    for h in np.unique(half):
        rows = np.nonzero(half == h)[0]
        nb = 2 * int(h) + 1
        edges = lo[rows][:, None] + np.arange(nb - 1)[None] + 0.5
        cdf = _cdf(edges, _take_rows(p, rows))
        bounds = np.concatenate([np.zeros((len(rows), 1)), cdf, np.ones((len(rows), 1))], axis=1)
        prob = np.clip(np.diff(bounds, axis=1), 0.0, 1.0)
        freq[rows, :nb] = _apportion(prob, m)
    return PmfTable(lo, width, freq, precision)


def quantize_single(p, precision=16, w_min=W_MIN, k_tail=K_TAIL):
    """Quantize one scalar parameter set into a :class:`QuantizedPmf`."""
    return quantize_pmf(p, precision, w_min, k_tail).row(0)
