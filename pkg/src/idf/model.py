"""Integer discrete flow: levels of squeeze, D x (permutation, coupling), factor-out."""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import flows
from . import tensor as T
from .flows import Coupling, LowerTriangularCoupling, Permutation
from .priors import Conditioner, DLogisticParams, MixtureParams, TopPrior, logpmf
from .priors import sample as sample_prior

MAGIC = b"IDFM"
VERSION = 1
LN2 = np.log(2.0)


class ModelFileError(ValueError):
    """Corrupt, truncated or incompatible model file."""


@dataclass
class ModelConfig:
    in_shape: tuple = (1, 16, 16)
    levels: int = 2
    depth: int = 4
    net_depth: int = 4
    net_channels: int = 64
    net_growth: int | None = None
    k_mix: int = 5
    ltc: bool = False
    split: float = 0.75
    seed: int = 0

    def __post_init__(self):
        self.in_shape = tuple(int(v) for v in self.in_shape)
        if len(self.in_shape) != 3:
            raise ValueError("in_shape must be (C, H, W)")
        _, h, w = self.in_shape
        if self.levels < 1 or self.depth < 1:
            raise ValueError("need at least one level and one flow per level")
        if h % (1 << self.levels) or w % (1 << self.levels):
            raise ValueError(f"spatial extents {h}x{w} not divisible by 2^{self.levels}")


@dataclass
class LatentStack:
    """Latents [z_1, ..., z_L]; each batched (N, C, H, W) or single (C, H, W)."""

    z: list = field(default_factory=list)

    def __len__(self):
        return len(self.z)

    def __getitem__(self, i):
        return self.z[i]

    @property
    def shapes(self):
        return [tuple(z.shape) for z in self.z]

    def size(self):
        return sum(int(np.prod(z.shape)) for z in self.z)


class Level:
    def __init__(self, channels, spatial, cfg, index, last, rng):
        c = 4 * channels
        self.channels = c
        self.spatial = spatial
        self.last = last
        kind = LowerTriangularCoupling if cfg.ltc else Coupling
        self.steps = []
        for d in range(cfg.depth):
            perm = Permutation(c, rng)
            coup = kind(c, cfg.split, cfg.net_depth, cfg.net_channels, cfg.net_growth, rng,
                        name=f"level{index}.flow{d}")
            self.steps.append((perm, coup))
        self.z_channels = c if last else c // 2
        self.cond = None
        if not last:
            self.cond = Conditioner(c - self.z_channels, self.z_channels, cfg.net_depth,
                                    cfg.net_channels, cfg.net_growth, rng, name=f"level{index}.cond")

    def parameters(self):
        ps = []
        for _, coup in self.steps:
            ps += coup.parameters()
        if self.cond is not None:
            ps += self.cond.parameters()
        return ps

    def forward(self, y):
        h = flows.squeeze(y)
        for perm, coup in self.steps:
            h = coup.forward(perm.forward(h))
        if self.last:
            return h, None
        return flows.factor_split(h)

    def inverse(self, z, y):
        h = z if self.last else flows.factor_merge(z, y)
        for perm, coup in reversed(self.steps):
            h = perm.inverse(coup.inverse(h))
        return flows.unsqueeze(h)

    def forward_train(self, y):
        h = flows.squeeze_train(y)
        for perm, coup in self.steps:
            h = coup.forward_train(perm.forward_train(h))
        if self.last:
            return h, None
        return flows.factor_split(h)


class IDFModel:
    def __init__(self, config=None, **kwargs):
        cfg = config if config is not None else ModelConfig(**kwargs)
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        c, h, w = cfg.in_shape
        self.levels = []
        self.latent_shapes = []
        for i in range(cfg.levels):
            last = i == cfg.levels - 1
            h, w = h // 2, w // 2
            level = Level(c, (h, w), cfg, i, last, rng)
            self.levels.append(level)
            self.latent_shapes.append((level.z_channels, h, w))
            c = level.channels - level.z_channels
        self.top = TopPrior(self.latent_shapes[-1], cfg.k_mix)

    @property
    def dims(self):
        return int(np.prod(self.config.in_shape))

    def parameters(self):
        ps = []
        for level in self.levels:
            ps += level.parameters()
        return ps + self.top.parameters()

    def permutations(self):
        return [perm for level in self.levels for perm, _ in level.steps]

    # -- shapes --------------------------------------------------------------

    def _batch(self, x):
        x = np.asarray(x)
        if x.dtype.kind not in "iu":
            raise TypeError(f"expected integer data, got {x.dtype}")
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or tuple(x.shape[1:]) != self.config.in_shape:
            raise ValueError(f"expected shape {self.config.in_shape}, got {x.shape[-3:]}")
        return x.astype(np.int64, copy=False), single

    def _check_latents(self, latents):
        zs = list(latents.z if isinstance(latents, LatentStack) else latents)
        if len(zs) != len(self.levels):
            raise ValueError(f"expected {len(self.levels)} latent levels, got {len(zs)}")
        single = np.ndim(zs[0]) == 3
        out = []
        for z, shape in zip(zs, self.latent_shapes):
            z = np.asarray(z)
            z = z[None] if single else z
            if tuple(z.shape[1:]) != shape:
                raise ValueError(f"latent shape {z.shape[1:]} does not match plan {shape}")
            out.append(z.astype(np.int64, copy=False))
        return out, single

    # -- priors --------------------------------------------------------------

    def conditional(self, level, y):
        """DLogistic parameters of z_level given the retained part y (batched)."""
        return self.levels[level].cond.params(y)

    def top_prior(self):
        return self.top.params()

    # -- bijection -----------------------------------------------------------

    def analyze(self, x):
        """Per-level (z_l, prior params) for a batch, plus log2-likelihood per image.

        The prior objects returned here are exactly the ones the coder
        quantizes, so analytic and coded lengths share one code path.
        """
        levels = []
        ll = np.zeros(x.shape[0])
        y = x
        for i, level in enumerate(self.levels):
            z, y_next = level.forward(y)
            if level.last:
                p = self.top_prior()
                lp = logpmf(z, MixtureParams(p.logpi[:, None], p.mu[:, None], p.s[:, None]))
            else:
                p = self.conditional(i, y_next)
                lp = logpmf(z, p)
            ll += lp.reshape(z.shape[0], -1).sum(axis=1) / LN2
            levels.append((z, p))
            y = y_next
        return levels, ll

    def forward(self, x):
        """Map images to latents; returns (LatentStack, log2-likelihood per image)."""
        x, single = self._batch(x)
        levels, ll = self.analyze(x)
        zs = [z for z, _ in levels]
        if single:
            return LatentStack([z[0] for z in zs]), float(ll[0])
        return LatentStack(zs), ll

    def decode_levels(self, top, provide):
        """Run the inverse from z_L down; ``provide(level, y)`` supplies each lower z."""
        y = self.levels[-1].inverse(top, None)
        for i in range(len(self.levels) - 2, -1, -1):
            z = provide(i, y)
            y = self.levels[i].inverse(z, y)
        return y

    def inverse(self, latents):
        zs, single = self._check_latents(latents)
        x = self.decode_levels(zs[-1], lambda i, y: zs[i])
        return x[0] if single else x

    def nll_bpd(self, x):
        _, ll = self.forward(x)
        return -np.asarray(ll) / self.dims

    def sample(self, n, rng):
        """Ancestral samples; values are not clipped to the pixel range."""
        if n == 0:
            return []
        p = self.top_prior()
        shape = (p.k, n) + self.latent_shapes[-1]
        p = MixtureParams(*(np.broadcast_to(a[:, None], shape) for a in (p.logpi, p.mu, p.s)))
        top = sample_prior(p, rng)

        def draw(i, y):
            return sample_prior(self.conditional(i, y), rng)

        x = self.decode_levels(top, draw)
        return [xi for xi in x]

    # -- training --------------------------------------------------------------

    def loss_train(self, x, dtype=np.float32):
        """Mean negative log2-likelihood per dimension of a batch, as a tape tensor."""
        x, _ = self._batch(x)
        y = T.Tensor(x.astype(dtype))
        total = None
        for i, level in enumerate(self.levels):
            z, y_next = level.forward_train(y)
            if level.last:
                lp = self.top.logpmf_train(z)
            else:
                mu, s = level.cond.params_train(y_next)
                lp = T.dlogistic_logpmf(z, mu, s)
            term = T.total(lp)
            total = term if total is None else total + term
            y = y_next
        return total * (-1.0 / (LN2 * x.shape[0] * self.dims))

    # -- serialization -----------------------------------------------------------

    def state(self):
        return {p.name: p.value for p in self.parameters()}

    def to_bytes(self):
        cfg = asdict(self.config)
        cfg["in_shape"] = list(cfg["in_shape"])
        params = self.parameters()
        arch = {
            "config": cfg,
            "permutations": [p.perm.tolist() for p in self.permutations()],
            "params": [[p.name, list(p.shape)] for p in params],
        }
        arch_bytes = json.dumps(arch, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<BI", VERSION, len(arch_bytes)))
        buf.write(arch_bytes)
        buf.write(struct.pack("<Q", self.config.seed))
        for p in params:
            buf.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
        body = buf.getvalue()
        return body + hashlib.sha256(body).digest()

    def hash(self):
        return self.to_bytes()[-32:]

    def save(self, path):
        data = self.to_bytes()
        with open(path, "wb") as f:
            f.write(data)
        return data[-32:]

    @classmethod
    def from_bytes(cls, data):
        if len(data) < 4 + 5 + 8 + 32 or data[:4] != MAGIC:
            raise ModelFileError("not a model file")
        body, digest = data[:-32], data[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise ModelFileError("model file hash mismatch (corrupt or truncated)")
        version, alen = struct.unpack_from("<BI", body, 4)
        if version != VERSION:
            raise ModelFileError(f"unsupported model file version {version}")
        off = 9
        arch = json.loads(body[off:off + alen])
        off += alen
        (seed,) = struct.unpack_from("<Q", body, off)
        off += 8
        cfg = ModelConfig(**arch["config"])
        if cfg.seed != seed:
            raise ModelFileError("seed field disagrees with architecture block")
        model = cls(cfg)
        for perm, stored in zip(model.permutations(), arch["permutations"]):
            perm.perm = np.asarray(stored, dtype=np.int64)
            perm.inv = np.argsort(perm.perm)
        params = model.parameters()
        if [[p.name, list(p.shape)] for p in params] != arch["params"]:
            raise ModelFileError("parameter layout does not match architecture")
        for p in params:
            n = int(np.prod(p.shape)) * 8
            if off + n > len(body):
                raise ModelFileError("truncated parameter blob")
            p.value = np.frombuffer(body, dtype="<f8", count=n // 8, offset=off).astype(np.float64).reshape(p.shape)
            p.grad = np.zeros_like(p.value)
            off += n
        if off != len(body):
            raise ModelFileError("trailing bytes in parameter blob")
        return model

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def conditional_params(model, level, y):
    """Per-dimension DLogistic parameters for the factored-out latent of ``level``."""
    y = np.asarray(y)
    single = y.ndim == 3
    p = model.conditional(level, y[None] if single else y)
    if single:
        return DLogisticParams(p.mu[0], p.s[0])
    return p
