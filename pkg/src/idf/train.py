"""Straight-through training of an IDF with Adamax and exponential lr decay."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .model import IDFModel, ModelConfig

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 20
    lr_base: float = 1e-3
    lr_decay: float = 0.999
    seed: int = 0
    patch_size: int = 16
    channels: int = 1
    levels: int = 2
    depth: int = 4
    densenet_depth: int = 4
    densenet_channels: int = 64
    densenet_growth: int | None = None
    k_mix: int = 5
    ltc: bool = False
    clip_norm: float = 100.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    dtype: str = "float32"
    time_budget_s: float | None = None

    def __post_init__(self):
        for name in ("batch_size", "epochs", "patch_size", "channels", "levels", "depth",
                     "densenet_depth", "densenet_channels", "k_mix"):
            if getattr(self, name) < 1 and not (name == "epochs" and self.epochs == 0):
                raise ValueError(f"{name} must be positive")
        if self.lr_base < 0:
            raise ValueError("lr_base must be >= 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.time_budget_s is not None and self.time_budget_s <= 0:
            raise ValueError("time_budget_s must be positive")

    def model_config(self):
        return ModelConfig(
            in_shape=(self.channels, self.patch_size, self.patch_size),
            levels=self.levels, depth=self.depth, net_depth=self.densenet_depth,
            net_channels=self.densenet_channels, net_growth=self.densenet_growth,
            k_mix=self.k_mix, ltc=self.ltc, seed=self.seed,
        )

    def to_dict(self):
        return asdict(self)


class Adamax:
    """Adamax (infinity-norm Adam) over a list of :class:`Parameter`."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-7):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in params]
        self.u = [np.zeros_like(p.value) for p in params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        scale = lr / (1 - self.beta1 ** self.t)
        for p, m, u in zip(self.params, self.m, self.u):
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            np.maximum(self.beta2 * u, np.abs(p.grad), out=u)
            p.value -= scale * m / (u + self.eps)


def clip_gradients(params, max_norm):
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm
    return norm


def evaluate(model, data, batch_size=256):
    """Mean analytic bits per dimension over ``data`` (N, C, H, W)."""
    total = 0.0
    for i in range(0, len(data), batch_size):
        total += float(np.sum(model.nll_bpd(data[i:i + batch_size])))
    return total / len(data)


def train(config, train_data, val_data=None, model=None, callback=None):
    """Fit a model by minimizing mean NLL in bits/dim.

    Returns ``(model, history)`` where history has one record per epoch with
    ``epoch``, ``train_bpd``, ``val_bpd`` and ``lr``. With ``time_budget_s`` set,
    training stops after the first epoch that ends past the budget.
    """
    train_data = np.asarray(train_data)
    if len(train_data) == 0:
        raise ValueError("empty training set")
    if model is None:
        model = IDFModel(config.model_config())
    params = model.parameters()
    opt = Adamax(params, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed + 1)
    dtype = np.dtype(config.dtype)
    log.info("adamax beta1=%s beta2=%s eps=%s", config.beta1, config.beta2, config.eps)
    history = []
    t0 = time.monotonic()
    for epoch in range(config.epochs):
        lr = config.lr_base * config.lr_decay ** epoch
        order = rng.permutation(len(train_data))
        seen = 0
        acc = 0.0
        for i in range(0, len(order), config.batch_size):
            batch = train_data[order[i:i + config.batch_size]]
            with T.Tape() as tape:
                loss = model.loss_train(batch, dtype)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {i // config.batch_size}")
            T.backward(tape, loss, params)
            clip_gradients(params, config.clip_norm)
            opt.step(lr)
            acc += value * len(batch)
            seen += len(batch)
        rec = {"epoch": epoch, "train_bpd": acc / seen,
               "val_bpd": evaluate(model, val_data) if val_data is not None and len(val_data) else None,
               "lr": lr}
        history.append(rec)
        log.info("epoch %d train %.4f val %s lr %.3g", epoch, rec["train_bpd"], rec["val_bpd"], lr)
        if callback is not None:
            callback(rec)
        if config.time_budget_s is not None and time.monotonic() - t0 > config.time_budget_s:
            log.info("time budget reached after epoch %d", epoch)
            break
    return model, history
