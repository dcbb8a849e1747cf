import numpy as np
import pytest

from idf.data import ToyTexture
from idf.model import IDFModel
from idf.train import Adamax, DivergenceError, TrainConfig, clip_gradients, evaluate, train
from idf.tensor import Parameter


def tiny_config(**kw):
    base = dict(batch_size=16, epochs=1, patch_size=8, levels=2, depth=2, densenet_depth=1,
                densenet_channels=8, k_mix=3, seed=0, lr_base=2e-3)
    base.update(kw)
    return TrainConfig(**base)


def toy(n, seed=0):
    return ToyTexture(size=8).sample(n, np.random.default_rng(seed))


def test_adamax_step_matches_hand_computation():
    p = Parameter(np.array([1.0, -2.0]))
    opt = Adamax([p], 0.9, 0.999, 1e-7)
    p.grad = np.array([0.5, -4.0])
    opt.step(0.1)
    # m = 0.1 g, u = |g|, bias-corrected step = lr * g / |g|
    np.testing.assert_allclose(p.value, [1.0 - 0.1 * 0.5 / (0.5 + 1e-7), -2.0 + 0.1 * 4 / (4 + 1e-7)])


def test_clip_gradients():
    p = Parameter(np.zeros(2))
    p.grad = np.array([300.0, 400.0])
    assert clip_gradients([p], 100.0) == 500.0
    np.testing.assert_allclose(p.grad, [60.0, 80.0])
    p.grad = np.array([3.0, 4.0])
    clip_gradients([p], 100.0)
    np.testing.assert_array_equal(p.grad, [3.0, 4.0])


def test_lr_zero_leaves_parameters_unchanged():
    cfg = tiny_config(lr_base=0.0)
    model = IDFModel(cfg.model_config())
    before = model.to_bytes()
    train(cfg, toy(32), model=model)
    assert model.to_bytes() == before


def test_training_is_deterministic():
    cfg = tiny_config()
    a, ha = train(cfg, toy(48))
    b, hb = train(cfg, toy(48))
    assert a.hash() == b.hash()
    assert ha == hb


def test_history_records_and_lr_decay():
    cfg = tiny_config(epochs=3, lr_decay=0.5)
    _, hist = train(cfg, toy(32), toy(16, 1))
    assert [h["epoch"] for h in hist] == [0, 1, 2]
    assert [h["lr"] for h in hist] == pytest.approx([2e-3, 1e-3, 5e-4])
    assert all(h["val_bpd"] is not None for h in hist)


def test_training_reduces_bpd():
    xtr, xva = toy(256), toy(64, 1)
    cfg = tiny_config(epochs=5)
    model = IDFModel(cfg.model_config())
    start = evaluate(model, xva)
    vals = []
    train(cfg, xtr, xva, model=model, callback=lambda r: vals.append(r["val_bpd"]))
    assert vals[-1] < start
    assert all(b < a for a, b in zip([start] + vals, vals))


def test_divergence_detected():
    cfg = tiny_config()
    model = IDFModel(cfg.model_config())
    model.top.raw.value[1] = np.nan
    with pytest.raises(Exception) as e:
        train(cfg, toy(16), model=model)
    assert isinstance(e.value, (DivergenceError, ValueError))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_decay=1.5)
    with pytest.raises(ValueError):
        train(tiny_config(), np.zeros((0, 1, 8, 8), np.int64))


def test_time_budget_stops_early():
    cfg = tiny_config(epochs=50, time_budget_s=1e-6)
    _, hist = train(cfg, toy(16))
    assert len(hist) == 1
    with pytest.raises(ValueError):
        TrainConfig(time_budget_s=0)
