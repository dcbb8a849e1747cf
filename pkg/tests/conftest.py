import numpy as np
import pytest

from idf.model import IDFModel, ModelConfig


def make_model(in_shape=(1, 8, 8), levels=2, depth=2, ltc=False, seed=0, scale=0.3, k_mix=3,
               net_depth=1, net_channels=8):
    """Small model with random (not zero) network weights so every layer acts."""
    cfg = ModelConfig(in_shape=in_shape, levels=levels, depth=depth, net_depth=net_depth,
                      net_channels=net_channels, k_mix=k_mix, ltc=ltc, seed=seed)
    model = IDFModel(cfg)
    rng = np.random.default_rng(seed + 1000)
    for p in model.parameters():
        if p.name == "top.raw":
            continue
        if p.name.endswith(".out.bias"):
            continue  # keep the conditioner's broad initial prior
        p.value = rng.normal(size=p.shape) * scale / np.sqrt(max(1, p.value[0].size))
    return model


@pytest.fixture(scope="session")
def small_model():
    return make_model()


@pytest.fixture(scope="session")
def rgb_model():
    return make_model(in_shape=(3, 8, 8), levels=2, depth=2, ltc=True, seed=5)


@pytest.fixture(scope="session")
def toy_model():
    """Tiny model briefly fitted to 16x16 toy textures, so images take the coded path."""
    from idf.data import ToyTexture
    from idf.train import TrainConfig, train
    cfg = TrainConfig(batch_size=32, epochs=10, patch_size=16, levels=2, depth=2, densenet_depth=1,
                      densenet_channels=16, k_mix=3, lr_base=5e-3, seed=0)
    x = ToyTexture().sample(512, np.random.default_rng(0))
    model, _ = train(cfg, x)
    return model


@pytest.fixture(scope="session")
def toy_images():
    from idf.data import ToyTexture
    return list(ToyTexture().sample(8, np.random.default_rng(123)))


# one line per acceptance criterion, printed again at the end of the run
ACCEPTANCE = {}


def report(criterion, ok, detail):
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
