"""An integer flow is an exact bijection: push images through and back.

Run: python3 demos/01_bijection.py
"""
import numpy as np

from idf.model import IDFModel, ModelConfig

rng = np.random.default_rng(0)
model = IDFModel(ModelConfig(in_shape=(3, 8, 8), levels=2, depth=4, net_depth=1, net_channels=16,
                             k_mix=3, ltc=True, seed=0))
# untrained couplings output zero shifts, so perturb the weights to make every layer act
for p in model.parameters():
    if p.name != "top.raw":
        p.value = p.value + rng.normal(size=p.shape) * 0.2 / np.sqrt(p.value[0].size)

x = rng.integers(0, 256, size=(16, 3, 8, 8))
zs, _ = model.forward(x)
print("latent shapes per level:", [z.shape[1:] for z in zs])
print("latent range:", min(int(z.min()) for z in zs), "to", max(int(z.max()) for z in zs))
print("inverse recovers input:", np.array_equal(model.inverse(zs), x))
