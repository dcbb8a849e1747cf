"""Fit an IDF to the built-in toy texture and compare with its entropy rate.

The toy source draws a base value per 2x2 block from a logistic mixture and
adds small offsets to the other three pixels, so its entropy rate is known
exactly. This short run gets within about a tenth or two of a bit; the
acceptance test trains a larger model for longer.

Run: python3 demos/03_toy_training.py  (under a minute on one core)
"""
import numpy as np

from idf import codec
from idf.data import ToyTexture
from idf.train import TrainConfig, evaluate, train

toy = ToyTexture()
rng = np.random.default_rng(0)
xtr, xte = toy.sample(2000, rng), toy.sample(200, rng)
cfg = TrainConfig(levels=2, depth=2, densenet_depth=2, densenet_channels=32, densenet_growth=16,
                  k_mix=5, batch_size=32, epochs=15, lr_base=5e-3, lr_decay=0.9)
model, _ = train(cfg, xtr, xte[:100], callback=lambda r: print(
    f"epoch {r['epoch']}: train {r['train_bpd']:.3f} val {r['val_bpd']:.3f} bpd"))

print(f"entropy rate of the source {toy.entropy_rate():.3f} bpd")
print(f"test analytic bpd          {evaluate(model, xte):.3f}")
_, st = codec.compress_batch(list(xte[:50]), model)
print(f"coded bpd (incl. header)   {st.bpd:.3f}   ({st.header_bits / st.dims:.3f} bpd of header)")
print(f"compression rate           {st.rate:.2f}x")
model.save("/tmp/idf_demo.idfm")
