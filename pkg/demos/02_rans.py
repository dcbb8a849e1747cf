"""rANS by hand and at scale.

The m = 8 table below has frequencies (4, 2, 2). Encoding symbol 1 from state
3 gives 13 and decoding 13 gives back (1, 3). A million symbols then cost
almost exactly their Shannon information.

Run: python3 demos/02_rans.py
"""
import numpy as np

from idf import rans
from idf.priors import DLogisticParams, quantize_single

print("encode s=1 from c=3:", rans.encode_step(3, 4, 2, 3))
print("decode 13: slot", rans.decode_slot(13, 3), "-> symbol 1, state", rans.decode_step(13, 4, 2, 3))

q = quantize_single(DLogisticParams(0.0, 3.0), precision=16)
rng = np.random.default_rng(0)
idx = rng.choice(len(q.freq), size=200_000, p=q.freq / q.m)
enc = rans.RansEncoder()
for i in idx[::-1].tolist():
    enc.encode(int(q.cum[i]), int(q.freq[i]), 16)
data = enc.to_bytes()
ideal = rans.shannon_bits(q.freq[idx], 16)
print(f"{len(idx)} symbols: {8 * len(data)} bits coded, {ideal:.0f} bits Shannon, "
      f"overhead {8 * len(data) - ideal:.0f} bits")
