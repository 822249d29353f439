"""
Token attention and Siamese symmetry
====================================

Run an untrained model on one tile, inspect the tokenizer's spatial
attention, then feed the same image twice to see the symmetric outputs.
"""

###########################################################################
# One tile resized to the tiny model's 16x16 input.

import numpy as np

from mtbit.augment import plain_sample
from mtbit.data_core import SynthSpec, synthesize_tile
from mtbit.model import forward, init_params, tiny_config

tile = synthesize_tile(SynthSpec(seed=1, n_tiles=1), 0)
sample = plain_sample(tile, 16, h_scale=35.0)
params = init_params(tiny_config(), seed=0)

###########################################################################
# With ``trace=True`` the forward pass also returns the attention maps, one
# per token and epoch.  Each map is a softmax over pixels, so it sums to one.

pred, trace = forward(sample.x1, sample.x2, params, trace=True)
for e, maps in enumerate(trace.attention, start=1):
    for ell, a in enumerate(maps[0]):
        peak = tuple(int(i) for i in np.unravel_index(a.argmax(), a.shape))
        print(f"epoch {e} token {ell}: sum {a.sum():.6f}, peak at {peak}")

###########################################################################
# Same image twice: the signed feature difference is exactly zero, so the
# elevation head outputs zero and the change head sits at 0.5 for both
# classes (head biases start at zero).

same = forward(sample.x1, sample.x1, params)
print("max |m3d| =", np.abs(same.m3d).max())
print("m2d values:", np.unique(same.m2d))

###########################################################################
# Swapping the epochs flips the sign of the elevation map.

a = forward(sample.x1, sample.x2, params).m3d
b = forward(sample.x2, sample.x1, params).m3d
print("max |m3d(x1,x2) + m3d(x2,x1)| =", np.abs(a + b).max())
