"""
How the pair weight reacts to classifier confidence
===================================================

Each example gets a hard degree from the classifier's confidence ``p`` on
its own label. A pair's contrastive term is scaled by the product of the two
degrees raised to ``gamma``.
"""

import numpy as np

from hardhash.losses import LossConfig, PairBatch, hard_degree, hard_pairwise_loss, pair_weights

p = np.linspace(0.0, 1.0, 6)

# %%
# Dissimilar pairs (Y = 1) keep their weight when the classifier is sure,
# similar pairs (Y = 0) when it is unsure.
print("p        ", np.round(p, 2))
print("P, Y = 0 ", np.round(hard_degree(p, np.zeros_like(p)), 2))
print("P, Y = 1 ", np.round(hard_degree(p, np.ones_like(p)), 2))

# %%
# The same confidence on both sides of a dissimilar pair, for a few gammas.
conf = np.array([0.2, 0.5, 0.8, 0.95])
pairs = PairBatch(np.zeros((4, 2)), np.zeros((4, 2)), np.ones(4), conf, conf)
for gamma in (0.0, 0.5, 1.0, 2.0):
    print(f"gamma {gamma}: weights {np.round(pair_weights(pairs, gamma), 4)}")

# %%
# With gamma = 0 every weight is 1 and the loss is the plain contrastive sum.
rng = np.random.default_rng(1)
b1, b2 = rng.standard_normal((8, 12)), rng.standard_normal((8, 12))
y = rng.integers(0, 2, 8)
batch = PairBatch(b1, b2, y, rng.random(8), rng.random(8))
d2 = ((b1 - b2) ** 2).sum(axis=1)
plain = (0.5 * (1 - y) * d2 + 0.5 * y * np.maximum(24.0 - d2, 0)).sum()
print(float(hard_pairwise_loss(batch, LossConfig(gamma=0.0)).data), plain)
