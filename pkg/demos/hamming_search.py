"""
Searching a code database by Hamming distance
=============================================

Codes are packed into 64-bit words, so one XOR plus a popcount per word
gives the distance to every stored code at once.
"""

import numpy as np

from hardhash.hashing import CodeDatabase, HashCode, build_index, pack_bits, radius_query, topk_query
from hardhash.metrics import EvalConfig, evaluate

rng = np.random.default_rng(0)

# %%
# A toy database: 12-bit codes, a handful of classes.
# Real code comes from ``encode_dataset``; here each class gets a prototype
# code and members flip a couple of its bits.
k, per_class, classes = 12, 20, 4
prototypes = rng.random((classes, k)) < 0.5
bits = np.repeat(prototypes, per_class, axis=0)
flips = rng.random(bits.shape) < 0.1
bits ^= flips
labels = np.eye(classes, dtype=bool)[np.repeat(np.arange(classes), per_class)]
db = CodeDatabase(pack_bits(bits), labels, k)
print(db.codes.shape, db.codes.dtype)  # one uint64 word per 12-bit code

# %%
# Query with the prototype of class 2.
index = build_index(db)
q = HashCode.from_bits(prototypes[2])
print("top 5:", topk_query(index, q, 5))
within = radius_query(index, q, 2)
print(f"{len(within)} codes within radius 2, classes:",
      sorted({int(np.flatnonzero(labels[i])[0]) for i, _ in within}))

# %%
# Ties at equal distance always fall back to the smaller id.
print(topk_query(index, HashCode.from_int(0, k), 3))

# %%
# Retrieval quality of fresh noisy queries against the database.
q_bits = np.repeat(prototypes, 5, axis=0) ^ (rng.random((5 * classes, k)) < 0.1)
queries = CodeDatabase(pack_bits(q_bits), np.eye(classes, dtype=bool)[np.repeat(np.arange(classes), 5)], k)
report = evaluate(queries, db, EvalConfig(topk=[10, 20]))
print(report.to_json())
