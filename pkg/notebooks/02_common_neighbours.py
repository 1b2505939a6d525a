"""
Common-neighbour scores
=======================

Two nodes that share neighbours should lean on each other more during
message passing than two nodes that merely touch.  The toy graph below has
node 0 linked to 1, 2 and 6; nodes 0 and 1 also share neighbour 6, while 0
and 2 share nothing.
"""

import numpy as np

from hgnn_cna.cna import CnaParams, cn_scores, cna_forward, diag_embed, fuse_weights, hop_mix, normalize_scores
from hgnn_cna.graph_data import normalize_adjacency

edges = [(0, 1), (0, 2), (0, 6), (1, 6), (2, 3)]
a = np.zeros((1, 7, 7))
for u, v in edges:
    a[0, u, v] = a[0, v, u] = 1.0

a_hat = normalize_adjacency(a)
print("normalized adjacency, row 0:", np.round(a_hat[0, 0], 3))
# 0-1 and 0-2 get the same weight: degrees match and nothing else is seen

# one hop, unit structural features: the score counts shared neighbours
c_hat = cn_scores(hop_mix(a, diag_embed(np.ones((1, 7))), np.array([1.0])))
print("shared neighbours of (0,1) and (0,2):", c_hat[0, 0, 1], c_hat[0, 0, 2])

c = normalize_scores(c_hat, a)
o = fuse_weights(c, a_hat, 0.5, 0.5)
print("refined weights, row 0:", np.round(o[0, 0], 3))
print("0 -> 1 now outweighs 0 -> 2:", o[0, 0, 1] > o[0, 0, 2])

# in the model the structural features are learned, and two hops are mixed
p = CnaParams.init(np.random.default_rng(0), K=2)
tr = cna_forward(a, a_hat, p)
print("learned structural features:", np.round(tr.s[0, :, 0], 3))
print("rows of C sum to one:", np.allclose(tr.C.sum(axis=2), 1))
