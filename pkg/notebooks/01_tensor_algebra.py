"""
Third-order tensors and the t-product
=====================================

A dynamic graph with N nodes over T slots is stored as a (T, N, N) array.
Two tensors multiply by transforming along the slot axis, multiplying
slice by slice, and transforming back.
"""

import numpy as np

from hgnn_cna.tensor_core import Transform, facewise_product, mode3_product, t_product

rng = np.random.default_rng(0)
x = rng.normal(size=(4, 3, 2))
y = rng.normal(size=(4, 2, 5))

# with the identity transform every slot is independent
same = t_product(x, y, Transform.identity(4))
print("identity == facewise:", np.array_equal(same, facewise_product(x, y)))

# with the DFT, slot t of the product mixes every pair (s, t - s mod T)
mixed = t_product(x, y, Transform.dft(4))
by_hand = sum(x[s] @ y[(1 - s) % 4] for s in range(4))
print("slot 1 as a circular convolution:", np.allclose(mixed[1], by_hand))

# the transform itself is a mode-3 product: each tube x[:, i, j] times a T x T matrix
tf = Transform.dft(4)
spectrum = mode3_product(x, tf.matrix)
print("spectrum is complex:", np.iscomplexobj(spectrum))
print("inverse recovers x:", np.allclose(mode3_product(spectrum, tf.inverse), x))

# products associate, so stacked layers can be regrouped freely
z = rng.normal(size=(4, 5, 3))
left = t_product(t_product(x, y, tf), z, tf)
right = t_product(x, t_product(y, z, tf), tf)
print("associative:", np.allclose(left, right))
