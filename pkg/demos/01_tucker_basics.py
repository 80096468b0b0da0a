# Tucker adapters from the ground up
#
# An adapter for an N-mode weight is a small core tensor multiplied along
# every mode by a factor matrix. This walk-through builds one by hand,
# checks it against a plain loop, and merges it into a frozen layer.

import numpy as np

from flora.adapters import FrozenLayer, TuckerAdapter, init_tucker, merge, reconstruct
from flora.layers import linear_forward
from flora.tensor import mode_n_product, unfold

# %% Unfolding. Rows index the chosen mode, columns walk the rest with the
# earliest remaining mode varying fastest.
x = np.arange(1, 9, dtype=float).reshape(2, 2, 2)
print("mode-2 unfolding of a 2x2x2 tensor:\n", unfold(x, 2))

# %% A mode product replaces one extent with the matrix's row count.
summed = mode_n_product(x, np.ones((1, 2)), 2)
print("summing along the last mode:", summed.ravel())

# %% A rank-one linear adapter, written out.
ad = TuckerAdapter(core=[[2.0]], factors=[[[1.0], [3.0]], [[2.0], [1.0]]])
print("delta:\n", reconstruct(ad))

# %% Fresh adapters start with a zero core, so training begins exactly at the
# frozen weights no matter how the factors were drawn.
w0 = np.random.default_rng(0).standard_normal((6, 5))
layer = FrozenLayer.from_weight(w0)
fresh = init_tucker(layer.shape, (2, 2), scale=0.4, seed=1)
x = np.ones(5)
print("untouched at init:", np.array_equal(linear_forward(x, layer, fresh), w0 @ x))

# %% Once the core moves, the factored forward pass and the merged weight agree.
fresh.core[...] = [[1.0, -0.5], [0.25, 2.0]]
merged = merge(layer, reconstruct(fresh), fresh.scale)
print("factored vs merged gap:", np.max(np.abs(linear_forward(x, layer, fresh) - merged @ x)))
