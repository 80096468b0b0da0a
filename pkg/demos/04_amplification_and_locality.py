# Two diagnostics: amplification and kernel locality
#
# The amplification factor compares the size of an update with the size of
# the frozen weight projected onto the update's top singular directions.
# The locality report shows how far apart neighbouring kernel taps land once a
# conv weight is flattened into a matrix for a matrix-style adapter.

import numpy as np

from flora.analysis import amplification_factor, locality_dispersion, optimal_core

# %% A hand-checkable case.
d = np.diag([3.0, 4.0])
print("r=2:", amplification_factor(d, d, 2).factor, " r=1:", amplification_factor(d, d, 1).factor)

# %% Small updates along directions the frozen weight barely uses get amplified.
rng = np.random.default_rng(0)
w = rng.standard_normal((16, 16))
u, s, vt = np.linalg.svd(w)
weak = 0.5 * np.outer(u[:, -1], vt[-1])
strong = 0.5 * np.outer(u[:, 0], vt[0])
print("update on weakest direction:", amplification_factor(weak, w, 1).factor)
print("update on strongest direction:", amplification_factor(strong, w, 1).factor)

# %% With the factors fixed, the best core is a pair of pseudo-inverses away.
a, _ = np.linalg.qr(rng.standard_normal((16, 3)))
b, _ = np.linalg.qr(rng.standard_normal((16, 3)))
g = rng.standard_normal((3, 3))
print("planted core recovered:", np.allclose(optimal_core(a, b, a @ g @ b.T), g))

# %% Locality: adjacent kernel taps drift apart in the flattened matrix.
for d_in in (1, 4, 16):
    rep = locality_dispersion(d_in, d_in, 3)
    print(f"d={d_in:2d}: {len(rep.pairs)} neighbour pairs, mean flat distance "
          f"{rep.mean_flat_separation:.1f}, max {rep.max_flat_separation}")
