# How many trainable numbers does each adapter need?
#
# For a 3x3 convolution the Tucker adapter keeps the kernel axes as their own
# modes, so the budget grows with r*(d_in + d_out) instead of r*k*(d_in + d_out).

from flora.adapters import param_count
from flora.analysis import budget_csv, budget_table, matched_lora_rank

specs = [{"shape": (64, 64, 3, 3), "r": 4, "r3": 2},
         {"shape": (256, 256, 3, 3), "r": 8, "r3": 2},
         {"shape": (128, 128), "r": 8}]
print(budget_csv(budget_table(specs)))

# %% Linear layers are the exception: the r*r core costs a little extra.
print("linear 128x128 r=8:", param_count((128, 128), (8, 8), "flora"), "vs",
      param_count((128, 128), 8, "lora"))

# %% Matching budgets on a small conv layer is not always possible. The
# Tucker adapter below has 42 entries; the smallest LoRA already has 48.
shape = (8, 8, 3, 3)
n = param_count(shape, (2, 2, 1), "flora")
r = matched_lora_rank(shape, n)
print(f"flora {n} params, closest lora r={r} with {param_count(shape, r, 'lora')}")
