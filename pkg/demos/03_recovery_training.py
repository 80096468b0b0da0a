# Fitting a planted low-rank change
#
# A target change with exact Tucker ranks (2, 2, 1, 1) is hidden in a conv
# layer. A matching adapter can represent it exactly, so Adam should drive the
# relative error close to zero. A LoRA adapter with a similar budget cannot.

from flora.adapters import init_lora, init_tucker, param_count
from flora.training import Adam, final_relative_error, recovery_problem, run_training

shape, ranks = (8, 8, 3, 3), (2, 2, 1, 1)
task, adapter_seed = recovery_problem(shape, ranks, seed=7)

# %% Tucker adapter.
records, trained = run_training(task, init_tucker(shape, ranks, 1.0, adapter_seed), Adam(), 3000,
                                record_every=500)
for rec in records:
    print(f"step {rec.step:5d}  loss {rec.loss:.3e}  |s*delta| {rec.delta_frob:.3f}  amp {rec.amp_factor:.2f}")
print("tucker relative error:", final_relative_error(task, trained),
      "with", param_count(shape, ranks, "flora"), "params")

# %% Rank-one LoRA on the same target.
_, lora = run_training(task, init_lora(shape, 1, 1.0, adapter_seed), Adam(), 3000)
print("lora relative error:  ", final_relative_error(task, lora),
      "with", param_count(shape, 1, "lora"), "params")
