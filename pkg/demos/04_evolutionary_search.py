"""
Searching for a subnet
======================

Given a trained supernet, evolution looks for the per-layer configuration
with the best validation score. On a space small enough to enumerate we can
check its answer against brute force.
"""

from glora.layer import LayerSearchSpace
from glora.search import EvoSettings, brute_force, decode, evolve, search_space_size
from glora.supernet import TrainSchedule, build_model, train_supernet
from glora.synth import ShiftSpec, gen_pretrain_task, gen_shifted_task

_, teacher = gen_pretrain_task(4, 2, 400, seed=3, hidden=4)
task = gen_shifted_task(teacher, ShiftSpec("mixed", seed=3), 400, seed=4)

###############################################################################
# A restricted space: a handful of kinds per role, two layers.

space = LayerSearchSpace({"A": ("lora", "vector", "none"), "B": ("lora", "scalar", "none"), "E": ("vector", "none")}, (2,))
spaces = [space, space]
print("configurations:", search_space_size(spaces).exact_total)

model = build_model("mlp", [4, 4, 2], seed=3, r_max=2)
supernet = train_supernet(model, spaces, task.data, TrainSchedule(epochs=10, batch_size=32, lr=1e-2)).model

###############################################################################
# Evolution keeps the top-10 as parents and breeds random, crossover and
# mutated children each generation. Best fitness can only go up.

result = evolve(supernet, spaces, task.data, EvoSettings(generations=10, seed=0))
for h in result.history[::2]:
    print(f"gen {h['generation']:2d}  best {h['best_fitness']:.5f}  params {h['best_params']}")

###############################################################################
# Compare with the exhaustive optimum.

optimum = brute_force(supernet, spaces, task.data)
print("evolution:", [c.to_dict() for c in decode(result.best.genome, spaces)])
print("matches brute force:", result.best == optimum, f"({result.evaluations} distinct subnets scored)")
