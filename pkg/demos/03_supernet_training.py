"""
Training a supernet on a shifted task
=====================================

A teacher network generates a pretraining task. We fit a base model to it,
then perturb the teacher with a known scale-and-shift and train the support
factors of a frozen copy. Each step trains one randomly sampled subnet.
"""

import numpy as np

from glora.layer import LayerSearchSpace
from glora.supernet import TrainSchedule, build_model, evaluate, pretrain, train_supernet
from glora.synth import ShiftSpec, gen_pretrain_task, gen_shifted_task

###############################################################################
# Pretraining: plain supervised fit of the base weights.

data, teacher = gen_pretrain_task(8, 4, 2000, seed=0)
base = pretrain(build_model("mlp", [8, 4], seed=0), data, TrainSchedule(epochs=30, lr=1e-2)).model
print("pretrain val loss:", evaluate(base, data, "val")["loss"])

###############################################################################
# The downstream task. The generator also hands back the exact adapter
# configuration that produced it, so we know the best achievable loss.

task = gen_shifted_task(teacher, ShiftSpec("scale-shift"), 2000, seed=1)
print("oracle configuration:", task.configs[0].to_dict())
print("frozen base on new task:", evaluate(base, task.data, "val")["loss"])

###############################################################################
# Supernet training. Base weights are never watched by the tape, so they come
# out bitwise identical.

spaces = [LayerSearchSpace.full((4, 2))]
result = train_supernet(base, spaces, task.data, TrainSchedule(epochs=40, lr=3e-3))
print("epoch losses:", [round(v, 5) for v in result.history[::10]])
assert np.array_equal(result.model.layers[0].W0.data, base.layers[0].W0.data)

###############################################################################
# How well does the oracle's configuration do inside the trained supernet?

print("supernet under oracle kinds:", evaluate(result.model, task.data, "val", task.configs)["loss"])
