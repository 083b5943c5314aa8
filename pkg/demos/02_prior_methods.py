"""
Earlier adapters as special cases
=================================

Picking the right kinds turns the unified layer into LoRA, SSF-style scale
and shift, or an input-side prompt. Each case is compared against the
method's own formula written out by hand.
"""

import numpy as np

from glora import tensor as T
from glora.compat import as_frozen_linear, as_lora, as_prompt, as_ssf
from glora.layer import GLoRALinear, forward_adapter, trainable_param_count
from glora.tensor import DenseMatrix

T.set_precision("f64")
rng = np.random.default_rng(1)
W0, b0 = rng.standard_normal((5, 3)), rng.standard_normal((5, 1))
layer = GLoRALinear.init(DenseMatrix(W0), DenseMatrix(b0), 4, rng)
x = rng.standard_normal((3, 8))


def show(name, cfg, adapted, expected):
    got = forward_adapter(adapted, cfg, DenseMatrix(x)).data
    print(f"{name:8} kinds={cfg.to_dict()}  params={trainable_param_count(adapted, cfg):3d}  err={np.abs(got - expected).max():.1e}")


###############################################################################
# LoRA: a rank-2 update ``down @ up`` lives in B.

down, up = rng.standard_normal((5, 2)), rng.standard_normal((2, 3))
cfg, adapted = as_lora(layer, 2, down, up)
show("lora", cfg, adapted, W0 @ x + down @ up @ x + b0)

###############################################################################
# Scale and shift of the layer output. The scale enters as ``gamma - 1``
# because the frozen path is always added once.

gamma, beta = rng.uniform(0.5, 1.5, (5, 1)), rng.uniform(-0.5, 0.5, (5, 1))
cfg, adapted = as_ssf(layer, gamma, beta)
show("ssf", cfg, adapted, gamma * (W0 @ x + b0) + beta)

###############################################################################
# A constant offset on the input, which ends up folded into the bias.

c = rng.standard_normal((3, 1))
cfg, adapted = as_prompt(layer, c)
show("prompt", cfg, adapted, W0 @ (x + c) + b0)

###############################################################################
# And with everything switched off, the frozen layer itself.

show("frozen", as_frozen_linear(layer), layer, W0 @ x + b0)
