"""
One adapter layer, five support tensors
=======================================

A frozen linear map ``W0 x + b0`` gets five trainable modulators:

    y = (W0 + W0*A + B) x + W0 C + D*b0 + E + b0

Each of A..E takes a *kind* (none, scalar, vector or low-rank) and the
kinds are chosen per layer. This demo builds one layer, looks at the
tensors each kind produces, and folds a configuration back into a plain
affine map.
"""

import numpy as np

from glora import tensor as T
from glora.layer import (
    SCALAR,
    VECTOR,
    GLoRALinear,
    LayerConfig,
    LayerSearchSpace,
    forward_adapter,
    forward_merged,
    lora,
    materialize_support,
    reparameterize,
    trainable_param_count,
)
from glora.tensor import DenseMatrix

T.set_precision("f64")
rng = np.random.default_rng(0)

###############################################################################
# A frozen 6 -> 4 layer with room for rank-4 factors. The up factors start at
# zero, so every low-rank support is zero until training moves it.

W0 = DenseMatrix(rng.standard_normal((4, 6)))
b0 = DenseMatrix(rng.standard_normal((4, 1)))
layer = GLoRALinear.init(W0, b0, r_max=4, rng=rng)
print({name: f.shape for name, f in layer.factors.items()})

###############################################################################
# Pretend training happened: give every factor some values.

layer = layer.with_factors(**{k: DenseMatrix(0.1 * rng.standard_normal(v.shape)) for k, v in layer.factors.items()})

###############################################################################
# Lower ranks, vectors and scalars all read leading slices of the *same*
# stored factors. That sharing is what lets one set of weights serve every
# subnet.

A_d = layer.factors["A_d"].data
for kind in (lora(4), lora(2), VECTOR, SCALAR):
    support = materialize_support(layer, "A", kind).data
    print(f"A as {kind!s:7} -> shape {support.shape}")
assert np.array_equal(materialize_support(layer, "A", VECTOR).data, A_d[:, :1])

###############################################################################
# A full configuration and its cost in trainable parameters.

cfg = LayerConfig(a=lora(2), b=VECTOR, c=lora(4), d=VECTOR, e=SCALAR)
print("trainable parameters:", trainable_param_count(layer, cfg))

###############################################################################
# Inference does not need the adapter path at all: the configuration merges
# into one weight and one bias of the original shapes.

x = DenseMatrix(rng.standard_normal((6, 10)))
merged = reparameterize(layer, cfg)
gap = np.abs(forward_adapter(layer, cfg, x).data - forward_merged(merged, x).data).max()
print("merged shapes:", merged.W_uni.shape, merged.b_uni.shape, " max gap:", gap)

###############################################################################
# The full per-layer space has 432 configurations at one LoRA rank.

print("configurations at one rank:", LayerSearchSpace.full((4,)).size())
