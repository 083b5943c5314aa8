"""Degrading the unified layer to earlier PEFT methods.

Each constructor returns ``(config, layer)``: the kinds to select and a copy
of the layer whose stored factors hold the method's parameters.

* LoRA: ``W0 x + dW x + b0`` with ``dW = down @ up`` -> ``B = lora(r)``.
* SSF: ``gamma*(W0 x + b0) + beta`` -> ``A = D = vector(gamma - 1)``,
  ``E = vector(beta)``. The ``- 1`` is needed because the base path is
  always added once.
* Bias prompt: ``W0 (x + c) + b0`` -> ``C = vector(c)``.
* Frozen linear: everything ``none``.

Not covered: AdaptFormer puts a non-linearity inside its parallel branch, so
no fixed affine support tensor reproduces it. FacT shares factors across
layers, which a per-layer configuration cannot express; only its per-layer
low-rank update is available (as LoRA above).
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, ShapeError
from .layer import NONE, VECTOR, GLoRALinear, LayerConfig, lora
from .tensor import DenseMatrix


def _write_leading(factor: DenseMatrix, values: np.ndarray, rows=None, cols=None) -> DenseMatrix:
    arr = np.array(factor.data)
    arr[: values.shape[0] if rows is None else rows, : values.shape[1] if cols is None else cols] = values
    return DenseMatrix(arr, dtype=factor.dtype)


def _column(v, n: int, what: str) -> np.ndarray:
    v = np.asarray(v.data if isinstance(v, DenseMatrix) else v, dtype=np.float64)
    if v.size != n:
        raise ShapeError(f"{what} must have {n} entries, got shape {v.shape}")
    return v.reshape(n, 1)


def as_lora(layer: GLoRALinear, rank: int, delta_d, delta_u) -> tuple[LayerConfig, GLoRALinear]:
    if rank > layer.r_max:
        raise ConfigurationError(f"rank {rank} exceeds r_max={layer.r_max}")
    down = np.asarray(getattr(delta_d, "data", delta_d), dtype=np.float64)
    up = np.asarray(getattr(delta_u, "data", delta_u), dtype=np.float64)
    if down.shape != (layer.d2, rank) or up.shape != (rank, layer.d1):
        raise ShapeError(
            f"LoRA factors must be {(layer.d2, rank)} and {(rank, layer.d1)}, got {down.shape} and {up.shape}"
        )
    adapted = layer.with_factors(
        B_d=_write_leading(layer.factors["B_d"], down),
        B_u=_write_leading(layer.factors["B_u"], up),
    )
    return LayerConfig(b=lora(rank)), adapted


def as_ssf(layer: GLoRALinear, gamma, beta) -> tuple[LayerConfig, GLoRALinear]:
    g = _column(gamma, layer.d2, "gamma")
    b = _column(beta, layer.d2, "beta")
    dt = layer.W0.dtype
    adapted = layer.with_factors(
        A_d=_write_leading(layer.factors["A_d"], g - 1.0),
        D=DenseMatrix(g - 1.0, dt),
        E=DenseMatrix(b, dt),
    )
    return LayerConfig(a=VECTOR, d=VECTOR, e=VECTOR), adapted


def as_prompt(layer: GLoRALinear, c) -> tuple[LayerConfig, GLoRALinear]:
    c = _column(c, layer.d1, "prompt")
    adapted = layer.with_factors(C_d=_write_leading(layer.factors["C_d"], c))
    return LayerConfig(c=VECTOR), adapted


def as_frozen_linear(layer: GLoRALinear) -> LayerConfig:
    return LayerConfig(NONE, NONE, NONE, NONE, NONE)
