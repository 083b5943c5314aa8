"""Toy models built from adapter layers and one-shot supernet training.

Every linear map in a toy model is a :class:`~glora.layer.GLoRALinear`. The
supernet is trained by drawing one random subnet (a :class:`LayerConfig` per
layer) each iteration and updating only the factors that subnet reads, with
AdamW and a cosine learning-rate decay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DivergenceError
from .layer import (
    GLoRALinear,
    LayerConfig,
    LayerSearchSpace,
    MergedLinear,
    forward_adapter,
    forward_merged,
    linear_flops,
    required_factors,
    validate_config,
)
from .synth import Dataset
from .tensor import DenseMatrix, Tape

ModelConfig = Sequence[LayerConfig]

LAYER_TYPES = ("qkv", "projection", "fc1", "fc2", "plain")

_MASK_FILL = -1e9


@dataclass
class ToyModel:
    """A stack of adapter layers.

    ``kind="mlp"``: ``dims = (d_in, *hidden, d_out)``, GELU between layers.

    ``kind="mini-attention"``: ``dims = (d, d_out)``; each sample is
    ``tokens`` tokens of width ``d`` flattened into ``tokens * d`` features.
    One single-head block (qkv, softmax attention, projection, fc1, GELU,
    fc2, both residual) is followed by mean pooling over tokens and a
    classifier layer.
    """

    kind: str
    dims: tuple[int, ...]
    layers: list
    labels: list[str]
    tokens: int = 1

    @property
    def input_dim(self) -> int:
        return self.dims[0] * self.tokens if self.kind == "mini-attention" else self.dims[0]

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    @property
    def is_merged(self) -> bool:
        return all(isinstance(layer, MergedLinear) for layer in self.layers)

    def replace_layers(self, layers) -> ToyModel:
        return ToyModel(self.kind, self.dims, list(layers), list(self.labels), self.tokens)

    def base_param_count(self) -> int:
        total = 0
        for layer in self.layers:
            total += layer.param_count() if isinstance(layer, MergedLinear) else layer.base_param_count()
        return total


def build_model(
    kind: str,
    dims: Sequence[int],
    seed: int,
    *,
    r_max: int = 4,
    tokens: int = 4,
    dtype=None,
) -> ToyModel:
    """Randomly initialised toy model; base weights use a ``1/sqrt(fan_in)`` scale."""
    dims = tuple(int(d) for d in dims)
    if any(d < 1 for d in dims):
        raise ConfigurationError(f"dimensions must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    dtype = T.default_dtype() if dtype is None else np.dtype(dtype)

    def make(d_in, d_out):
        W0 = DenseMatrix(rng.standard_normal((d_out, d_in)) / math.sqrt(d_in), dtype)
        b0 = DenseMatrix(np.zeros((d_out, 1)), dtype)
        return GLoRALinear.init(W0, b0, r_max, rng)

    if kind == "mlp":
        if len(dims) < 2:
            raise ConfigurationError("mlp needs at least [d_in, d_out]")
        layers = [make(a, b) for a, b in zip(dims[:-1], dims[1:])]
        return ToyModel("mlp", dims, layers, ["plain"] * len(layers), 1)
    if kind == "mini-attention":
        if len(dims) != 2:
            raise ConfigurationError("mini-attention dims are [d, d_out]")
        if tokens < 1:
            raise ConfigurationError("tokens must be positive")
        d, d_out = dims
        shapes = [(d, 3 * d), (d, d), (d, 4 * d), (4 * d, d), (d, d_out)]
        layers = [make(a, b) for a, b in shapes]
        return ToyModel("mini-attention", dims, layers, ["qkv", "projection", "fc1", "fc2", "plain"], tokens)
    raise ConfigurationError(f"unknown model kind {kind!r}")


@lru_cache(maxsize=16)
def _attention_constants(n: int, tokens: int, dtype: str):
    sample = np.repeat(np.arange(n), tokens)
    mask = np.where(sample[:, None] == sample[None, :], 0.0, _MASK_FILL).astype(dtype)
    pool = np.zeros((n * tokens, n), dtype=dtype)
    pool[np.arange(n * tokens), sample] = 1.0 / tokens
    return DenseMatrix._wrap(mask), DenseMatrix._wrap(pool)


def _apply(layer, cfg, h, tensors):
    if isinstance(layer, MergedLinear):
        return forward_merged(layer, h)
    return forward_adapter(layer, cfg, h, tensors)


def forward(
    model: ToyModel,
    features,
    config: ModelConfig | None = None,
    tensors: Sequence[dict] | None = None,
) -> DenseMatrix:
    """Model outputs (``d_out x n``) for rows of ``features``.

    ``config`` defaults to all-``none``; ``tensors`` optionally overrides
    stored tensors per layer (used for tape-watched parameters).
    """
    n_layers = len(model.layers)
    if config is None:
        config = [LayerConfig()] * n_layers
    if len(config) != n_layers:
        raise ContractError(f"config has {len(config)} layers, model has {n_layers}")
    if tensors is None:
        tensors = [None] * n_layers
    dtype = model.layers[0].W0.dtype if isinstance(model.layers[0], GLoRALinear) else model.layers[0].W_uni.dtype
    if isinstance(features, DenseMatrix):
        x = features.data
    else:
        x = np.asarray(features)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ContractError(f"features must be n x {model.input_dim}, got {x.shape}")

    if model.kind == "mlp":
        h = DenseMatrix._wrap(np.ascontiguousarray(x.T, dtype=dtype))
        for i, layer in enumerate(model.layers):
            h = _apply(layer, config[i], h, tensors[i])
            if i < n_layers - 1:
                h = T.gelu(h)
        return h

    d, tokens, n = model.dims[0], model.tokens, x.shape[0]
    X = DenseMatrix._wrap(np.ascontiguousarray(x.reshape(n, tokens, d).transpose(2, 0, 1).reshape(d, n * tokens), dtype=dtype))
    mask, pool = _attention_constants(n, tokens, np.dtype(dtype).name)
    qkv = _apply(model.layers[0], config[0], X, tensors[0])
    q = T.take(qkv, slice(0, d))
    k = T.take(qkv, slice(d, 2 * d))
    v = T.take(qkv, slice(2 * d, 3 * d))
    scores = T.add_broadcast(T.scale(T.matmul(T.transpose(q), k), 1.0 / math.sqrt(d)), mask)
    attn = T.softmax_rows(scores)
    mixed = T.matmul(v, T.transpose(attn))
    h = T.add_broadcast(X, _apply(model.layers[1], config[1], mixed, tensors[1]))
    ff = _apply(model.layers[3], config[3], T.gelu(_apply(model.layers[2], config[2], h, tensors[2])), tensors[3])
    h = T.add_broadcast(h, ff)
    pooled = T.matmul(h, pool)
    return _apply(model.layers[4], config[4], pooled, tensors[4])


def model_flops(model: ToyModel, n: int) -> int:
    """Analytic flop count of the affine layers for a batch of ``n`` samples."""
    cols = n * model.tokens if model.kind == "mini-attention" else n
    total = 0
    for i, layer in enumerate(model.layers):
        c = n if (model.kind == "mini-attention" and i == len(model.layers) - 1) else cols
        if isinstance(layer, MergedLinear):
            total += linear_flops(layer.d1, layer.d2, c, layer.b_uni is not None)
        else:
            total += linear_flops(layer.d1, layer.d2, c, layer.has_bias)
    return total


def task_loss(out: DenseMatrix, targets: np.ndarray, classification: bool) -> DenseMatrix:
    if classification:
        return T.softmax_cross_entropy(out, targets)
    y = DenseMatrix._wrap(np.ascontiguousarray(np.asarray(targets).T, dtype=out.dtype))
    return T.mse_loss(out, y)


def evaluate(model: ToyModel, data: Dataset, split: str, config: ModelConfig | None = None) -> dict[str, float]:
    """Loss (and accuracy for classification) on one split."""
    x, y = data.split(split)
    if len(x) == 0:
        raise ContractError(f"split {split!r} is empty")
    out = forward(model, x, config)
    metrics = {"loss": float(task_loss(out, y, data.is_classification).data[0, 0])}
    if data.is_classification:
        metrics["accuracy"] = float(np.mean(out.data.argmax(axis=0) == y))
    return metrics


# -- sampling and optimisation ---------------------------------------------


def sample_subnet(spaces: Sequence[LayerSearchSpace], rng: np.random.Generator) -> list[LayerConfig]:
    """One kind per layer and role, uniformly over each role's options."""
    configs = []
    for space in spaces:
        kinds = []
        for role in ("A", "B", "C", "D", "E"):
            options = space.options(role)
            kinds.append(options[int(rng.integers(len(options)))])
        configs.append(LayerConfig(*kinds))
    return configs


def cosine_lr(step: int, total_steps: int, peak: float) -> float:
    if not 0 <= step < total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps})")
    return peak * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def adamw_step(
    params: dict[str, DenseMatrix],
    grads: dict[str, DenseMatrix],
    state: dict[str, dict],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> dict[str, DenseMatrix]:
    """Decoupled-weight-decay Adam step for the parameters that have a gradient.

    ``state`` is updated in place (per-parameter moments and step count);
    parameters without a gradient are returned unchanged and get no state.
    """
    b1, b2 = betas
    out = dict(params)
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        p = params[name].data
        g = g.data
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        st = state.get(name)
        if st is None:
            st = state[name] = {"m": np.zeros_like(p), "v": np.zeros_like(p), "t": 0}
        elif st["m"].shape != p.shape:
            raise ContractError(f"optimizer state for {name!r} has shape {st['m'].shape}, parameter {p.shape}")
        st["t"] += 1
        t = st["t"]
        st["m"] = b1 * st["m"] + (1 - b1) * g
        st["v"] = b2 * st["v"] + (1 - b2) * g * g
        m_hat = st["m"] / (1 - b1**t)
        v_hat = st["v"] / (1 - b2**t)
        new = p * (1 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
        out[name] = DenseMatrix._wrap(new.astype(p.dtype, copy=False))
    return out


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 500
    batch_size: int = 64
    lr: float = 5e-4
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.weight_decay < 0:
            raise ContractError(f"invalid schedule {self}")


@dataclass
class TrainResult:
    model: ToyModel
    history: list[float] = field(default_factory=list)
    steps: int = 0


def _train_loop(
    model: ToyModel,
    data: Dataset,
    schedule: TrainSchedule,
    pick_config: Callable[[np.random.Generator], list[LayerConfig]],
    trainable: Callable[[int, GLoRALinear, LayerConfig], list[str]],
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    if data.n_features != model.input_dim:
        raise ContractError(f"dataset has {data.n_features} features, model expects {model.input_dim}")
    rng = np.random.default_rng(schedule.seed)
    x, y = data.split("train")
    n = len(x)
    per_epoch = math.ceil(n / schedule.batch_size) if n else 0
    total = schedule.epochs * per_epoch
    layers = list(model.layers)
    state: dict[str, dict] = {}
    history = []
    step = 0
    for epoch in range(schedule.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, schedule.batch_size):
            idx = order[start : start + schedule.batch_size]
            config = pick_config(rng)
            tape = Tape()
            tensors, params = [], {}
            for i, (layer, cfg) in enumerate(zip(layers, config)):
                watched = {}
                for name in trainable(i, layer, cfg):
                    key = f"{i}.{name}"
                    params[key] = layer.tensor(name)
                    watched[name] = tape.watch(params[key], key)
                tensors.append(watched)
            current = model.replace_layers(layers)
            out = forward(current, x[idx], config, tensors)
            loss = task_loss(out, y[idx], data.is_classification)
            value = float(loss.data[0, 0])
            if not math.isfinite(value):
                raise DivergenceError(step, value)
            losses.append(value)
            if params:
                grads = T.backward(tape, loss)
                lr = cosine_lr(step, total, schedule.lr)
                updated = adamw_step(params, grads, state, lr, weight_decay=schedule.weight_decay)
                layers = _write_back(layers, updated)
            step += 1
        mean = float(np.mean(losses)) if losses else float("nan")
        history.append(mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    return TrainResult(model.replace_layers(layers), history, step)


def _write_back(layers, updated: dict[str, DenseMatrix]):
    per_layer: dict[int, dict[str, DenseMatrix]] = {}
    for key, value in updated.items():
        i, name = key.split(".", 1)
        per_layer.setdefault(int(i), {})[name] = value
    layers = list(layers)
    for i, values in per_layer.items():
        layer = layers[i]
        W0 = values.pop("W0", layer.W0)
        b0 = values.pop("b0", layer.b0)
        factors = dict(layer.factors)
        factors.update(values)
        layers[i] = GLoRALinear(W0, b0, layer.r_max, factors)
    return layers


def train_supernet(
    model: ToyModel,
    spaces: Sequence[LayerSearchSpace],
    data: Dataset,
    schedule: TrainSchedule,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train the support factors with one random subnet per iteration.

    ``W0``/``b0`` are never watched, so they come back bitwise unchanged.
    """
    if len(spaces) != len(model.layers):
        raise ContractError(f"{len(spaces)} search spaces for {len(model.layers)} layers")
    for space, layer in zip(spaces, model.layers):
        if space.max_rank > layer.r_max:
            raise ConfigurationError(f"search rank {space.max_rank} exceeds layer r_max={layer.r_max}")
    return _train_loop(
        model,
        data,
        schedule,
        lambda rng: sample_subnet(spaces, rng),
        lambda i, layer, cfg: required_factors(cfg),
        on_epoch,
    )


def pretrain(
    model: ToyModel,
    data: Dataset,
    schedule: TrainSchedule,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Ordinary training of the base weights with every support kind ``none``."""
    frozen = [LayerConfig()] * len(model.layers)
    return _train_loop(
        model,
        data,
        schedule,
        lambda rng: frozen,
        lambda i, layer, cfg: ["W0", "b0"] if layer.has_bias else ["W0"],
        on_epoch,
    )


def check_config(spaces: Sequence[LayerSearchSpace], config: ModelConfig) -> list[str]:
    if len(config) != len(spaces):
        return [f"config has {len(config)} layers, expected {len(spaces)}"]
    problems = []
    for i, (space, cfg) in enumerate(zip(spaces, config)):
        problems += [f"layer {i}: {p}" for p in validate_config(space, cfg)]
    return problems
