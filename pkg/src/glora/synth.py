"""Deterministic teacher/student tasks with known adaptation targets.

A random *teacher* network generates a pretraining task. A *shift* then
perturbs the teacher in a way one adapter configuration reproduces exactly,
and a second task is generated through the perturbed teacher. Because the
generating configuration is returned with the data, the best achievable
validation loss is known: it is the injected noise level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import compat
from .errors import ConfigurationError, ContractError
from .layer import NONE, GLoRALinear, LayerConfig
from .tensor import DenseMatrix

NOISE_STD = 0.01
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
SHIFT_KINDS = ("scale-shift", "low-rank", "prompt", "mixed")


@dataclass
class Dataset:
    """Features, targets and disjoint train/val/test index sets.

    ``targets`` is ``n x k`` floats for regression or ``n`` integer labels
    for classification.
    """

    features: np.ndarray
    targets: np.ndarray
    splits: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2:
            raise ContractError("features must be an n x d matrix")
        if not np.all(np.isfinite(self.features)):
            raise ContractError("features must be finite")
        seen = np.zeros(len(self.features), dtype=bool)
        for name, idx in self.splits.items():
            idx = np.asarray(idx, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= len(self.features)):
                raise ContractError(f"split {name!r} indexes outside the data")
            if seen[idx].any() or len(np.unique(idx)) != len(idx):
                raise ContractError(f"split {name!r} overlaps another split")
            seen[idx] = True
            self.splits[name] = idx

    @property
    def task(self) -> str:
        return self.meta.get("task", "regression")

    @property
    def is_classification(self) -> bool:
        return self.task == "classification"

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_outputs(self) -> int:
        if self.is_classification:
            return int(self.meta["n_classes"])
        return self.targets.shape[1]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[name]
        return self.features[idx], self.targets[idx]


@dataclass
class Teacher:
    """Frozen generator network: affine layers with GELU in between."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def kind(self) -> str:
        return "linear" if len(self.weights) == 1 else "mlp"

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Outputs for rows of ``x`` (``n x d1`` in, ``n x d_out`` out)."""
        h = x.T
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = W @ h + b
            if i < len(self.weights) - 1:
                h = _gelu(h)
        return h.T

    def as_layers(self, r_max: int, dtype=np.float64) -> list[GLoRALinear]:
        """The teacher as adapter layers with all-zero support factors."""
        layers = []
        for W, b in zip(self.weights, self.biases):
            d2, d1 = W.shape
            zeros = {name: DenseMatrix.zeros(*shape, dtype) for name, shape in _factor_shapes(d1, d2, r_max).items()}
            layers.append(GLoRALinear(DenseMatrix(W, dtype), DenseMatrix(b, dtype), r_max, zeros))
        return layers


@dataclass(frozen=True)
class ShiftSpec:
    kind: str
    magnitude: float = 1.0
    rank: int = 2
    seed: int = 0


@dataclass
class ShiftedTask:
    data: Dataset
    configs: list[LayerConfig]
    layers: list[GLoRALinear]
    """Teacher layers with the oracle support values written in."""
    values: dict[int, dict[str, np.ndarray]]
    """Per teacher layer, the leading-slice factor assignments."""


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))


def _factor_shapes(d1, d2, r):
    return {
        "A_d": (d2, r), "A_u": (r, d1), "B_d": (d2, r), "B_u": (r, d1),
        "C_d": (d1, r), "C_u": (r, 1), "D": (d2, 1), "E": (d2, 1),
    }


def _split_indices(n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    order = rng.permutation(n)
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    return {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train : n_train + n_val]),
        "test": np.sort(order[n_train + n_val :]),
    }


def _finish(x, clean, rng, task, n_classes, meta, noise):
    y = clean + noise * rng.standard_normal(clean.shape)
    if task == "classification":
        if n_classes is None or n_classes < 2:
            raise ConfigurationError("classification needs n_classes >= 2")
        score = y[:, 0]
        edges = np.quantile(score, np.linspace(0, 1, n_classes + 1)[1:-1])
        y = np.searchsorted(edges, score, side="right").astype(np.int64)
        meta["n_classes"] = int(n_classes)
    elif task != "regression":
        raise ConfigurationError(f"unknown task kind {task!r}")
    meta["task"] = task
    meta["noise_std"] = noise
    return Dataset(x, y, _split_indices(len(x), rng), meta)


def make_teacher(dims, rng: np.random.Generator) -> Teacher:
    """Random teacher with layer sizes ``dims`` (``[d1, ..., d_out]``)."""
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.standard_normal((d_out, d_in)) / np.sqrt(d_in))
        biases.append(0.1 * rng.standard_normal((d_out, 1)))
    return Teacher(weights, biases)


def gen_pretrain_task(
    d1: int,
    d_out: int,
    n: int,
    seed: int,
    *,
    hidden: int | None = None,
    task: str = "regression",
    n_classes: int | None = None,
    noise: float = NOISE_STD,
) -> tuple[Dataset, Teacher]:
    """Standard-normal features through a random teacher plus Gaussian noise.

    ``hidden`` selects a two-layer GELU teacher; otherwise it is linear.
    """
    if n < 10 * d1:
        raise ContractError(f"need n >= 10*d1 = {10 * d1} samples, got {n}")
    rng = np.random.default_rng(seed)
    dims = [d1, d_out] if hidden is None else [d1, hidden, d_out]
    teacher = make_teacher(dims, rng)
    x = rng.standard_normal((n, d1))
    meta = {"seed": int(seed), "shift": "none", "teacher": teacher.kind}
    return _finish(x, teacher(x), rng, task, n_classes, meta, noise), teacher


def _shift_values(teacher: Teacher, shift: ShiftSpec, rng: np.random.Generator) -> dict[int, dict]:
    """Per-layer raw shift parameters for ``shift``."""
    mag = float(shift.magnitude)
    first, last = 0, len(teacher.weights) - 1
    out: dict[int, dict] = {}
    kinds = ("scale-shift", "low-rank", "prompt") if shift.kind == "mixed" else (shift.kind,)
    for kind in kinds:
        if kind == "scale-shift":
            d2 = teacher.weights[last].shape[0]
            gamma = 1.0 + mag * rng.uniform(-0.5, 0.5, size=(d2, 1))
            beta = mag * rng.uniform(-0.5, 0.5, size=(d2, 1))
            out.setdefault(last, {})["ssf"] = (gamma, beta)
        elif kind == "low-rank":
            W = teacher.weights[first]
            d2, d1 = W.shape
            if shift.rank < 1 or shift.rank > min(d1, d2):
                raise ConfigurationError(f"low-rank shift rank {shift.rank} impossible for a {d2}x{d1} weight")
            down = rng.standard_normal((d2, shift.rank))
            up = rng.standard_normal((shift.rank, d1))
            norm = np.linalg.norm(down @ up, 2)
            target = 0.3 * mag * np.linalg.norm(W, 2)
            s = np.sqrt(target / norm)
            out.setdefault(first, {})["lora"] = (down * s, up * s)
        elif kind == "prompt":
            d1 = teacher.weights[first].shape[1]
            c = rng.standard_normal((d1, 1))
            c = mag * c / np.linalg.norm(c)
            out.setdefault(first, {})["prompt"] = c
        else:
            raise ConfigurationError(f"shift kind {shift.kind!r} is not expressible; expected one of {SHIFT_KINDS}")
    return out


def oracle_adaptation(teacher: Teacher, shift: ShiftSpec, r_max: int | None = None):
    """Configs, adapted teacher layers and factor values realizing ``shift``."""
    if shift.kind not in SHIFT_KINDS:
        raise ConfigurationError(f"shift kind {shift.kind!r} is not expressible; expected one of {SHIFT_KINDS}")
    rng = np.random.default_rng(shift.seed)
    raw = _shift_values(teacher, shift, rng)
    if r_max is None:
        r_max = max(1, shift.rank)
    layers = teacher.as_layers(r_max)
    configs = [LayerConfig() for _ in layers]
    values: dict[int, dict[str, np.ndarray]] = {}
    if shift.magnitude == 0:
        return configs, layers, values
    for i, parts in sorted(raw.items()):
        layer, cfg = layers[i], configs[i]
        if "lora" in parts:
            c, layer = compat.as_lora(layer, parts["lora"][0].shape[1], *parts["lora"])
            cfg = cfg.with_kind("B", c.b)
        if "prompt" in parts:
            c, layer = compat.as_prompt(layer, parts["prompt"])
            cfg = cfg.with_kind("C", c.c)
        if "ssf" in parts:
            c, layer = compat.as_ssf(layer, *parts["ssf"])
            cfg = cfg.with_kind("A", c.a).with_kind("D", c.d).with_kind("E", c.e)
        layers[i], configs[i] = layer, cfg
        values[i] = _used_values(layer, cfg)
    return configs, layers, values


def _used_values(layer: GLoRALinear, cfg: LayerConfig) -> dict[str, np.ndarray]:
    out = {}
    for role in ("A", "B", "C"):
        kind = cfg.kind(role)
        f_d, f_u = layer.factors[f"{role}_d"].data, layer.factors[f"{role}_u"].data
        if kind.tag == "lora":
            out[f"{role}_d"] = f_d[:, : kind.rank].copy()
            out[f"{role}_u"] = f_u[: kind.rank].copy()
        elif kind.tag == "vector":
            out[f"{role}_d"] = f_d[:, :1].copy()
    for role in ("D", "E"):
        if cfg.kind(role).tag != "none":
            out[role] = layer.factors[role].data.copy()
    return out


def gen_shifted_task(
    teacher: Teacher,
    shift: ShiftSpec,
    n: int,
    seed: int,
    *,
    task: str = "regression",
    n_classes: int | None = None,
    noise: float = NOISE_STD,
) -> ShiftedTask:
    """New task generated by the shifted teacher, plus the oracle adaptation."""
    from .supernet import ToyModel, forward  # local: supernet depends on this module

    configs, layers, values = oracle_adaptation(teacher, shift)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, teacher.weights[0].shape[1]))
    model = ToyModel("mlp", tuple(teacher.dims), layers, ["plain"] * len(layers))
    clean = forward(model, x, configs).data.T
    meta = {
        "seed": int(seed),
        "shift": shift.kind,
        "shift_magnitude": float(shift.magnitude),
        "shift_rank": int(shift.rank),
        "shift_seed": int(shift.seed),
        "teacher": teacher.kind,
    }
    data = _finish(x, clean, rng, task, n_classes, meta, noise)
    return ShiftedTask(data, configs, layers, values)


def all_none(n_layers: int) -> list[LayerConfig]:
    return [LayerConfig(NONE, NONE, NONE, NONE, NONE) for _ in range(n_layers)]
