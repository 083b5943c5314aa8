"""The generalized low-rank adapted linear layer.

A frozen affine map ``y = W0 x + b0`` (``W0`` is ``d2 x d1``, inputs are
columns) is modulated by five trainable support tensors::

    y = (W0 + W0*A + B) x + W0 @ C + D*b0 + E + b0

``*`` is the broadcast elementwise product and ``+`` broadcasts along
columns. Each support tensor takes one *kind* per subnet: a low-rank product
of leading factor slices, a vector, a scalar, or nothing. All kinds of one
role are read out of the same stored factors (weight entanglement), so the
layer stores only the rank-``r_max`` factors:

======  ======================  =========================================
role    stored                  kinds
======  ======================  =========================================
A       A_d (d2 x r), A_u       lora (d2 x d1), vector (d2 x 1), scalar
B       B_d (d2 x r), B_u       lora (d2 x d1), vector (d2 x 1), scalar
C       C_d (d1 x r), C_u       lora (d1 x 1), vector (d1 x 1)
D       D (d2 x 1)              vector, scalar
E       E (d2 x 1)              vector, scalar
======  ======================  =========================================

``none`` is available for every role and means zero.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field, fields, replace
from typing import Iterator, Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ShapeError
from .tensor import DenseMatrix

ROLES = ("A", "B", "C", "D", "E")
TAGS = ("lora", "vector", "scalar", "none")

ALLOWED_TAGS = {
    "A": ("lora", "vector", "scalar", "none"),
    "B": ("lora", "vector", "scalar", "none"),
    "C": ("lora", "vector", "none"),
    "D": ("vector", "scalar", "none"),
    "E": ("vector", "scalar", "none"),
}

FACTOR_NAMES = ("A_d", "A_u", "B_d", "B_u", "C_d", "C_u", "D", "E")

INIT_STD = 0.02


@dataclass(frozen=True, order=True)
class SupportKind:
    tag: str
    rank: int | None = None

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ConfigurationError(f"unknown support kind {self.tag!r}")
        if self.tag == "lora":
            if not isinstance(self.rank, (int, np.integer)) or self.rank < 1:
                raise ConfigurationError(f"lora kind needs a positive integer rank, got {self.rank!r}")
        elif self.rank is not None:
            raise ConfigurationError(f"{self.tag} kind takes no rank")

    def __str__(self) -> str:
        return f"lora{self.rank}" if self.tag == "lora" else self.tag

    @classmethod
    def parse(cls, text: str) -> SupportKind:
        m = re.fullmatch(r"lora(\d+)", text)
        if m:
            return cls("lora", int(m.group(1)))
        return cls(text)


NONE = SupportKind("none")
VECTOR = SupportKind("vector")
SCALAR = SupportKind("scalar")


def lora(rank: int) -> SupportKind:
    return SupportKind("lora", rank)


@dataclass(frozen=True)
class LayerConfig:
    """Support kind chosen for each role of one layer."""

    a: SupportKind = NONE
    b: SupportKind = NONE
    c: SupportKind = NONE
    d: SupportKind = NONE
    e: SupportKind = NONE

    def kind(self, role: str) -> SupportKind:
        return getattr(self, role.lower())

    def kinds(self) -> tuple[SupportKind, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))

    def with_kind(self, role: str, kind: SupportKind) -> LayerConfig:
        return replace(self, **{role.lower(): kind})

    def to_dict(self) -> dict[str, str]:
        return {role: str(self.kind(role)) for role in ROLES}

    @classmethod
    def from_dict(cls, d: Mapping[str, str]) -> LayerConfig:
        return cls(**{role.lower(): SupportKind.parse(d[role]) for role in ROLES})

    def __str__(self) -> str:
        return " ".join(f"{role}={self.kind(role)}" for role in ROLES)


@dataclass(frozen=True)
class LayerSearchSpace:
    """Admissible kinds per role and the LoRA ranks on offer."""

    tags: Mapping[str, tuple[str, ...]] = field(default_factory=lambda: dict(ALLOWED_TAGS))
    ranks: tuple[int, ...] = (4,)

    def __post_init__(self):
        object.__setattr__(self, "tags", {r: tuple(self.tags.get(r, ("none",))) for r in ROLES})
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        uses_lora = any("lora" in t for t in self.tags.values())
        if uses_lora and not self.ranks:
            raise ConfigurationError("rank list must be non-empty when lora is allowed")
        if any(r < 1 for r in self.ranks):
            raise ConfigurationError(f"ranks must be positive, got {self.ranks}")
        for role, tags in self.tags.items():
            if not tags:
                raise ConfigurationError(f"role {role} has no admissible kind")
            bad = set(tags) - set(ALLOWED_TAGS[role])
            if bad:
                raise ConfigurationError(f"role {role} does not admit {sorted(bad)}")

    @classmethod
    def full(cls, ranks=(4,)) -> LayerSearchSpace:
        return cls(dict(ALLOWED_TAGS), tuple(ranks))

    @classmethod
    def only_none(cls) -> LayerSearchSpace:
        return cls({r: ("none",) for r in ROLES}, ())

    @property
    def max_rank(self) -> int:
        return max(self.ranks) if self.ranks else 0

    def options(self, role: str) -> list[SupportKind]:
        """Admissible kinds for ``role``; lora appears once per listed rank."""
        out = []
        for tag in self.tags[role]:
            if tag == "lora":
                out.extend(lora(r) for r in self.ranks)
            else:
                out.append(SupportKind(tag))
        return out

    def configs(self) -> Iterator[LayerConfig]:
        """Every admissible layer config, in option order."""
        for kinds in itertools.product(*(self.options(role) for role in ROLES)):
            yield LayerConfig(*kinds)

    def size(self) -> int:
        n = 1
        for role in ROLES:
            n *= len(self.options(role))
        return n

    def to_dict(self) -> dict:
        return {"tags": {r: list(t) for r, t in self.tags.items()}, "ranks": list(self.ranks)}

    @classmethod
    def from_dict(cls, d: Mapping) -> LayerSearchSpace:
        return cls({r: tuple(t) for r, t in d["tags"].items()}, tuple(d["ranks"]))


def validate_config(space: LayerSearchSpace | None, config: LayerConfig) -> list[str]:
    """List every way ``config`` violates the role rules or ``space``.

    An empty list means the config is admissible. Passing ``space=None``
    checks only the per-role kind rules.
    """
    problems = []
    for role in ROLES:
        kind = config.kind(role)
        if kind.tag not in ALLOWED_TAGS[role]:
            problems.append(f"{role}: kind {kind} is not allowed for this role")
            continue
        if space is None:
            continue
        if kind.tag not in space.tags[role]:
            problems.append(f"{role}: kind {kind.tag} is not in the search space")
        elif kind.tag == "lora" and kind.rank not in space.ranks:
            problems.append(f"{role}: rank {kind.rank} is not in the rank list {list(space.ranks)}")
    return problems


class GLoRALinear:
    """Frozen ``W0``/``b0`` plus rank-``r_max`` support factors.

    ``factors`` maps the names in :data:`FACTOR_NAMES` to matrices. Instances
    are treated as immutable snapshots; training produces new instances via
    :meth:`with_factors`.
    """

    def __init__(self, W0: DenseMatrix, b0: DenseMatrix | None, r_max: int, factors: Mapping[str, DenseMatrix]):
        self.W0 = W0
        self.b0 = b0
        self.r_max = int(r_max)
        self.factors = dict(factors)
        self._check()

    @classmethod
    def init(cls, W0: DenseMatrix, b0: DenseMatrix | None, r_max: int, rng: np.random.Generator) -> GLoRALinear:
        d2, d1 = W0.shape
        dtype = W0.dtype

        def gauss(rows, cols):
            return DenseMatrix(rng.normal(0.0, INIT_STD, size=(rows, cols)), dtype=dtype)

        factors = {
            "A_d": gauss(d2, r_max),
            "A_u": DenseMatrix.zeros(r_max, d1, dtype),
            "B_d": gauss(d2, r_max),
            "B_u": DenseMatrix.zeros(r_max, d1, dtype),
            "C_d": gauss(d1, r_max),
            "C_u": DenseMatrix.zeros(r_max, 1, dtype),
            "D": DenseMatrix.zeros(d2, 1, dtype),
            "E": DenseMatrix.zeros(d2, 1, dtype),
        }
        return cls(W0, b0, r_max, factors)

    @property
    def d1(self) -> int:
        return self.W0.cols

    @property
    def d2(self) -> int:
        return self.W0.rows

    @property
    def has_bias(self) -> bool:
        return self.b0 is not None

    def factor_shapes(self) -> dict[str, tuple[int, int]]:
        d1, d2, r = self.d1, self.d2, self.r_max
        return {
            "A_d": (d2, r), "A_u": (r, d1),
            "B_d": (d2, r), "B_u": (r, d1),
            "C_d": (d1, r), "C_u": (r, 1),
            "D": (d2, 1), "E": (d2, 1),
        }

    def _check(self) -> None:
        if self.r_max < 1:
            raise ConfigurationError(f"r_max must be positive, got {self.r_max}")
        if self.b0 is not None and self.b0.shape != (self.d2, 1):
            raise ShapeError(f"b0 must be {self.d2}x1, got {self.b0.shape}")
        expected = self.factor_shapes()
        if set(self.factors) != set(expected):
            raise ConfigurationError(f"factors must be exactly {sorted(expected)}")
        for name, shape in expected.items():
            if self.factors[name].shape != shape:
                raise ShapeError(f"factor {name} must be {shape}, got {self.factors[name].shape}")

    def with_factors(self, **updates: DenseMatrix) -> GLoRALinear:
        factors = dict(self.factors)
        for name, value in updates.items():
            if name not in factors:
                raise ConfigurationError(f"unknown factor {name!r}")
            factors[name] = value if isinstance(value, DenseMatrix) else DenseMatrix(value, dtype=self.W0.dtype)
        return GLoRALinear(self.W0, self.b0, self.r_max, factors)

    def tensor(self, name: str, overrides: Mapping[str, DenseMatrix] | None = None) -> DenseMatrix:
        if overrides is not None and name in overrides:
            return overrides[name]
        if name == "W0":
            return self.W0
        if name == "b0":
            return self.b0
        return self.factors[name]

    def base_param_count(self) -> int:
        return self.d1 * self.d2 + (self.d2 if self.has_bias else 0)

    def __repr__(self) -> str:
        return f"GLoRALinear(d1={self.d1}, d2={self.d2}, r_max={self.r_max}, bias={self.has_bias})"


@dataclass(frozen=True)
class MergedLinear:
    """Plain affine layer produced by folding the support tensors into the base."""

    W_uni: DenseMatrix
    b_uni: DenseMatrix | None

    @property
    def d1(self) -> int:
        return self.W_uni.cols

    @property
    def d2(self) -> int:
        return self.W_uni.rows

    def param_count(self) -> int:
        return self.W_uni.data.size + (0 if self.b_uni is None else self.b_uni.data.size)


def required_factors(config: LayerConfig) -> list[str]:
    """Factor names read by ``config`` (the ones that can receive gradient)."""
    names = []
    for role in ROLES:
        kind = config.kind(role)
        if kind.tag == "none":
            continue
        if role in ("D", "E"):
            names.append(role)
        elif kind.tag == "lora":
            names += [f"{role}_d", f"{role}_u"]
        else:
            names.append(f"{role}_d")
    return names


def _check_kind(layer: GLoRALinear, role: str, kind: SupportKind) -> None:
    if role not in ALLOWED_TAGS:
        raise ConfigurationError(f"unknown role {role!r}")
    if kind.tag not in ALLOWED_TAGS[role]:
        raise ConfigurationError(f"role {role} does not admit kind {kind}")
    if kind.tag == "lora" and kind.rank > layer.r_max:
        raise ConfigurationError(f"rank {kind.rank} exceeds r_max={layer.r_max}")


def materialize_support(
    layer: GLoRALinear,
    role: str,
    kind: SupportKind,
    tensors: Mapping[str, DenseMatrix] | None = None,
) -> DenseMatrix:
    """Effective support tensor for ``role`` under ``kind``.

    ``tensors`` optionally overrides stored factors (e.g. tape-watched copies).
    """
    _check_kind(layer, role, kind)
    if kind.tag == "none":
        return DenseMatrix.zeros(1, 1, layer.W0.dtype)
    if role in ("D", "E"):
        vec = layer.tensor(role, tensors)
        return vec if kind.tag == "vector" else T.take(vec, slice(0, 1), slice(0, 1))
    down = layer.tensor(f"{role}_d", tensors)
    if kind.tag == "vector":
        return T.take(down, slice(None), slice(0, 1))
    if kind.tag == "scalar":
        return T.take(down, slice(0, 1), slice(0, 1))
    up = layer.tensor(f"{role}_u", tensors)
    r = kind.rank
    return T.matmul(T.take(down, slice(None), slice(0, r)), T.take(up, slice(0, r), slice(None)))


def effective_weight(layer: GLoRALinear, config: LayerConfig, tensors=None) -> DenseMatrix:
    W0 = layer.tensor("W0", tensors)
    W = W0
    if config.a.tag != "none":
        W = T.add_broadcast(W, T.broadcast_mul(W0, materialize_support(layer, "A", config.a, tensors)))
    if config.b.tag != "none":
        W = T.add_broadcast(W, materialize_support(layer, "B", config.b, tensors))
    return W


def effective_bias(layer: GLoRALinear, config: LayerConfig, tensors=None) -> DenseMatrix | None:
    """Adapted bias, or ``None`` when it is identically absent."""
    W0 = layer.tensor("W0", tensors)
    b0 = layer.tensor("b0", tensors)
    terms = []
    if config.c.tag != "none":
        terms.append(T.matmul(W0, materialize_support(layer, "C", config.c, tensors)))
    if config.d.tag != "none" and b0 is not None:
        terms.append(T.broadcast_mul(b0, materialize_support(layer, "D", config.d, tensors)))
    if config.e.tag != "none":
        terms.append(materialize_support(layer, "E", config.e, tensors))
    if b0 is not None:
        terms.append(b0)
    if not terms:
        return None
    # a scalar E alone must still come out as a d2 x 1 column
    bias = terms[0] if terms[0].rows == layer.d2 else T.add_broadcast(DenseMatrix.zeros(layer.d2, 1, W0.dtype), terms[0])
    for t in terms[1:]:
        bias = T.add_broadcast(bias, t)
    return bias


def forward_adapter(
    layer: GLoRALinear,
    config: LayerConfig,
    x: DenseMatrix,
    tensors: Mapping[str, DenseMatrix] | None = None,
) -> DenseMatrix:
    """Adapter-path output for inputs ``x`` (``d1 x n``)."""
    if x.rows != layer.d1:
        raise ShapeError(f"input has {x.rows} rows, layer expects d1={layer.d1}")
    y = T.matmul(effective_weight(layer, config, tensors), x)
    bias = effective_bias(layer, config, tensors)
    if bias is not None:
        y = T.add_broadcast(y, bias)
    return y


def reparameterize(layer: GLoRALinear, config: LayerConfig) -> MergedLinear:
    """Fold the configured support tensors into a plain affine layer."""
    for role in ROLES:
        _check_kind(layer, role, config.kind(role))
    W0 = layer.W0.data
    f = {k: v.data for k, v in layer.factors.items()}

    def support(role):
        kind = config.kind(role)
        if kind.tag == "none":
            return None
        if role in ("D", "E"):
            return f[role] if kind.tag == "vector" else f[role][:1, :1]
        down = f[f"{role}_d"]
        if kind.tag == "vector":
            return down[:, :1]
        if kind.tag == "scalar":
            return down[:1, :1]
        return down[:, : kind.rank] @ f[f"{role}_u"][: kind.rank, :]

    A, B, C, D, E = (support(r) for r in ROLES)
    W = W0.copy()
    if A is not None:
        W = W + W0 * A
    if B is not None:
        W = W + np.broadcast_to(B, W0.shape)
    b0 = None if layer.b0 is None else layer.b0.data
    bias = None
    if b0 is not None:
        bias = b0.copy()
    extra = []
    if C is not None:
        extra.append(W0 @ C)
    if D is not None and b0 is not None:
        extra.append(D * b0)
    if E is not None:
        extra.append(np.broadcast_to(E, (layer.d2, 1)))
    if extra:
        total = extra[0].copy()
        for term in extra[1:]:
            total = total + term
        bias = total if bias is None else total + bias
    W_uni = DenseMatrix._wrap(np.ascontiguousarray(W))
    b_uni = None if bias is None else DenseMatrix._wrap(np.ascontiguousarray(bias))
    return MergedLinear(W_uni, b_uni)


def forward_merged(m: MergedLinear, x: DenseMatrix) -> DenseMatrix:
    if x.rows != m.d1:
        raise ShapeError(f"input has {x.rows} rows, merged layer expects {m.d1}")
    y = T.matmul(m.W_uni, x)
    if m.b_uni is not None:
        y = T.add_broadcast(y, m.b_uni)
    return y


def linear_flops(d1: int, d2: int, n: int, bias: bool = True) -> int:
    """Multiply-add count of one affine map on ``n`` columns (2 flops per MAC)."""
    return 2 * d1 * d2 * n + (d2 * n if bias else 0)


def merged_flops(m: MergedLinear, n: int) -> int:
    return linear_flops(m.d1, m.d2, n, m.b_uni is not None)


def trainable_param_count(layer: GLoRALinear, config: LayerConfig) -> int:
    """Number of support-factor entries the config actually reads."""
    d1, d2 = layer.d1, layer.d2
    out_in = {"A": (d2, d1), "B": (d2, d1), "C": (d1, 1)}
    total = 0
    for role in ROLES:
        kind = config.kind(role)
        _check_kind(layer, role, kind)
        if kind.tag == "none":
            continue
        if kind.tag == "scalar":
            total += 1
        elif kind.tag == "vector":
            total += d1 if role == "C" else d2
        else:
            rows, cols = out_in[role]
            total += kind.rank * (rows + cols)
    return total
