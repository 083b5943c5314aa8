"""Generalized low-rank adaptation on a small numpy autodiff core.

The pieces, bottom up:

* :mod:`glora.tensor`: dense matrices and a reverse-mode tape.
* :mod:`glora.layer`: the adapter layer, its support kinds and merging.
* :mod:`glora.compat`: LoRA / SSF / prompt / frozen special cases.
* :mod:`glora.supernet`: toy models, subnet sampling and training.
* :mod:`glora.search`: evolutionary search over layer configurations.
* :mod:`glora.synth`: teacher/student tasks with known optimal adapters.
* :mod:`glora.persist`: checkpoint and dataset files.
"""

from .errors import (
    ConfigurationError,
    ContractError,
    DivergenceError,
    FormatError,
    GLoRAError,
    ShapeError,
)
from .layer import (
    NONE,
    SCALAR,
    VECTOR,
    GLoRALinear,
    LayerConfig,
    LayerSearchSpace,
    MergedLinear,
    SupportKind,
    forward_adapter,
    forward_merged,
    lora,
    materialize_support,
    reparameterize,
    trainable_param_count,
    validate_config,
)
from .search import EvoSettings, FitnessRecord, evolve, search_space_size
from .supernet import ToyModel, TrainSchedule, build_model, pretrain, sample_subnet, train_supernet
from .synth import Dataset, ShiftSpec, gen_pretrain_task, gen_shifted_task
from .tensor import DenseMatrix, Tape, backward, precision, set_precision

__version__ = "0.1.0"
