"""Hyper-relational knowledge-graph completion toolkit.

Statements — (head, relation, tail) triplets decorated with qualifier
(relation, entity) pairs — are flattened into masked token sequences,
encoded by a Transformer built on an in-package reverse-mode autodiff
engine, and scored against every entity in the 1-N setting.  Instead of
a message-passing encoder over the graph, entity and relation embedding
tables get a lightweight layer-norm + dropout treatment whose per-step
cost is independent of the statement count; a micro-benchmark harness
verifies that scaling claim empirically.

Subpackage map: :mod:`~hytransformer.data` (statement store, vocab,
filtered-answer indexes), :mod:`~hytransformer.autodiff` (tensors and
gradients), :mod:`~hytransformer.model` (encoder + scoring),
:mod:`~hytransformer.training` (1-N loop), :mod:`~hytransformer.evaluation`
(filtered ranking), :mod:`~hytransformer.bench` (complexity checks),
:mod:`~hytransformer.cli` (the ``hyt`` command).
"""

__version__ = "0.1.0"

from .autodiff import Tensor, set_debug, set_default_dtype, using_dtype
from .bench import (
    BenchError,
    BenchReport,
    CostModelConfig,
    TimingRecord,
    aggregate_qualifiers,
    bench_report,
    fit_loglog,
    run_sweeps,
)
from .data import (
    CompletionQuery,
    DatasetError,
    FilterIndex,
    KnowledgeGraph,
    MaskedSlot,
    Statement,
    build_queries,
    load_dataset,
    one_n_labels,
    save_dataset,
)
from .evaluation import RankReport, evaluate, filtered_rank
from .gradcheck import grad_check, grad_check_directional
from .model import (
    HyTransformer,
    ModelConfig,
    ModelError,
    TokenSequence,
    batch_sequences,
    flatten,
)
from .optim import Adam, AdamState, adam_step
from .training import (
    DivergenceError,
    TrainConfig,
    Trainer,
    TrainingError,
    build_training_set,
    load_model,
    smoothed_bce_loss,
    train,
)

__all__ = [
    "__version__",
    "Adam",
    "AdamState",
    "BenchError",
    "BenchReport",
    "CompletionQuery",
    "CostModelConfig",
    "DatasetError",
    "DivergenceError",
    "FilterIndex",
    "HyTransformer",
    "KnowledgeGraph",
    "MaskedSlot",
    "ModelConfig",
    "ModelError",
    "RankReport",
    "Statement",
    "Tensor",
    "TimingRecord",
    "TokenSequence",
    "TrainConfig",
    "Trainer",
    "TrainingError",
    "adam_step",
    "aggregate_qualifiers",
    "batch_sequences",
    "bench_report",
    "build_queries",
    "build_training_set",
    "evaluate",
    "filtered_rank",
    "fit_loglog",
    "flatten",
    "grad_check",
    "grad_check_directional",
    "load_dataset",
    "load_model",
    "one_n_labels",
    "run_sweeps",
    "save_dataset",
    "set_debug",
    "set_default_dtype",
    "smoothed_bce_loss",
    "train",
    "using_dtype",
]
