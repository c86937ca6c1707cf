"""1-N training loop: smoothed binary cross-entropy over all entities.

Each training query is a statement with one masked slot; the label row
marks every entity that answers the same query pattern within the
training split (multi-label 1-N supervision, no negative sampling).
Head and tail queries are always present; with the auxiliary task on,
one extra query per qualifier pair (mask the qualifier entity) joins the
pool and all queries are shuffled together uniformly.

Per optimizer step: process the embedding tables once, encode the batch,
score against all entities, take the label-smoothed BCE mean, run one
Adam update.  Shuffles are keyed by (seed, epoch) and dropout masks by
(seed, site, step) through counter-based random streams, so a run is a
pure function of (data, config, seed): re-running reproduces checkpoints
and loss logs byte for byte, and a resumed run rejoins the exact
trajectory of an uninterrupted one.

Two log artifacts: ``train.log.jsonl`` (per-step records with wall-clock
timings, plus validation records) and ``loss.log`` (timing-free per-step
loss lines, the file determinism checks compare).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load as load_checkpoint
from .checkpoint import save as save_checkpoint
from .data import CompletionQuery, FilterIndex, KnowledgeGraph, build_queries, one_n_labels
from .evaluation import evaluate
from .model import (
    HyTransformer,
    ModelConfig,
    TokenSequence,
    batch_sequences,
    flatten,
    model_from_meta,
    required_length,
)
from .optim import AdamState, adam_step
from .rng import stream

PROB_CLAMP = 1e-7


class TrainingError(Exception):
    pass


class DivergenceError(TrainingError):
    """Loss became non-finite; message carries the offending batch."""


@dataclass
class TrainConfig:
    lr: float = 0.0001
    epochs: int = 400
    batch_size: int = 128
    label_smoothing: float = 0.1
    use_aux_task: bool = True
    seed: int = 0
    eval_every: int = 10  # epochs between validation passes; 0 disables
    max_steps: int | None = None  # optional hard cap on optimizer steps

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise TrainingError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise TrainingError(f"lr must be >= 0, got {self.lr}")
        if self.epochs < 0:
            raise TrainingError(f"epochs must be >= 0, got {self.epochs}")
        if self.eval_every < 0:
            raise TrainingError(f"eval_every must be >= 0, got {self.eval_every}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass(frozen=True)
class TrainExample:
    """One training query, pre-flattened."""

    sequence: TokenSequence
    query: CompletionQuery


def build_training_set(graph: KnowledgeGraph, model_cfg: ModelConfig,
                       train_cfg: TrainConfig) -> list[TrainExample]:
    """Flatten every training query: head + tail per statement, plus one
    qualifier-entity query per qualifier pair when the aux task is on.

    Label rows come from the training split only, so validation and test
    answers never leak into the targets.
    """
    if "train" not in graph.available_splits() or not graph.split_statements("train"):
        raise TrainingError("training split is empty")
    need = required_length(graph.statements)
    if model_cfg.max_seq_len < need:
        raise TrainingError(
            f"max_seq_len={model_cfg.max_seq_len} too small for this dataset "
            f"(longest statement needs {need} tokens)"
        )
    train_index = FilterIndex(graph, splits=("train",))
    queries = build_queries(graph, "train", include_aux=train_cfg.use_aux_task,
                            filter_index=train_index, train_index=train_index)
    return [
        TrainExample(flatten(q.source, q.masked_slot, model_cfg.max_seq_len), q)
        for q in queries
    ]


def smoothed_bce_loss(probs: Tensor, labels: np.ndarray, eps: float, n_entities: int) -> Tensor:
    """Mean binary cross-entropy against smoothed targets y(1−ε) + ε/N.

    ``probs`` are per-entity probabilities in (0, 1); both log arguments
    are clamped at 1e-7 so saturated probabilities cannot produce
    infinities.  Differentiable scalar output.
    """
    targets = labels * (1.0 - eps) + eps / n_entities
    dt = probs.values.dtype
    pos = ad.mul(ad.log(ad.clip(probs, PROB_CLAMP, 1.0)), targets.astype(dt))
    one_minus_p = ad.add(ad.mul(probs, -1.0), 1.0)
    neg = ad.mul(ad.log(ad.clip(one_minus_p, PROB_CLAMP, 1.0)), (1.0 - targets).astype(dt))
    return ad.mul(ad.tmean(ad.add(pos, neg)), -1.0)


@dataclass
class TrainResult:
    out_dir: Path
    last_checkpoint: Path
    best_checkpoint: Path | None
    global_step: int
    epochs_run: int
    final_loss: float
    best_mrr: float | None
    best_epoch: int | None
    validations: list[dict] = field(default_factory=list)


class Trainer:
    """Owns the model, optimizer state, logs, and checkpoint files for one run."""

    def __init__(self, graph: KnowledgeGraph, model_cfg: ModelConfig,
                 train_cfg: TrainConfig, out_dir: str | Path):
        self.graph = graph
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        self.model = HyTransformer(model_cfg, graph.n_entities, graph.n_relations,
                                   seed=train_cfg.seed)
        self.opt_state = AdamState(lr=train_cfg.lr).init(self.model.parameters())
        self.examples = build_training_set(graph, model_cfg, train_cfg)
        self._has_valid = "valid" in graph.available_splits() and bool(
            graph.split_statements("valid"))
        self._filter_index = FilterIndex(graph) if self._has_valid else None

        self.next_epoch = 0
        self.global_step = 0
        self.best_mrr: float | None = None
        self.best_epoch: int | None = None
        self.final_loss = float("nan")
        self.validations: list[dict] = []
        self._start_time = time.monotonic()

    # -- paths ----------------------------------------------------------------

    @property
    def last_path(self) -> Path:
        return self.out_dir / "checkpoint_last.ckpt"

    @property
    def best_path(self) -> Path:
        return self.out_dir / "checkpoint_best.ckpt"

    @property
    def train_log_path(self) -> Path:
        return self.out_dir / "train.log.jsonl"

    @property
    def loss_log_path(self) -> Path:
        return self.out_dir / "loss.log"

    # -- logging ----------------------------------------------------------------

    def _log(self, record: dict) -> None:
        with open(self.train_log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _log_loss(self, step: int, epoch: int, loss: float) -> None:
        with open(self.loss_log_path, "a", encoding="utf-8") as fh:
            fh.write(f"{step}\t{epoch}\t{loss!r}\n")

    def _log_header(self) -> None:
        self._log({
            "event": "start",
            "train_config": self.cfg.to_dict(),
            "model_config": self.model_cfg.to_dict(),
            "n_entities": self.graph.n_entities,
            "n_relations": self.graph.n_relations,
            "n_train_examples": len(self.examples),
            "aux_batching": "uniformly mixed",
        })

    # -- one optimizer step ------------------------------------------------------

    def _step(self, examples: list[TrainExample], epoch: int) -> float:
        step = self.global_step
        batch = batch_sequences([ex.sequence for ex in examples])
        labels = one_n_labels([ex.query for ex in examples], self.graph.n_entities)
        logits = self.model.forward_logits(batch, mode="train", step=step)
        probs = ad.sigmoid(logits)
        loss = smoothed_bce_loss(probs, labels, self.cfg.label_smoothing, self.graph.n_entities)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(self._divergence_message(value, epoch, step, examples))
        self.model.zero_grad()
        loss.backward()
        grads = {name: p.grad for name, p in self.model.parameters().items()
                 if p.grad is not None}
        adam_step(self.model.parameters(), grads, self.opt_state)
        self.global_step += 1
        return value

    def _divergence_message(self, value: float, epoch: int, step: int,
                            examples: list[TrainExample]) -> str:
        preview = []
        for ex in examples[:3]:
            s = ex.query.source
            preview.append(f"({s.head}, {s.relation}, {s.tail}, {list(s.qualifiers)})"
                           f" masked={ex.query.masked_slot.kind}")
        return (
            f"loss became {value} at step {step} (epoch {epoch}); "
            f"batch of {len(examples)} queries, first statements: {'; '.join(preview)}. "
            "Try a lower lr or the 64-bit debug mode to locate the overflow."
        )

    # -- epochs -------------------------------------------------------------------

    def _epoch_batches(self, epoch: int) -> list[list[TrainExample]]:
        order = stream(self.cfg.seed, "shuffle", epoch).permutation(len(self.examples))
        bs = self.cfg.batch_size
        return [[self.examples[i] for i in order[start:start + bs]]
                for start in range(0, len(order), bs)]

    def _validate(self, epoch: int) -> None:
        report = evaluate(self.model, self.graph, "valid", filter_index=self._filter_index)
        elapsed = time.monotonic() - self._start_time
        self._log({"epoch": epoch, "mrr": report.mrr, "h1": report.h1, "h10": report.h10,
                   "elapsed_s": elapsed})
        self.validations.append({"epoch": epoch, "mrr": report.mrr, "h1": report.h1,
                                 "h10": report.h10, "elapsed_s": elapsed})
        if self.best_mrr is None or report.mrr >= self.best_mrr:
            # >= : ties go to the later epoch
            self.best_mrr = report.mrr
            self.best_epoch = epoch
            self.save_checkpoint(self.best_path)

    def run(self) -> TrainResult:
        if self.next_epoch == 0:
            self._log_header()

        def capped() -> bool:
            return self.cfg.max_steps is not None and self.global_step >= self.cfg.max_steps

        epoch = self.next_epoch
        last_validated = -1
        while epoch < self.cfg.epochs and not capped():
            for batch in self._epoch_batches(epoch):
                if capped():
                    break
                t0 = time.monotonic()
                value = self._step(batch, epoch)
                self.final_loss = value
                self._log({"step": self.global_step - 1, "epoch": epoch, "loss": value,
                           "lr": self.cfg.lr, "elapsed_s": time.monotonic() - t0})
                self._log_loss(self.global_step - 1, epoch, value)
            self.next_epoch = epoch + 1
            if (self._has_valid and self.cfg.eval_every
                    and (epoch + 1) % self.cfg.eval_every == 0):
                self._validate(epoch)
                last_validated = epoch
            epoch += 1
        if (self._has_valid and self.cfg.eval_every and epoch > 0
                and last_validated != epoch - 1):
            # the run ended between scheduled validations; score the final state
            self._validate(epoch - 1)
        self.save_checkpoint(self.last_path)
        self._write_mrr_csv()
        return TrainResult(
            out_dir=self.out_dir,
            last_checkpoint=self.last_path,
            best_checkpoint=self.best_path if self.best_path.exists() else None,
            global_step=self.global_step,
            epochs_run=self.next_epoch,
            final_loss=self.final_loss,
            best_mrr=self.best_mrr,
            best_epoch=self.best_epoch,
            validations=self.validations,
        )

    def _write_mrr_csv(self) -> None:
        if not self.validations:
            return
        path = self.out_dir / "mrr_vs_time.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("elapsed_s,epoch,mrr\n")
            for v in self.validations:
                fh.write(f"{v['elapsed_s']},{v['epoch']},{v['mrr']}\n")

    # -- checkpointing ----------------------------------------------------------

    def save_checkpoint(self, path: Path) -> None:
        tensors: dict[str, np.ndarray] = {}
        for name in sorted(self.model.parameters()):
            tensors[f"param/{name}"] = self.model.parameters()[name].values
        for name in sorted(self.opt_state.m):
            tensors[f"adam_m/{name}"] = self.opt_state.m[name]
            tensors[f"adam_v/{name}"] = self.opt_state.v[name]
        meta = {
            **self.model.meta(),
            "train_config": self.cfg.to_dict(),
            "adam_step": self.opt_state.step,
            "next_epoch": self.next_epoch,
            "global_step": self.global_step,
            "best_mrr": self.best_mrr,
            "best_epoch": self.best_epoch,
        }
        save_checkpoint(path, tensors, meta)

    @classmethod
    def resume(cls, graph: KnowledgeGraph, checkpoint_path: str | Path,
               out_dir: str | Path, epochs: int | None = None,
               max_steps: int | None = None) -> "Trainer":
        """Rebuild a trainer mid-run; continues the identical trajectory.

        The checkpoint pins the configuration; only the run-length knobs
        (``epochs``, ``max_steps``) may be overridden, e.g. to extend a
        finished run.
        """
        tensors, meta = load_checkpoint(checkpoint_path)
        model_cfg = ModelConfig.from_dict(meta["model_config"])
        cfg_dict = dict(meta["train_config"])
        if epochs is not None:
            cfg_dict["epochs"] = epochs
        if max_steps is not None:
            cfg_dict["max_steps"] = max_steps
        train_cfg = TrainConfig.from_dict(cfg_dict)
        trainer = cls(graph, model_cfg, train_cfg, out_dir)
        if (meta["n_entities"], meta["n_relations"]) != (graph.n_entities, graph.n_relations):
            raise TrainingError(
                f"vocabulary mismatch: checkpoint has {meta['n_entities']} entities / "
                f"{meta['n_relations']} relations, dataset has "
                f"{graph.n_entities} / {graph.n_relations}"
            )
        params = {k.removeprefix("param/"): v for k, v in tensors.items()
                  if k.startswith("param/")}
        trainer.model.load_state_arrays(params)
        for key, arr in tensors.items():
            if key.startswith("adam_m/"):
                trainer.opt_state.m[key.removeprefix("adam_m/")] = arr.copy()
            elif key.startswith("adam_v/"):
                trainer.opt_state.v[key.removeprefix("adam_v/")] = arr.copy()
        trainer.opt_state.step = meta["adam_step"]
        trainer.next_epoch = meta["next_epoch"]
        trainer.global_step = meta["global_step"]
        trainer.best_mrr = meta["best_mrr"]
        trainer.best_epoch = meta["best_epoch"]
        return trainer


def train(graph: KnowledgeGraph, model_cfg: ModelConfig, train_cfg: TrainConfig,
          out_dir: str | Path) -> TrainResult:
    """Run a full training job into ``out_dir``; see :class:`Trainer`."""
    return Trainer(graph, model_cfg, train_cfg, out_dir).run()


def load_model(checkpoint_path: str | Path) -> tuple[HyTransformer, dict]:
    """Instantiate a model from a training checkpoint; returns (model, meta)."""
    tensors, meta = load_checkpoint(checkpoint_path)
    model = model_from_meta(meta)
    params = {k.removeprefix("param/"): v for k, v in tensors.items() if k.startswith("param/")}
    model.load_state_arrays(params)
    return model, meta
