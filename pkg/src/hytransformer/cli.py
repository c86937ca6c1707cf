"""Command-line entry point: ``hyt``.

Subcommands
    load-check   parse a dataset and print its vital statistics
    train        train a model, writing checkpoints, logs, and a manifest
    eval         rank a checkpoint on a split and print the report
    bench        run the complexity micro-benchmarks and fit slopes
    ablate       train the standard ablation grid with a shared seed
    describe     print effective defaults, formats, and model sizes

Conventions
    - Configuration layering: built-in defaults < flat key=value config
      file (``--config``) < explicit command-line flags.  The effective
      configuration is echoed at startup and recorded in the manifest.
    - Every training run writes ``manifest.json`` (config snapshot, seed,
      dataset checksum, code version, timestamps, output paths) before the
      first step and finalizes it on completion; re-running with
      ``--from-manifest`` reproduces the run bit for bit.
    - One live run per output directory, enforced by a lock file.
    - ``--data`` accepts a path, or a name resolved under $HYT_DATA_ROOT.
    - Exit codes: 0 success, 2 usage/configuration error, 3 numerical
      failure (training divergence).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .bench import BenchError, CostModelConfig, PHI_CHOICES, bench_report, run_sweeps
from .checkpoint import CheckpointError
from .data import (
    DatasetError,
    FORMAT_ALIASES,
    KnowledgeGraph,
    load_dataset,
    split_file,
)
from .evaluation import TIE_POLICIES, EvaluationError, evaluate
from .model import HyTransformer, ModelConfig, ModelError, required_length
from .training import (
    DivergenceError,
    TrainConfig,
    Trainer,
    TrainingError,
    load_model,
)

DATA_ROOT_ENV = "HYT_DATA_ROOT"
LOCK_NAME = ".hyt.lock"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

ABLATION_FLAGS = {
    "entity-ln": "use_entity_ln",
    "entity-dropout": "use_entity_dropout",
    "relation-ln": "use_relation_ln",
}

class UsageError(Exception):
    pass


_CONFIG_ERRORS = (
    DatasetError,
    ModelError,
    TrainingError,
    EvaluationError,
    BenchError,
    CheckpointError,
    UsageError,
)


class Lock:
    """Exclusive ownership of an output directory via a lock file."""

    def __init__(self, directory: Path):
        self.path = Path(directory) / LOCK_NAME
        self._fd: int | None = None

    def __enter__(self) -> "Lock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(
                f"output directory {self.path.parent} is locked by another run "
                f"(remove {self.path} if that run is dead)"
            ) from None
        os.write(self._fd, f"pid={os.getpid()}\n".encode())
        return self

    def __exit__(self, *exc) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self.path.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

_MODEL_KEYS = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _convert(key: str, raw: str, typename: str):
    t = typename.replace(" ", "")
    try:
        if t == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        if t in ("int|None", "Optional[int]"):
            return None if raw.lower() in ("none", "null", "") else int(raw)
    except ValueError as exc:
        raise UsageError(f"config key {key!r}: {exc}") from None
    return raw


def read_config_file(path: Path) -> dict[str, str]:
    """Flat ``key = value`` lines; blank lines and # comments ignored."""
    settings: dict[str, str] = {}
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"{path.name}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        settings[key.strip()] = value.strip()
    return settings


def apply_settings(model_kw: dict, train_kw: dict, settings: dict[str, str]) -> None:
    """Route flat config keys into the model/train keyword dicts."""
    for key, raw in settings.items():
        known = False
        if key in _MODEL_KEYS:
            model_kw[key] = _convert(key, raw, str(_MODEL_KEYS[key]))
            known = True
        if key in _TRAIN_KEYS:
            train_kw[key] = _convert(key, raw, str(_TRAIN_KEYS[key]))
            known = True
        if not known:
            raise UsageError(f"unknown config key {key!r}")


def build_configs(args: argparse.Namespace, graph: KnowledgeGraph | None,
                  manifest_config: dict | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Layer defaults < config file < manifest < explicit flags."""
    model_kw: dict = {}
    train_kw: dict = {}
    if getattr(args, "config", None):
        apply_settings(model_kw, train_kw, read_config_file(Path(args.config)))
    if manifest_config:
        model_kw.update(manifest_config.get("model", {}))
        train_kw.update(manifest_config.get("train", {}))
    flag_map = [
        ("lr", train_kw, "lr"), ("epochs", train_kw, "epochs"),
        ("batch_size", train_kw, "batch_size"), ("seed", train_kw, "seed"),
        ("eval_every", train_kw, "eval_every"), ("max_steps", train_kw, "max_steps"),
        ("d_embed", model_kw, "d_embed"), ("d_hidden", model_kw, "d_hidden"),
        ("n_layers", model_kw, "n_layers"), ("n_heads", model_kw, "n_heads"),
        ("max_seq_len", model_kw, "max_seq_len"),
    ]
    for attr, target, key in flag_map:
        value = getattr(args, attr, None)
        if value is not None:
            target[key] = value
    if getattr(args, "label_smoothing", None) is not None:
        # one knob, present in both configs
        model_kw["label_smoothing"] = args.label_smoothing
        train_kw["label_smoothing"] = args.label_smoothing
    if getattr(args, "aux", None) is not None:
        train_kw["use_aux_task"] = args.aux
    for name in getattr(args, "ablate", None) or []:
        model_kw[ABLATION_FLAGS[name]] = False
    if "max_seq_len" not in model_kw and graph is not None:
        model_kw["max_seq_len"] = required_length(graph.statements)
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw)
    except TypeError as exc:
        raise UsageError(f"bad configuration: {exc}") from None


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def _utcnow() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def dataset_checksum(path: Path, fmt: str) -> str:
    """SHA-256 over the split files (and vocab manifests) in a fixed order."""
    digest = hashlib.sha256()
    files: list[Path] = []
    if path.is_dir():
        for split in ("train", "valid", "test"):
            f = split_file(path, split, fmt)
            if f is not None:
                files.append(f)
        for name in ("entities.vocab", "relations.vocab"):
            f = path / name
            if f.exists():
                files.append(f)
    else:
        files.append(path)
    for f in files:
        digest.update(f.name.encode())
        digest.update(f.read_bytes())
    return digest.hexdigest()


def write_manifest(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def make_manifest(command: str, data_path: Path, fmt: str, model_cfg: ModelConfig,
                  train_cfg: TrainConfig, out_dir: Path) -> dict:
    return {
        "command": command,
        "version": __version__,
        "data_path": str(data_path),
        "format": fmt,
        "dataset_sha256": dataset_checksum(data_path, fmt),
        "config": {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
        "seed": train_cfg.seed,
        "started_at": _utcnow(),
        "finished_at": None,
        "status": "running",
        "outputs": {"dir": str(out_dir)},
    }


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def resolve_data(spec: str, fmt: str) -> tuple[Path, KnowledgeGraph]:
    path = Path(spec)
    if not path.exists():
        root = os.environ.get(DATA_ROOT_ENV)
        if root and (Path(root) / spec).exists():
            path = Path(root) / spec
        else:
            raise UsageError(f"data path {spec!r} not found"
                             + (f" (also tried under ${DATA_ROOT_ENV})" if root else ""))
    return path, load_dataset(path, fmt)


def echo_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> None:
    print("effective config:")
    print(json.dumps({"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
                     indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_load_check(args: argparse.Namespace) -> int:
    _, graph = resolve_data(args.data, args.format)
    counts = {s: len(graph.split_statements(s)) for s in graph.available_splits()}
    qual_hist: dict[int, int] = {}
    for stmt in graph.statements:
        qual_hist[stmt.n_qualifiers] = qual_hist.get(stmt.n_qualifiers, 0) + 1
    total_quals = sum(s.n_qualifiers for s in graph.statements)
    print(f"entities      {graph.n_entities}")
    print(f"relations     {graph.n_relations}")
    for split, n in counts.items():
        print(f"{split:<13} {n} statements")
    print(f"qualifier pairs {total_quals}")
    print("qualifier-count histogram: "
          + ", ".join(f"{n}: {c}" for n, c in sorted(qual_hist.items())))
    print(f"longest statement {required_length(graph.statements)} tokens")
    print("ok")
    return EXIT_OK


def _run_training(args: argparse.Namespace, graph: KnowledgeGraph, data_path: Path,
                  model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir: Path) -> int:
    manifest_path = out_dir / "manifest.json"
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.resume:
        last = out_dir / "checkpoint_last.ckpt"
        if not last.exists():
            raise UsageError(f"--resume: no checkpoint at {last}")
        trainer = Trainer.resume(graph, last, out_dir,
                                 epochs=args.epochs, max_steps=args.max_steps)
        # a resumed run keeps the checkpoint's configuration (run length aside)
        model_cfg, train_cfg = trainer.model_cfg, trainer.cfg
    else:
        trainer = Trainer(graph, model_cfg, train_cfg, out_dir)
    manifest = make_manifest("train", data_path, args.format, model_cfg, train_cfg, out_dir)
    write_manifest(manifest_path, manifest)
    try:
        result = trainer.run()
    except DivergenceError:
        manifest["status"] = "failed"
        manifest["finished_at"] = _utcnow()
        write_manifest(manifest_path, manifest)
        raise
    manifest["status"] = "complete"
    manifest["finished_at"] = _utcnow()
    manifest["outputs"].update({
        "checkpoint_last": str(result.last_checkpoint),
        "checkpoint_best": str(result.best_checkpoint) if result.best_checkpoint else None,
        "train_log": str(out_dir / "train.log.jsonl"),
        "loss_log": str(out_dir / "loss.log"),
    })
    manifest["result"] = {
        "global_step": result.global_step,
        "epochs_run": result.epochs_run,
        "final_loss": result.final_loss,
        "best_mrr": result.best_mrr,
        "best_epoch": result.best_epoch,
    }
    write_manifest(manifest_path, manifest)
    print(f"trained {result.global_step} steps ({result.epochs_run} epochs); "
          f"final loss {result.final_loss:.6f}")
    if result.best_mrr is not None:
        print(f"best validation MRR {result.best_mrr:.4f} at epoch {result.best_epoch}")
    print(f"outputs in {out_dir}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    data_path, graph = resolve_data(args.data, args.format)
    manifest_config = None
    if args.from_manifest:
        stored = json.loads(Path(args.from_manifest).read_text(encoding="utf-8"))
        manifest_config = stored.get("config", {})
    model_cfg, train_cfg = build_configs(args, graph, manifest_config)
    echo_config(model_cfg, train_cfg)
    out_dir = Path(args.out)
    with Lock(out_dir):
        return _run_training(args, graph, data_path, model_cfg, train_cfg, out_dir)


def cmd_eval(args: argparse.Namespace) -> int:
    _, graph = resolve_data(args.data, args.format)
    model, _ = load_model(args.checkpoint)
    report = evaluate(model, graph, args.split, tie_policy=args.tie_policy,
                      include_aux=args.include_aux)
    print(report.table(breakdown=args.breakdown == "qualifiers"))
    record_path = Path(args.record) if args.record else Path(args.checkpoint).parent / "eval_records.jsonl"
    with open(record_path, "a", encoding="utf-8") as fh:
        fh.write(report.to_jsonl() + "\n")
    print(f"record appended to {record_path}")
    return EXIT_OK


def _parse_sweeps(specs: list[str], cfg_kw: dict) -> None:
    for spec in specs:
        if "=" not in spec:
            raise UsageError(f"--sweep expects axis=v1,v2,...: got {spec!r}")
        axis, _, values = spec.partition("=")
        axis = axis.strip().lower()
        if axis not in ("z", "d", "n"):
            raise UsageError(f"unknown sweep axis {axis!r}; expected z, d, or n")
        try:
            parsed = tuple(int(v) for v in values.split(",") if v.strip())
        except ValueError as exc:
            raise UsageError(f"--sweep {spec!r}: {exc}") from None
        cfg_kw[f"{axis}_sweep"] = parsed


def cmd_bench(args: argparse.Namespace) -> int:
    cfg_kw: dict = {
        "gnn_layers": args.gnn_layers,
        "phi": args.phi,
        "repetitions": args.reps,
    }
    if args.data:
        _, graph = resolve_data(args.data, args.format)
        cfg_kw["base_n_entities"] = graph.n_entities
        cfg_kw["base_n_relations"] = graph.n_relations
        cfg_kw["base_z"] = graph.n_statements
    _parse_sweeps(args.sweep or [], cfg_kw)
    cfg = CostModelConfig(**cfg_kw)
    records = run_sweeps(cfg, seed=args.seed, progress=lambda m: print(f"  sweep {m}"))
    report = bench_report(records)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_csv(), encoding="utf-8")
        print(f"csv written to {args.out}")
    return EXIT_OK


ABLATION_SUITE = [
    ("full", {}),
    ("w/o entity embedding LN", {"use_entity_ln": False}),
    ("w/o entity embedding dropout", {"use_entity_dropout": False}),
    ("w/o relation embedding LN", {"use_relation_ln": False}),
    ("HT w/o aux", {"use_aux_task": False}),
]


def _slug(label: str) -> str:
    return label.replace("w/o", "no").replace(" ", "-").lower()


def cmd_ablate(args: argparse.Namespace) -> int:
    data_path, graph = resolve_data(args.data, args.format)
    base_model_cfg, base_train_cfg = build_configs(args, graph)
    echo_config(base_model_cfg, base_train_cfg)
    splits = graph.available_splits()
    eval_split = args.split or ("test" if "test" in splits else "valid")
    if eval_split not in splits:
        raise UsageError(f"no {eval_split!r} split to evaluate on (loaded: {splits})")
    out_dir = Path(args.out)
    with Lock(out_dir):
        out_dir.mkdir(parents=True, exist_ok=True)
        suite = {
            "command": "ablate",
            "version": __version__,
            "seed": base_train_cfg.seed,  # one seed shared by every variant
            "data_path": str(data_path),
            "dataset_sha256": dataset_checksum(data_path, args.format),
            "config": {"model": base_model_cfg.to_dict(), "train": base_train_cfg.to_dict()},
            "eval_split": eval_split,
            "started_at": _utcnow(),
            "variants": {},
        }
        rows = []
        for label, overrides in ABLATION_SUITE:
            model_kw = base_model_cfg.to_dict()
            train_kw = base_train_cfg.to_dict()
            for key, value in overrides.items():
                (train_kw if key in _TRAIN_KEYS else model_kw)[key] = value
            model_cfg = ModelConfig(**model_kw)
            train_cfg = TrainConfig(**train_kw)
            run_dir = out_dir / _slug(label)
            print(f"[{label}] training into {run_dir}")
            result = Trainer(graph, model_cfg, train_cfg, run_dir).run()
            ckpt = result.best_checkpoint or result.last_checkpoint
            model, _ = load_model(ckpt)
            report = evaluate(model, graph, eval_split)
            rows.append((label, report))
            suite["variants"][label] = {
                "dir": str(run_dir),
                "checkpoint": str(ckpt),
                "mrr": report.mrr,
                "h1": report.h1,
                "h10": report.h10,
            }
        suite["finished_at"] = _utcnow()
        write_manifest(out_dir / "ablate_manifest.json", suite)

        full_mrr = rows[0][1].mrr
        lines = [f"ablations on split={eval_split} (seed {base_train_cfg.seed})",
                 f"{'variant':<32} {'MRR':>8} {'H@1':>8} {'H@10':>8} {'ΔMRR':>8}"]
        for label, rep in rows:
            lines.append(f"{label:<32} {rep.mrr:>8.4f} {rep.h1:>8.4f} {rep.h10:>8.4f} "
                         f"{rep.mrr - full_mrr:>+8.4f}")
        table = "\n".join(lines)
        print(table)
        (out_dir / "ablate_report.txt").write_text(table + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_describe(args: argparse.Namespace) -> int:
    print(f"hytransformer {__version__}")
    print("hyper-relational knowledge-graph completion: masked-statement "
          "transformer encoder with lightweight embedding processing")
    print()
    print("dataset formats: " + ", ".join(sorted(set(FORMAT_ALIASES.values())))
          + f"   (aliases: {', '.join(sorted(FORMAT_ALIASES))})")
    print("subcommands: load-check, train, eval, bench, ablate, describe")
    print()
    model_cfg, train_cfg = ModelConfig(), TrainConfig()
    print("defaults:")
    print(json.dumps({"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
                     indent=2, sort_keys=True))
    if args.data:
        _, graph = resolve_data(args.data, args.format)
        cfg = ModelConfig(max_seq_len=required_length(graph.statements))
        model = HyTransformer(cfg, graph.n_entities, graph.n_relations)
        print()
        print(f"dataset: {graph.n_entities} entities, {graph.n_relations} relations, "
              f"{graph.n_statements} statements")
        print(f"model at defaults: {model.n_parameters():,} parameters "
              f"(max_seq_len {cfg.max_seq_len})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_data_arg(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", required=required, default=None,
                   help=f"dataset directory/file, or a name under ${DATA_ROOT_ENV}")
    p.add_argument("--format", default="jsonl-statements",
                   help=f"dataset file format: {', '.join(sorted(FORMAT_ALIASES))}")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--label-smoothing", dest="label_smoothing", type=float, default=None)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=None)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.add_argument("--d-embed", dest="d_embed", type=int, default=None)
    p.add_argument("--d-hidden", dest="d_hidden", type=int, default=None)
    p.add_argument("--n-layers", dest="n_layers", type=int, default=None)
    p.add_argument("--n-heads", dest="n_heads", type=int, default=None)
    p.add_argument("--max-seq-len", dest="max_seq_len", type=int, default=None)
    aux = p.add_mutually_exclusive_group()
    aux.add_argument("--aux", dest="aux", action="store_true", default=None,
                     help="train with the qualifier-entity auxiliary task (default)")
    aux.add_argument("--no-aux", dest="aux", action="store_false", default=None,
                     help="drop the auxiliary task")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyt",
                                     description="hyper-relational KG completion toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("load-check", help="parse and validate a dataset")
    _add_data_arg(p)
    p.set_defaults(fn=cmd_load_check)

    p = sub.add_parser("train", help="train a model")
    _add_data_arg(p)
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="output directory for this run")
    p.add_argument("--ablate", action="append", choices=sorted(ABLATION_FLAGS),
                   help="disable one embedding-processing component (repeatable)")
    p.add_argument("--resume", action="store_true",
                   help="continue from checkpoint_last.ckpt in --out")
    p.add_argument("--from-manifest", help="re-run the configuration stored in a manifest")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_data_arg(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--tie-policy", choices=TIE_POLICIES, default="mean")
    p.add_argument("--include-aux", action="store_true",
                   help="also rank qualifier-entity queries (separate section)")
    p.add_argument("--breakdown", choices=["qualifiers"], default=None,
                   help="print per-qualifier-count rows")
    p.add_argument("--record", help="path for the machine-readable record "
                                    "(default: eval_records.jsonl next to the checkpoint)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="complexity micro-benchmarks")
    _add_data_arg(p, required=False)
    p.add_argument("--sweep", action="append",
                   help="axis=v1,v2,... with axis in {z, d, n} (repeatable)")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--phi", choices=PHI_CHOICES, default="product")
    p.add_argument("--gnn-layers", dest="gnn_layers", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the per-point timings as CSV")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("ablate", help="train the standard ablation grid")
    _add_data_arg(p)
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default=None, help="evaluation split (default: test, else valid)")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("describe", help="print defaults, formats, and sizes")
    _add_data_arg(p, required=False)
    p.set_defaults(fn=cmd_describe)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors already; normalize --version/help to 0
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
