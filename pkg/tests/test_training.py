"""Training loop: loss definition, determinism, checkpoints, divergence."""

import json
import math

import numpy as np
import pytest

from hytransformer import autodiff as ad
from hytransformer.data import DatasetError, KnowledgeGraph, Statement
from hytransformer.gradcheck import grad_check
from hytransformer.model import ModelConfig
from hytransformer.rng import stream
from hytransformer.synthetic import random_graph
from hytransformer.training import (
    DivergenceError,
    Trainer,
    TrainConfig,
    TrainingError,
    build_training_set,
    load_model,
    smoothed_bce_loss,
    train,
)


def small_model_cfg(**overrides) -> ModelConfig:
    base = dict(
        d_embed=8,
        d_hidden=8,
        n_layers=1,
        n_heads=2,
        max_seq_len=5,
        attn_dropout=0.0,
        ent_emb_dropout=0.0,
        head_dropout=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def small_graph(**overrides):
    base = dict(n_entities=12, n_relations=3, n_train=30,
                qualifier_fraction=0.5, max_qualifiers=1, seed=0)
    base.update(overrides)
    return random_graph(**base)


def read_loss_log(path):
    rows = []
    for line in path.read_text().splitlines():
        step, epoch, loss = line.split("\t")
        rows.append((int(step), int(epoch), float(loss)))
    return rows


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def test_smoothed_targets_example():
    # one positive, rest negative, eps=0.1, N=5: targets 0.92 / 0.02
    labels = np.array([[1.0, 0.0, 0.0, 0.0, 0.0]])
    probs_arr = np.full((1, 5), 0.5)
    with ad.using_dtype("float64"):
        probs = ad.tensor(probs_arr)
        loss = smoothed_bce_loss(probs, labels, eps=0.1, n_entities=5)
    targets = np.array([[0.92, 0.02, 0.02, 0.02, 0.02]])
    expected = -np.mean(targets * np.log(probs_arr) + (1 - targets) * np.log(1 - probs_arr))
    assert math.isclose(loss.item(), expected, rel_tol=1e-12)
    # at p=0.5 every term is log(2) regardless of target
    assert math.isclose(loss.item(), math.log(2.0), rel_tol=1e-12)


def test_zero_smoothing_is_plain_bce():
    rng = stream(0, "test/bce")
    labels = (rng.random((4, 7)) < 0.3).astype(np.float64)
    p = rng.uniform(0.05, 0.95, size=(4, 7))
    with ad.using_dtype("float64"):
        loss = smoothed_bce_loss(ad.tensor(p), labels, eps=0.0, n_entities=7)
    expected = -np.mean(labels * np.log(p) + (1 - labels) * np.log(1 - p))
    assert abs(loss.item() - expected) < 1e-6


def test_loss_clamps_saturated_probs():
    labels = np.array([[1.0, 0.0]])
    tiny = np.finfo(np.float64).tiny
    with ad.using_dtype("float64"):
        probs = ad.tensor(np.array([[tiny, 1.0 - 1e-16]]))
        loss = smoothed_bce_loss(probs, labels, eps=0.0, n_entities=2)
    assert np.isfinite(loss.item())
    # both terms hit the 1e-7 clamp: loss = -mean(log 1e-7, log 1e-7)
    assert math.isclose(loss.item(), -math.log(1e-7), rel_tol=1e-9)


def test_loss_gradient_through_sigmoid():
    rng = stream(1, "test/bce_grad")
    labels = (rng.random((3, 6)) < 0.4).astype(np.float64)
    with ad.using_dtype("float64"):
        logits = ad.tensor(rng.normal(0.0, 1.0, size=(3, 6)), requires_grad=True)

        def f():
            return smoothed_bce_loss(ad.sigmoid(logits), labels, eps=0.1, n_entities=6)

        err = grad_check(f, [logits])
    assert err < 1e-7


# ---------------------------------------------------------------------------
# Training-set construction
# ---------------------------------------------------------------------------


def test_build_training_set_counts(qualifier_graph):
    cfg = small_model_cfg(max_seq_len=7)
    with_aux = build_training_set(qualifier_graph, cfg, TrainConfig(use_aux_task=True))
    without = build_training_set(qualifier_graph, cfg, TrainConfig(use_aux_task=False))
    train_stmts = qualifier_graph.split_statements("train")
    n_quals = sum(s.n_qualifiers for s in train_stmts)
    assert len(without) == 2 * len(train_stmts)
    assert len(with_aux) == 2 * len(train_stmts) + n_quals


def test_build_training_set_requires_train_split():
    g = KnowledgeGraph(["a", "b"], ["r"], [Statement(0, 0, 1)], ["valid"])
    with pytest.raises(TrainingError, match="training split is empty"):
        build_training_set(g, small_model_cfg(), TrainConfig())


def test_build_training_set_rejects_short_max_seq_len(qualifier_graph):
    cfg = small_model_cfg(max_seq_len=5)  # longest statement needs 7
    with pytest.raises(TrainingError, match="too small"):
        build_training_set(qualifier_graph, cfg, TrainConfig())


def test_train_config_validation():
    for kwargs, msg in [
        (dict(label_smoothing=1.0), "label_smoothing"),
        (dict(batch_size=0), "batch_size"),
        (dict(lr=-0.1), "lr"),
        (dict(epochs=-1), "epochs"),
        (dict(eval_every=-2), "eval_every"),
    ]:
        with pytest.raises(TrainingError, match=msg):
            TrainConfig(**kwargs)


def test_train_config_round_trip():
    cfg = TrainConfig(lr=0.01, epochs=3, max_steps=7, use_aux_task=False)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


def _quick_train_cfg(**overrides) -> TrainConfig:
    base = dict(lr=0.01, epochs=40, batch_size=512, label_smoothing=0.0,
                use_aux_task=False, seed=0, eval_every=0)
    base.update(overrides)
    return TrainConfig(**base)


def test_loss_decreases(tmp_path):
    result = train(small_graph(), small_model_cfg(), _quick_train_cfg(), tmp_path)
    rows = read_loss_log(tmp_path / "loss.log")
    assert len(rows) == 40
    first = np.mean([r[2] for r in rows[:5]])
    last = np.mean([r[2] for r in rows[-5:]])
    assert last < first
    assert result.global_step == 40
    assert math.isclose(result.final_loss, rows[-1][2])


def test_loss_log_format(tmp_path):
    train(small_graph(), small_model_cfg(), _quick_train_cfg(epochs=3), tmp_path)
    lines = (tmp_path / "loss.log").read_text().splitlines()
    assert len(lines) == 3
    for i, line in enumerate(lines):
        step, epoch, loss = line.split("\t")
        assert int(step) == i and int(epoch) == i
        # repr round-trips the float exactly
        assert repr(float(loss)) == loss


def test_zero_lr_leaves_params_at_init(tmp_path):
    graph = small_graph()
    cfg = small_model_cfg()
    trainer = Trainer(graph, cfg, _quick_train_cfg(lr=0.0, epochs=5), tmp_path)
    before = {k: v.copy() for k, v in trainer.model.state_arrays().items()}
    trainer.run()
    after = trainer.model.state_arrays()
    for name, arr in before.items():
        assert np.array_equal(arr, after[name]), name


def test_same_seed_runs_are_byte_identical(tmp_path):
    graph = small_graph(n_valid=6)
    model_cfg = small_model_cfg(attn_dropout=0.1, ent_emb_dropout=0.2)
    cfg = _quick_train_cfg(epochs=4, eval_every=2, label_smoothing=0.1)
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        train(graph, model_cfg, cfg, d)
    for name in ("loss.log", "checkpoint_last.ckpt", "checkpoint_best.ckpt"):
        a = (dirs[0] / name).read_bytes()
        b = (dirs[1] / name).read_bytes()
        assert a == b, name
    # the timing column is wall clock; epoch and mrr must still agree
    for line_a, line_b in zip((dirs[0] / "mrr_vs_time.csv").read_text().splitlines(),
                              (dirs[1] / "mrr_vs_time.csv").read_text().splitlines(),
                              strict=True):
        assert line_a.split(",")[1:] == line_b.split(",")[1:]


def test_mrr_csv_written_with_validation(tmp_path):
    graph = small_graph(n_valid=6)
    result = train(graph, small_model_cfg(), _quick_train_cfg(epochs=4, eval_every=2),
                   tmp_path)
    lines = (tmp_path / "mrr_vs_time.csv").read_text().splitlines()
    assert lines[0] == "elapsed_s,epoch,mrr"
    assert len(lines) - 1 == len(result.validations) == 2
    assert result.best_mrr is not None
    assert result.best_checkpoint is not None and result.best_checkpoint.exists()


def test_resume_rejoins_trajectory(tmp_path):
    graph = small_graph()
    model_cfg = small_model_cfg(attn_dropout=0.1)
    straight_dir, part1, part2 = tmp_path / "straight", tmp_path / "p1", tmp_path / "p2"

    train(graph, model_cfg, _quick_train_cfg(epochs=6), straight_dir)
    train(graph, model_cfg, _quick_train_cfg(epochs=3), part1)
    resumed = Trainer.resume(graph, part1 / "checkpoint_last.ckpt", part2, epochs=6)
    resumed.run()

    joined = (part1 / "loss.log").read_bytes() + (part2 / "loss.log").read_bytes()
    assert joined == (straight_dir / "loss.log").read_bytes()
    assert (part2 / "checkpoint_last.ckpt").read_bytes() == \
        (straight_dir / "checkpoint_last.ckpt").read_bytes()


def test_resume_rejects_vocabulary_mismatch(tmp_path):
    graph = small_graph()
    train(graph, small_model_cfg(), _quick_train_cfg(epochs=1), tmp_path)
    other = small_graph(n_entities=15, seed=4)
    with pytest.raises(TrainingError, match="vocabulary mismatch"):
        Trainer.resume(other, tmp_path / "checkpoint_last.ckpt", tmp_path / "r")


def test_nan_parameters_raise_divergence_error(tmp_path):
    trainer = Trainer(small_graph(), small_model_cfg(), _quick_train_cfg(epochs=2),
                      tmp_path)
    trainer.model.params["in_proj_w"].values[0, 0] = np.nan
    with pytest.raises(DivergenceError, match="loss became"):
        trainer.run()


def test_load_model_restores_trained_weights(tmp_path):
    graph = small_graph()
    trainer = Trainer(graph, small_model_cfg(), _quick_train_cfg(epochs=3), tmp_path)
    trainer.run()
    model, meta = load_model(tmp_path / "checkpoint_last.ckpt")
    assert meta["global_step"] == 3
    for name, arr in trainer.model.state_arrays().items():
        assert np.array_equal(arr, model.state_arrays()[name]), name


def test_train_log_has_header_and_steps(tmp_path):
    train(small_graph(), small_model_cfg(), _quick_train_cfg(epochs=2), tmp_path)
    records = [json.loads(line)
               for line in (tmp_path / "train.log.jsonl").read_text().splitlines()]
    assert records[0]["event"] == "start"
    assert "train_config" in records[0] and "model_config" in records[0]
    steps = [r for r in records if "loss" in r]
    assert [r["step"] for r in steps] == [0, 1]
