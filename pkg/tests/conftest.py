"""Shared fixtures: global-state hygiene and small reusable graphs."""

import numpy as np
import pytest

from hytransformer import autodiff
from hytransformer.data import KnowledgeGraph, Statement


@pytest.fixture(autouse=True)
def _reset_numeric_globals():
    """Every test starts and ends in float32, debug off."""
    autodiff.set_default_dtype("float32")
    autodiff.set_debug(False)
    yield
    autodiff.set_default_dtype("float32")
    autodiff.set_debug(False)


@pytest.fixture
def tiny_graph() -> KnowledgeGraph:
    """Two entities, one relation, one training statement (a, r, b)."""
    return KnowledgeGraph(
        entity_names=["a", "b"],
        relation_names=["r"],
        statements=[Statement(0, 0, 1)],
        splits=["train"],
    )


@pytest.fixture
def qualifier_graph() -> KnowledgeGraph:
    """A small graph with qualifiers and all three splits.

    Entities a..e (ids 0..4), relations r0..r2.  The two train statements
    that share (head=0, rel=0, same qualifiers) make tails {1, 2}
    mutually filterable.
    """
    statements = [
        Statement(0, 0, 1, ((1, 3),)),
        Statement(0, 0, 2, ((1, 3),)),
        Statement(3, 1, 4),
        Statement(0, 0, 1, ((1, 4), (2, 2))),
        Statement(1, 2, 0),
        Statement(2, 1, 3, ((0, 0),)),
    ]
    splits = ["train", "train", "train", "train", "valid", "test"]
    return KnowledgeGraph(
        entity_names=["a", "b", "c", "d", "e"],
        relation_names=["r0", "r1", "r2"],
        statements=statements,
        splits=splits,
    )


def write_dataset_dir(directory, graph: KnowledgeGraph, fmt: str = "jsonl-statements",
                      write_manifests: bool = True):
    """Materialize a graph as an on-disk dataset directory; returns the path."""
    from hytransformer.data import save_dataset

    save_dataset(graph, directory, fmt=fmt, write_manifests=write_manifests)
    return directory


def rand_rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)
