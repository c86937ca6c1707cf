"""Statement store: parsing, vocabularies, filter index, query construction.

The filter index and label matrices are checked against brute-force
scans that re-derive the answer sets directly from the definition.
"""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hytransformer.data import (
    HEAD_SLOT,
    TAIL_SLOT,
    CompletionQuery,
    DatasetError,
    FilterIndex,
    KnowledgeGraph,
    MaskedSlot,
    Statement,
    build_queries,
    canonical_format,
    load_dataset,
    one_n_labels,
    parse_statements_file,
    pattern_key,
    qualifier_slot,
    read_vocab,
    save_dataset,
    statement_slots,
    write_vocab,
)

from conftest import write_dataset_dir


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------


def test_statement_token_length():
    assert Statement(0, 0, 1).token_length == 3
    assert Statement(0, 0, 1, ((0, 2), (1, 3))).token_length == 7
    assert Statement(0, 0, 1).n_qualifiers == 0


def test_masked_slot_validation():
    assert MaskedSlot("head").index is None
    assert qualifier_slot(2) == MaskedSlot("qualifier", 2)
    with pytest.raises(ValueError):
        MaskedSlot("middle")
    with pytest.raises(ValueError):
        MaskedSlot("qualifier")
    with pytest.raises(ValueError):
        MaskedSlot("qualifier", -1)
    with pytest.raises(ValueError):
        MaskedSlot("head", 0)


def test_completion_query_requires_gold_in_filter():
    stmt = Statement(0, 0, 1)
    with pytest.raises(ValueError, match="gold"):
        CompletionQuery(stmt, TAIL_SLOT, gold=1, filter_answers=frozenset({0}))
    q = CompletionQuery(stmt, TAIL_SLOT, gold=1, filter_answers=frozenset({0, 1}))
    assert q.gold == 1


def test_completion_query_qualifier_index_bounded():
    stmt = Statement(0, 0, 1, ((0, 2),))
    with pytest.raises(ValueError, match="qualifier index"):
        CompletionQuery(stmt, qualifier_slot(1), gold=2, filter_answers=frozenset({2}))


def test_graph_validation_errors():
    with pytest.raises(DatasetError, match="no statements"):
        KnowledgeGraph(["a"], ["r"], [], [])
    with pytest.raises(DatasetError, match="entity id"):
        KnowledgeGraph(["a"], ["r"], [Statement(0, 0, 5)], ["train"])
    with pytest.raises(DatasetError, match="relation id"):
        KnowledgeGraph(["a", "b"], ["r"], [Statement(0, 3, 1)], ["train"])
    with pytest.raises(DatasetError, match="duplicate entity"):
        KnowledgeGraph(["a", "a"], ["r"], [Statement(0, 0, 1)], ["train"])
    with pytest.raises(ValueError, match="parallel"):
        KnowledgeGraph(["a", "b"], ["r"], [Statement(0, 0, 1)], [])


def test_unknown_split_rejected(tiny_graph):
    with pytest.raises(DatasetError, match="unknown split"):
        tiny_graph.split_statements("dev")


def test_available_splits_ordered(qualifier_graph):
    assert qualifier_graph.available_splits() == ["train", "valid", "test"]


# ---------------------------------------------------------------------------
# Parsing / loading
# ---------------------------------------------------------------------------


def test_canonical_format_aliases():
    assert canonical_format("jsonl") == "jsonl-statements"
    assert canonical_format("tsv") == "tsv-flat"
    with pytest.raises(DatasetError, match="unknown dataset format"):
        canonical_format("csv")


def test_load_single_statement_file(tmp_path):
    f = tmp_path / "train.jsonl"
    f.write_text('{"head": "a", "relation": "r", "tail": "b"}\n')
    g = load_dataset(f)
    assert (g.n_entities, g.n_relations, g.n_statements) == (2, 1, 1)
    assert g.statements[0] == Statement(0, 0, 1)
    assert g.statements[0].n_qualifiers == 0


def test_load_empty_file_reports_no_statements(tmp_path):
    f = tmp_path / "train.jsonl"
    f.write_text("\n# only a comment\n")
    with pytest.raises(DatasetError, match="no statements"):
        load_dataset(f)


def test_parse_error_carries_line_number(tmp_path):
    f = tmp_path / "train.jsonl"
    f.write_text('{"head": "a", "relation": "r", "tail": "b"}\nnot json\n')
    with pytest.raises(DatasetError, match=r"train\.jsonl:2"):
        load_dataset(f)


def test_jsonl_missing_field_error(tmp_path):
    f = tmp_path / "train.jsonl"
    f.write_text('{"head": "a", "tail": "b"}\n')
    with pytest.raises(DatasetError, match="missing fields"):
        load_dataset(f)


def test_tsv_odd_qualifier_fields_error(tmp_path):
    f = tmp_path / "train.tsv"
    f.write_text("a\tr\tb\tq1\n")
    with pytest.raises(DatasetError, match="pairs"):
        load_dataset(f, fmt="tsv-flat")


def test_tsv_round_trip_with_qualifiers(tmp_path):
    f = tmp_path / "train.tsv"
    f.write_text("a\tr\tb\tq\tx\tq\ty\nb\tr\ta\n")
    g = load_dataset(f, fmt="tsv")
    assert g.n_statements == 2
    assert g.statements[0].qualifiers == ((1, 2), (1, 3))


def test_blank_and_comment_lines_ignored(tmp_path):
    f = tmp_path / "train.jsonl"
    f.write_text('\n# header\n{"head": "a", "relation": "r", "tail": "b"}\n\n')
    assert load_dataset(f).n_statements == 1


def test_first_appearance_id_order(tmp_path):
    f = tmp_path / "train.jsonl"
    f.write_text(
        '{"head": "z", "relation": "r2", "tail": "a"}\n'
        '{"head": "a", "relation": "r1", "tail": "m", "qualifiers": [["r2", "k"]]}\n'
    )
    g = load_dataset(f)
    assert g.entity_names == ["z", "a", "m", "k"]
    assert g.relation_names == ["r2", "r1"]


def test_directory_requires_train_split(tmp_path):
    (tmp_path / "valid.jsonl").write_text('{"head": "a", "relation": "r", "tail": "b"}\n')
    with pytest.raises(DatasetError, match="no train split"):
        load_dataset(tmp_path)


def test_vocab_manifest_pins_ids(tmp_path, qualifier_graph):
    write_dataset_dir(tmp_path, qualifier_graph)
    # rewrite the entity manifest with a permuted order; ids must follow it
    names = list(qualifier_graph.entity_names)
    permuted = names[::-1]
    write_vocab(tmp_path / "entities.vocab", permuted)
    g = load_dataset(tmp_path)
    assert g.entity_names == permuted
    # the underlying (name-level) statements are unchanged
    assert sorted(g.statement_names(s) for s in g.statements) == sorted(
        qualifier_graph.statement_names(s) for s in qualifier_graph.statements
    )


def test_vocab_manifest_unknown_name_rejected(tmp_path, qualifier_graph):
    write_dataset_dir(tmp_path, qualifier_graph)
    write_vocab(tmp_path / "entities.vocab", ["only", "two"])
    with pytest.raises(DatasetError, match="not in pinned"):
        load_dataset(tmp_path)


def test_read_vocab_errors(tmp_path):
    p = tmp_path / "v.vocab"
    p.write_text("a\t0\nb\tx\n")
    with pytest.raises(DatasetError, match="not an integer"):
        read_vocab(p)
    p.write_text("a\t0\nb\t0\n")
    with pytest.raises(DatasetError, match="duplicate id"):
        read_vocab(p)
    p.write_text("a\t0\nb\t2\n")
    with pytest.raises(DatasetError, match="dense"):
        read_vocab(p)
    p.write_text("a only\n")
    with pytest.raises(DatasetError, match="name<TAB>id"):
        read_vocab(p)


@pytest.mark.parametrize("fmt", ["jsonl-statements", "tsv-flat"])
def test_save_load_round_trip(tmp_path, qualifier_graph, fmt):
    save_dataset(qualifier_graph, tmp_path, fmt=fmt)
    g = load_dataset(tmp_path, fmt=fmt)
    assert g.entity_names == qualifier_graph.entity_names
    assert g.relation_names == qualifier_graph.relation_names
    assert g.statements == qualifier_graph.statements
    assert g.splits == qualifier_graph.splits


@st.composite
def _random_graphs(draw):
    n_ent = draw(st.integers(2, 6))
    n_rel = draw(st.integers(1, 3))
    n_stmt = draw(st.integers(1, 12))
    stmts, splits = [], []
    for _ in range(n_stmt):
        h = draw(st.integers(0, n_ent - 1))
        r = draw(st.integers(0, n_rel - 1))
        t = draw(st.integers(0, n_ent - 1))
        n_q = draw(st.integers(0, 2))
        quals = tuple(
            (draw(st.integers(0, n_rel - 1)), draw(st.integers(0, n_ent - 1)))
            for _ in range(n_q)
        )
        stmts.append(Statement(h, r, t, quals))
        splits.append(draw(st.sampled_from(["train", "valid", "test"])))
    if "train" not in splits:
        splits[0] = "train"
    ents = [f"e{i}" for i in range(n_ent)]
    rels = [f"r{i}" for i in range(n_rel)]
    return KnowledgeGraph(ents, rels, stmts, splits)


@settings(max_examples=40, deadline=None)
@given(graph=_random_graphs(), fmt=st.sampled_from(["jsonl-statements", "tsv-flat"]))
def test_round_trip_property(tmp_path_factory, graph, fmt):
    # Storage is one file per split, so the per-split statement sequences
    # are the round-trip invariant (not the original interleaving).
    directory = tmp_path_factory.mktemp("ds")
    save_dataset(graph, directory, fmt=fmt)
    loaded = load_dataset(directory, fmt=fmt)
    assert loaded.entity_names == graph.entity_names
    assert loaded.relation_names == graph.relation_names
    assert loaded.available_splits() == graph.available_splits()
    for split in graph.available_splits():
        assert loaded.split_statements(split) == graph.split_statements(split)


# ---------------------------------------------------------------------------
# Pattern keys and filter index
# ---------------------------------------------------------------------------


def test_pattern_key_spec_examples():
    # (a,r,b,{}) and (a,r,c,{}) share the tail pattern (a,r,?)
    s1, s2 = Statement(0, 0, 1), Statement(0, 0, 2)
    assert pattern_key(s1, TAIL_SLOT) == pattern_key(s2, TAIL_SLOT)
    # adding a qualifier separates the patterns
    s3 = Statement(0, 0, 1, ((1, 3),))
    assert pattern_key(s3, TAIL_SLOT) != pattern_key(s1, TAIL_SLOT)


def test_pattern_key_qualifiers_order_insensitive():
    a = Statement(0, 0, 1, ((1, 2), (2, 3)))
    b = Statement(0, 0, 1, ((2, 3), (1, 2)))
    for slot in (HEAD_SLOT, TAIL_SLOT):
        assert pattern_key(a, slot) == pattern_key(b, slot)


def test_pattern_key_duplicate_qualifiers_are_multiset():
    once = Statement(0, 0, 1, ((1, 2),))
    twice = Statement(0, 0, 1, ((1, 2), (1, 2)))
    assert pattern_key(once, TAIL_SLOT) != pattern_key(twice, TAIL_SLOT)


def test_pattern_key_masked_qualifier_keeps_its_relation():
    stmt = Statement(0, 0, 1, ((1, 2), (2, 3)))
    k0 = pattern_key(stmt, qualifier_slot(0))
    k1 = pattern_key(stmt, qualifier_slot(1))
    assert k0 != k1  # different masked relation ⇒ different pattern
    assert k0[4] == 1 and k1[4] == 2


def test_filter_index_spec_examples():
    # (a,r,b,{}), (a,r,c,{}), and (a,r,b,{(q,x)})
    g = KnowledgeGraph(
        ["a", "b", "c", "x"],
        ["r", "q"],
        [Statement(0, 0, 1), Statement(0, 0, 2), Statement(0, 0, 1, ((1, 3),))],
        ["train", "train", "train"],
    )
    idx = FilterIndex(g)
    assert idx.answers(Statement(0, 0, 1), TAIL_SLOT) == {1, 2}
    assert idx.answers(Statement(0, 0, 1, ((1, 3),)), TAIL_SLOT) == {1}
    # pattern absent from the graph → empty set
    assert idx.answers(Statement(2, 0, 0), TAIL_SLOT) == frozenset()


def test_filter_index_deduplicates_across_splits():
    g = KnowledgeGraph(
        ["a", "b"], ["r"],
        [Statement(0, 0, 1), Statement(0, 0, 1)],
        ["train", "valid"],
    )
    assert FilterIndex(g).answers(Statement(0, 0, 1), TAIL_SLOT) == {1}


def _brute_force_answers(graph, stmt, slot, splits):
    """Independent oracle: scan every statement for pattern matches."""
    def multiset(pairs):
        return sorted(pairs)

    matches = set()
    for sp in splits:
        for other in graph.split_statements(sp):
            if slot.kind == "head":
                if (other.relation, other.tail, multiset(other.qualifiers)) == (
                        stmt.relation, stmt.tail, multiset(stmt.qualifiers)):
                    matches.add(other.head)
            elif slot.kind == "tail":
                if (other.head, other.relation, multiset(other.qualifiers)) == (
                        stmt.head, stmt.relation, multiset(stmt.qualifiers)):
                    matches.add(other.tail)
            else:
                i = slot.index
                rest = multiset(stmt.qualifiers[:i] + stmt.qualifiers[i + 1:])
                qr = stmt.qualifiers[i][0]
                for j, (r2, e2) in enumerate(other.qualifiers):
                    rest2 = multiset(other.qualifiers[:j] + other.qualifiers[j + 1:])
                    if (other.head, other.relation, other.tail, r2, rest2) == (
                            stmt.head, stmt.relation, stmt.tail, qr, rest):
                        matches.add(e2)
    return matches


@settings(max_examples=40, deadline=None)
@given(graph=_random_graphs())
def test_filter_index_matches_brute_force(graph):
    splits = graph.available_splits()
    idx = FilterIndex(graph)
    for stmt in graph.statements:
        for slot in statement_slots(stmt, include_qualifiers=True):
            expected = _brute_force_answers(graph, stmt, slot, splits)
            assert idx.answers(stmt, slot) == expected


def test_filter_index_split_restriction(qualifier_graph):
    full = FilterIndex(qualifier_graph)
    train_only = FilterIndex(qualifier_graph, splits=("train",))
    probe = Statement(1, 2, 0)  # only exists in valid
    assert full.answers(probe, TAIL_SLOT) == {0}
    assert train_only.answers(probe, TAIL_SLOT) == frozenset()


# ---------------------------------------------------------------------------
# Query construction and labels
# ---------------------------------------------------------------------------


def test_query_counts_with_and_without_aux():
    # 3 statements with qualifier counts {0, 1, 2}: 6 queries, 9 with aux
    g = KnowledgeGraph(
        ["a", "b", "c"], ["r", "q"],
        [
            Statement(0, 0, 1),
            Statement(0, 0, 2, ((1, 0),)),
            Statement(1, 0, 2, ((1, 0), (1, 1))),
        ],
        ["train"] * 3,
    )
    assert len(build_queries(g, "train", include_aux=False)) == 6
    assert len(build_queries(g, "train", include_aux=True)) == 9


def test_query_slots_and_gold(tiny_graph):
    head_q, tail_q = build_queries(tiny_graph, "train")
    assert head_q.masked_slot == HEAD_SLOT and head_q.gold == 0
    assert tail_q.masked_slot == TAIL_SLOT and tail_q.gold == 1


def test_gold_always_in_filter_answers(qualifier_graph):
    for split in qualifier_graph.available_splits():
        for q in build_queries(qualifier_graph, split, include_aux=True):
            assert q.gold in q.filter_answers


def test_eval_split_gold_unioned_into_answers():
    # valid statement whose pattern never occurs in train: the gold itself
    # must still be a filter answer
    g = KnowledgeGraph(
        ["a", "b", "c"], ["r"],
        [Statement(0, 0, 1), Statement(2, 0, 0)],
        ["train", "valid"],
    )
    train_idx = FilterIndex(g, splits=("train",))
    queries = build_queries(g, "valid", filter_index=train_idx, train_index=train_idx)
    tail_q = queries[1]
    assert tail_q.gold == 0
    assert 0 in tail_q.filter_answers


def test_one_n_labels_match_brute_force(qualifier_graph):
    queries = build_queries(qualifier_graph, "train", include_aux=True)
    labels = one_n_labels(queries, qualifier_graph.n_entities)
    assert labels.shape == (len(queries), qualifier_graph.n_entities)
    for row, q in enumerate(queries):
        expected = _brute_force_answers(qualifier_graph, q.source, q.masked_slot, ["train"])
        assert set(np.nonzero(labels[row])[0]) == expected
        assert labels[row, q.gold] == 1.0


def test_one_n_labels_spec_example():
    # tail pattern with train answers {b, c} in a 5-entity vocabulary
    g = KnowledgeGraph(
        ["a", "b", "c", "d", "e"], ["r"],
        [Statement(0, 0, 1), Statement(0, 0, 2)],
        ["train", "train"],
    )
    queries = [q for q in build_queries(g, "train") if q.masked_slot == TAIL_SLOT]
    labels = one_n_labels(queries, 5)
    for row in labels:
        assert row.sum() == 2.0
        assert set(np.nonzero(row)[0]) == {1, 2}


def test_one_n_labels_reject_non_training_queries():
    stmt = Statement(0, 0, 1)
    q = CompletionQuery(stmt, TAIL_SLOT, gold=1, filter_answers=frozenset({1}),
                        train_answers=frozenset())
    with pytest.raises(ValueError, match="training"):
        one_n_labels([q], 2)
