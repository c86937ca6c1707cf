"""Hyper-relational statement store.

A statement is a main (head, relation, tail) triplet plus an ordered list
of qualifier (relation, entity) pairs.  This module parses and serializes
statement files, builds dense entity/relation vocabularies, constructs
completion queries (one masked slot per query), and maintains the answer
indexes used for filtered ranking and 1-N training labels.

Two file formats are accepted:

``jsonl-statements``
    One JSON object per line with keys ``head``, ``relation``, ``tail``
    and an optional ``qualifiers`` list of ``[relation, entity]`` pairs.

``tsv-flat``
    Tab-separated ``head  relation  tail  qr1  qe1  qr2  qe2 ...``.

Both formats are UTF-8; blank lines and ``#`` comment lines are ignored.
A dataset directory holds one file per split (train/valid/test) and,
optionally, ``entities.vocab`` / ``relations.vocab`` manifests pinning the
name-to-id mapping.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

SPLITS = ("train", "valid", "test")

FORMAT_ALIASES = {
    "jsonl-statements": "jsonl-statements",
    "jsonl": "jsonl-statements",
    "tsv-flat": "tsv-flat",
    "tsv": "tsv-flat",
}

_FORMAT_EXTENSIONS = {
    "jsonl-statements": (".jsonl",),
    "tsv-flat": (".txt", ".tsv"),
}


class DatasetError(Exception):
    """Raised for malformed files, missing splits, or violated invariants."""


def canonical_format(fmt: str) -> str:
    if fmt not in FORMAT_ALIASES:
        raise DatasetError(f"unknown dataset format {fmt!r}; expected one of {sorted(set(FORMAT_ALIASES))}")
    return FORMAT_ALIASES[fmt]


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Statement:
    """One hyper-relational fact; ids are dense ints into the vocabularies."""

    head: int
    relation: int
    tail: int
    qualifiers: tuple[tuple[int, int], ...] = ()

    @property
    def n_qualifiers(self) -> int:
        return len(self.qualifiers)

    @property
    def token_length(self) -> int:
        return 3 + 2 * len(self.qualifiers)


@dataclass(frozen=True)
class MaskedSlot:
    """Which position of a statement is hidden: the triplet head, the
    triplet tail, or the entity of qualifier ``index`` (0-based)."""

    kind: str  # "head" | "tail" | "qualifier"
    index: int | None = None

    def __post_init__(self):
        if self.kind not in ("head", "tail", "qualifier"):
            raise ValueError(f"bad slot kind {self.kind!r}")
        if self.kind == "qualifier" and (self.index is None or self.index < 0):
            raise ValueError("qualifier slot needs a non-negative index")
        if self.kind != "qualifier" and self.index is not None:
            raise ValueError(f"{self.kind} slot takes no index")


HEAD_SLOT = MaskedSlot("head")
TAIL_SLOT = MaskedSlot("tail")


def qualifier_slot(i: int) -> MaskedSlot:
    return MaskedSlot("qualifier", i)


@dataclass(frozen=True)
class CompletionQuery:
    """A statement with one masked entity position.

    ``filter_answers`` holds every entity known correct for this query
    pattern across all loaded splits (used to mask competitors at ranking
    time); ``train_answers`` is the same set restricted to the training
    split (used for 1-N label rows).
    """

    source: Statement
    masked_slot: MaskedSlot
    gold: int
    filter_answers: frozenset[int]
    train_answers: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.gold not in self.filter_answers:
            raise ValueError("gold answer missing from filter_answers")
        if self.masked_slot.kind == "qualifier" and self.masked_slot.index >= self.source.n_qualifiers:
            raise ValueError(
                f"qualifier index {self.masked_slot.index} out of range "
                f"(statement has {self.source.n_qualifiers} qualifiers)"
            )


class KnowledgeGraph:
    """Immutable-after-construction container for statements and vocabularies."""

    def __init__(
        self,
        entity_names: Sequence[str],
        relation_names: Sequence[str],
        statements: Sequence[Statement],
        splits: Sequence[str],
    ):
        if len(statements) != len(splits):
            raise ValueError("statements and splits must be parallel")
        self.entity_names = list(entity_names)
        self.relation_names = list(relation_names)
        self.entity_ids = {name: i for i, name in enumerate(self.entity_names)}
        self.relation_ids = {name: i for i, name in enumerate(self.relation_names)}
        self.statements = list(statements)
        self.splits = list(splits)
        self._by_split: dict[str, list[Statement]] = {}
        for stmt, sp in zip(self.statements, self.splits):
            self._by_split.setdefault(sp, []).append(stmt)
        self.validate()

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    @property
    def n_statements(self) -> int:
        return len(self.statements)

    def available_splits(self) -> list[str]:
        return [s for s in SPLITS if s in self._by_split] + sorted(
            s for s in self._by_split if s not in SPLITS
        )

    def split_statements(self, split: str) -> list[Statement]:
        if split not in self._by_split:
            raise DatasetError(f"unknown split {split!r}; loaded splits: {self.available_splits()}")
        return self._by_split[split]

    def validate(self) -> None:
        if self.n_entities < 1 or self.n_relations < 1 or self.n_statements < 1:
            raise DatasetError("no statements")
        if len(self.entity_ids) != self.n_entities:
            raise DatasetError("duplicate entity names in vocabulary")
        if len(self.relation_ids) != self.n_relations:
            raise DatasetError("duplicate relation names in vocabulary")
        for stmt in self.statements:
            refs_e = [stmt.head, stmt.tail] + [e for _, e in stmt.qualifiers]
            refs_r = [stmt.relation] + [r for r, _ in stmt.qualifiers]
            for e in refs_e:
                if not 0 <= e < self.n_entities:
                    raise DatasetError(f"entity id {e} outside vocabulary [0, {self.n_entities})")
            for r in refs_r:
                if not 0 <= r < self.n_relations:
                    raise DatasetError(f"relation id {r} outside vocabulary [0, {self.n_relations})")

    def statement_names(self, stmt: Statement) -> tuple:
        """Back-translate a statement to names, for messages and serialization."""
        return (
            self.entity_names[stmt.head],
            self.relation_names[stmt.relation],
            self.entity_names[stmt.tail],
            tuple((self.relation_names[r], self.entity_names[e]) for r, e in stmt.qualifiers),
        )


# ---------------------------------------------------------------------------
# Parsing and serialization
# ---------------------------------------------------------------------------

RawStatement = tuple[str, str, str, tuple[tuple[str, str], ...]]


def _parse_jsonl_line(line: str, where: str) -> RawStatement:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{where}: invalid JSON: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise DatasetError(f"{where}: expected a JSON object, got {type(obj).__name__}")
    missing = [k for k in ("head", "relation", "tail") if k not in obj]
    if missing:
        raise DatasetError(f"{where}: missing fields {missing}")
    quals = obj.get("qualifiers", [])
    if not isinstance(quals, list):
        raise DatasetError(f"{where}: 'qualifiers' must be a list")
    pairs = []
    for q in quals:
        if not isinstance(q, (list, tuple)) or len(q) != 2:
            raise DatasetError(f"{where}: qualifier entries must be [relation, entity] pairs")
        pairs.append((str(q[0]), str(q[1])))
    return (str(obj["head"]), str(obj["relation"]), str(obj["tail"]), tuple(pairs))


def _parse_tsv_line(line: str, where: str) -> RawStatement:
    fields = line.split("\t")
    if len(fields) < 3:
        raise DatasetError(f"{where}: expected at least 3 tab-separated fields, got {len(fields)}")
    if (len(fields) - 3) % 2 != 0:
        raise DatasetError(f"{where}: qualifier fields must come in (relation, entity) pairs")
    h, r, t = fields[0], fields[1], fields[2]
    rest = fields[3:]
    pairs = tuple((rest[i], rest[i + 1]) for i in range(0, len(rest), 2))
    return (h, r, t, pairs)


def parse_statements_file(path: str | Path, fmt: str) -> list[RawStatement]:
    """Parse one split file into name-level statements, preserving order
    and duplicates.  Raises :class:`DatasetError` with the offending line
    number on malformed input.
    """
    fmt = canonical_format(fmt)
    parse = _parse_jsonl_line if fmt == "jsonl-statements" else _parse_tsv_line
    out: list[RawStatement] = []
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            out.append(parse(stripped, f"{path.name}:{lineno}"))
    return out


def write_statements_file(path: str | Path, raw: Iterable[RawStatement], fmt: str) -> None:
    fmt = canonical_format(fmt)
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t, quals in raw:
            if fmt == "jsonl-statements":
                obj = {"head": h, "relation": r, "tail": t}
                if quals:
                    obj["qualifiers"] = [list(q) for q in quals]
                fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
            else:
                fields = [h, r, t]
                for qr, qe in quals:
                    fields.extend((qr, qe))
                fh.write("\t".join(fields) + "\n")


def read_vocab(path: str | Path) -> list[str]:
    """Read a name<TAB>id manifest; ids must be dense and start at 0."""
    entries: dict[int, str] = {}
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DatasetError(f"{path.name}:{lineno}: expected 'name<TAB>id'")
            name, sid = parts
            try:
                idx = int(sid)
            except ValueError as exc:
                raise DatasetError(f"{path.name}:{lineno}: id {sid!r} is not an integer") from exc
            if idx in entries:
                raise DatasetError(f"{path.name}:{lineno}: duplicate id {idx}")
            entries[idx] = name
    if sorted(entries) != list(range(len(entries))):
        raise DatasetError(f"{path.name}: ids are not dense in [0, {len(entries)})")
    return [entries[i] for i in range(len(entries))]


def write_vocab(path: str | Path, names: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, name in enumerate(names):
            fh.write(f"{name}\t{i}\n")


def split_file(directory: Path, split: str, fmt: str) -> Path | None:
    for ext in _FORMAT_EXTENSIONS[canonical_format(fmt)]:
        candidate = directory / f"{split}{ext}"
        if candidate.exists():
            return candidate
    return None


def load_dataset(path: str | Path, fmt: str = "jsonl-statements") -> KnowledgeGraph:
    """Load a dataset directory (train/valid/test files) or a single file.

    Vocabulary ids are assigned in first-appearance order over splits in
    train, valid, test order unless ``entities.vocab`` / ``relations.vocab``
    manifests are present, in which case those pinned mappings are used.
    """
    fmt = canonical_format(fmt)
    path = Path(path)
    per_split: list[tuple[str, list[RawStatement]]] = []
    ent_manifest = rel_manifest = None
    if path.is_dir():
        for split in SPLITS:
            f = split_file(path, split, fmt)
            if f is None:
                if split == "train":
                    raise DatasetError(f"{path}: no train split file found for format {fmt!r}")
                continue
            per_split.append((split, parse_statements_file(f, fmt)))
        ev = path / "entities.vocab"
        rv = path / "relations.vocab"
        ent_manifest = read_vocab(ev) if ev.exists() else None
        rel_manifest = read_vocab(rv) if rv.exists() else None
    elif path.is_file():
        per_split.append(("train", parse_statements_file(path, fmt)))
    else:
        raise DatasetError(f"{path}: not a file or directory")

    if not any(raws for _, raws in per_split):
        raise DatasetError("no statements")

    entity_names: list[str] = list(ent_manifest) if ent_manifest else []
    relation_names: list[str] = list(rel_manifest) if rel_manifest else []
    ent_ids = {n: i for i, n in enumerate(entity_names)}
    rel_ids = {n: i for i, n in enumerate(relation_names)}

    def eid(name: str) -> int:
        if name not in ent_ids:
            if ent_manifest is not None:
                raise DatasetError(f"entity {name!r} not in pinned entities.vocab")
            ent_ids[name] = len(entity_names)
            entity_names.append(name)
        return ent_ids[name]

    def rid(name: str) -> int:
        if name not in rel_ids:
            if rel_manifest is not None:
                raise DatasetError(f"relation {name!r} not in pinned relations.vocab")
            rel_ids[name] = len(relation_names)
            relation_names.append(name)
        return rel_ids[name]

    statements: list[Statement] = []
    splits: list[str] = []
    for split, raws in per_split:
        for h, r, t, quals in raws:
            statements.append(
                Statement(eid(h), rid(r), eid(t), tuple((rid(qr), eid(qe)) for qr, qe in quals))
            )
            splits.append(split)
    return KnowledgeGraph(entity_names, relation_names, statements, splits)


def graph_to_raw(graph: KnowledgeGraph, split: str) -> list[RawStatement]:
    return [graph.statement_names(s) for s in graph.split_statements(split)]


def save_dataset(graph: KnowledgeGraph, directory: str | Path, fmt: str = "jsonl-statements",
                 write_manifests: bool = True) -> None:
    """Serialize every split plus the vocabulary manifests."""
    fmt = canonical_format(fmt)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = _FORMAT_EXTENSIONS[fmt][0]
    for split in graph.available_splits():
        write_statements_file(directory / f"{split}{ext}", graph_to_raw(graph, split), fmt)
    if write_manifests:
        write_vocab(directory / "entities.vocab", graph.entity_names)
        write_vocab(directory / "relations.vocab", graph.relation_names)


# ---------------------------------------------------------------------------
# Filtered-answer index and query construction
# ---------------------------------------------------------------------------


def _canon_multiset(pairs: Iterable[tuple[int, int]]) -> tuple[tuple[int, int], ...]:
    # qualifier pairs form an order-insensitive multiset in pattern keys
    return tuple(sorted(pairs))


def pattern_key(stmt: Statement, slot: MaskedSlot) -> tuple:
    """The query pattern: the statement with ``slot`` wildcarded.

    Qualifiers enter the key as a sorted multiset; for a masked qualifier
    entity the masked pair's relation stays in the key and the remaining
    pairs form the multiset.
    """
    if slot.kind == "head":
        return ("h", stmt.relation, stmt.tail, _canon_multiset(stmt.qualifiers))
    if slot.kind == "tail":
        return ("t", stmt.head, stmt.relation, _canon_multiset(stmt.qualifiers))
    i = slot.index
    if i >= len(stmt.qualifiers):
        raise ValueError(f"qualifier index {i} out of range")
    rest = stmt.qualifiers[:i] + stmt.qualifiers[i + 1:]
    return ("q", stmt.head, stmt.relation, stmt.tail, stmt.qualifiers[i][0], _canon_multiset(rest))


def _gold_for(stmt: Statement, slot: MaskedSlot) -> int:
    if slot.kind == "head":
        return stmt.head
    if slot.kind == "tail":
        return stmt.tail
    return stmt.qualifiers[slot.index][1]


class FilterIndex:
    """Maps query patterns to the set of entities completing them.

    Built over the union of the given splits (all loaded splits by
    default, per the filtered evaluation protocol); answers are
    deduplicated even when statements repeat across splits.  Instances
    are immutable after construction and safe to share between threads.
    """

    def __init__(self, graph: KnowledgeGraph, splits: Iterable[str] | None = None):
        self.splits = tuple(splits) if splits is not None else tuple(graph.available_splits())
        index: dict[tuple, set[int]] = {}
        for split in self.splits:
            for stmt in graph.split_statements(split):
                for slot in statement_slots(stmt, include_qualifiers=True):
                    index.setdefault(pattern_key(stmt, slot), set()).add(_gold_for(stmt, slot))
        self._index = {k: frozenset(v) for k, v in index.items()}

    def answers(self, stmt: Statement, slot: MaskedSlot) -> frozenset[int]:
        """All known-correct entities for this pattern; empty if unseen."""
        return self._index.get(pattern_key(stmt, slot), frozenset())

    def __len__(self) -> int:
        return len(self._index)


def statement_slots(stmt: Statement, include_qualifiers: bool) -> Iterator[MaskedSlot]:
    yield HEAD_SLOT
    yield TAIL_SLOT
    if include_qualifiers:
        for i in range(len(stmt.qualifiers)):
            yield qualifier_slot(i)


def build_queries(
    graph: KnowledgeGraph,
    split: str,
    include_aux: bool = False,
    filter_index: FilterIndex | None = None,
    train_index: FilterIndex | None = None,
) -> list[CompletionQuery]:
    """Emit a head and a tail query per statement, plus one query per
    qualifier pair when ``include_aux`` is set.

    Query count is exactly ``2 * |statements|`` (+ total qualifier pairs
    with aux).  Pass prebuilt indexes to avoid rebuilding them per call.
    """
    stmts = graph.split_statements(split)
    if filter_index is None:
        filter_index = FilterIndex(graph)
    if train_index is None:
        train_index = FilterIndex(graph, splits=("train",)) if "train" in graph.available_splits() else filter_index
    queries: list[CompletionQuery] = []
    for stmt in stmts:
        for slot in statement_slots(stmt, include_qualifiers=include_aux):
            gold = _gold_for(stmt, slot)
            answers = filter_index.answers(stmt, slot)
            if gold not in answers:
                # the statement itself is an answer even if the index was
                # built over splits that exclude it
                answers = answers | {gold}
            queries.append(
                CompletionQuery(
                    source=stmt,
                    masked_slot=slot,
                    gold=gold,
                    filter_answers=answers,
                    train_answers=train_index.answers(stmt, slot),
                )
            )
    return queries


def one_n_labels(queries: Sequence[CompletionQuery], n_entities: int) -> np.ndarray:
    """Dense 0/1 label matrix for 1-N training: row per query, entry j set
    iff j answers the query pattern within the training split.

    Every row must contain the gold entity (callers pass training-split
    queries); an all-zero row is a contract violation and raises.
    """
    labels = np.zeros((len(queries), n_entities), dtype=np.float32)
    for row, q in enumerate(queries):
        answers = q.train_answers
        if q.gold not in answers:
            raise ValueError(
                f"query gold {q.gold} not among training answers {sorted(answers)}; "
                "one_n_labels expects training-split queries"
            )
        labels[row, sorted(answers)] = 1.0
    return labels
