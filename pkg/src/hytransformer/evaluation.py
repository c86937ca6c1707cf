"""Filtered ranking evaluation: MRR, H@1, H@10 with head/tail averaging.

Protocol: for each statement in the evaluated split, the head and the
tail of the main triplet are masked in turn and scored against every
entity.  Entities known to complete the same query pattern anywhere in
the loaded dataset — other than the gold one — are removed from
contention before ranking (the filtered setting).  Metrics are computed
separately over head queries and tail queries and then averaged with
equal weight.

Ranking uses the pre-sigmoid logits; the sigmoid is monotone, so the
ordering matches the probability scores while staying exact where the
sigmoid would saturate.  Score ties are resolved by the mean-rank policy
by default (rank = 1 + #strictly-greater + #ties/2); optimistic and
pessimistic policies are available and the report records which one ran.

Qualifier-entity queries are reported in a separate optional section and
never enter the headline numbers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import CompletionQuery, FilterIndex, KnowledgeGraph, build_queries
from .model import HyTransformer, TokenBatch, batch_sequences, flatten

TIE_POLICIES = ("mean", "optimistic", "pessimistic")


class EvaluationError(Exception):
    pass


def filtered_rank(scores: np.ndarray, gold: int, filter_answers: Iterable[int],
                  policy: str = "mean") -> float:
    """Rank of ``gold`` after removing the other known-correct entities.

    ``scores`` is the length-N vector for one query (higher is better).
    Competitors listed in ``filter_answers`` other than the gold entity
    are treated as score −∞.
    """
    if policy not in TIE_POLICIES:
        raise EvaluationError(f"unknown tie policy {policy!r}; expected one of {TIE_POLICIES}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise EvaluationError(f"scores must be a vector, got shape {scores.shape}")
    if not 0 <= gold < scores.shape[0]:
        raise EvaluationError(f"gold id {gold} outside [0, {scores.shape[0]})")
    removed = [i for i in filter_answers if i != gold]
    if removed:
        scores = scores.copy()
        scores[removed] = -np.inf
    g = scores[gold]
    greater = int(np.sum(scores > g))
    ties = int(np.sum(scores == g)) - 1  # excluding gold itself
    if policy == "optimistic":
        return float(1 + greater)
    if policy == "pessimistic":
        return float(1 + greater + ties)
    return 1.0 + greater + 0.5 * ties


@dataclass(frozen=True)
class SlotMetrics:
    """Metrics over one query pool (heads, tails, one qualifier count, ...)."""

    mrr: float
    h1: float
    h10: float
    n_queries: int

    @classmethod
    def from_ranks(cls, ranks: Sequence[float]) -> "SlotMetrics":
        if not ranks:
            return cls(0.0, 0.0, 0.0, 0)
        n = len(ranks)
        # fsum: exactly rounded, so metrics are independent of query order
        mrr = math.fsum(1.0 / r for r in ranks) / n
        h1 = sum(1 for r in ranks if r <= 1.0) / n
        h10 = sum(1 for r in ranks if r <= 10.0) / n
        if not (h1 <= h10 and h1 <= mrr <= 1.0):
            raise EvaluationError(f"inconsistent metrics: mrr={mrr}, h1={h1}, h10={h10}")
        return cls(mrr, h1, h10, n)


@dataclass(frozen=True)
class RankReport:
    """Filtered ranking metrics with head/tail and qualifier-count breakdowns.

    The headline mrr/h1/h10 are the unweighted means of the head-pool and
    tail-pool metrics.  ``aux`` covers qualifier-entity queries when those
    were requested and is kept out of the headline numbers.
    """

    split: str
    tie_policy: str
    mrr: float
    h1: float
    h10: float
    head: SlotMetrics
    tail: SlotMetrics
    by_qualifier_count: dict[int, SlotMetrics]
    aux: SlotMetrics | None = None

    @property
    def n_queries(self) -> int:
        return self.head.n_queries + self.tail.n_queries

    @classmethod
    def from_pools(cls, split: str, tie_policy: str,
                   head_ranks: Sequence[float], tail_ranks: Sequence[float],
                   ranks_by_count: dict[int, list[float]],
                   aux_ranks: Sequence[float] | None = None) -> "RankReport":
        head = SlotMetrics.from_ranks(head_ranks)
        tail = SlotMetrics.from_ranks(tail_ranks)
        return cls(
            split=split,
            tie_policy=tie_policy,
            mrr=(head.mrr + tail.mrr) / 2,
            h1=(head.h1 + tail.h1) / 2,
            h10=(head.h10 + tail.h10) / 2,
            head=head,
            tail=tail,
            by_qualifier_count={n: SlotMetrics.from_ranks(r)
                                for n, r in sorted(ranks_by_count.items())},
            aux=SlotMetrics.from_ranks(aux_ranks) if aux_ranks is not None else None,
        )

    def record(self) -> dict:
        rec = {
            "split": self.split,
            "tie_policy": self.tie_policy,
            "mrr": self.mrr,
            "h1": self.h1,
            "h10": self.h10,
            "n_queries": self.n_queries,
            "head": vars(self.head).copy(),
            "tail": vars(self.tail).copy(),
            "by_qualifier_count": {str(n): vars(m).copy()
                                   for n, m in self.by_qualifier_count.items()},
        }
        if self.aux is not None:
            rec["aux"] = vars(self.aux).copy()
        return rec

    def to_jsonl(self) -> str:
        return json.dumps(self.record(), sort_keys=True)

    def table(self, breakdown: bool = True) -> str:
        rows = [
            ("overall", self.mrr, self.h1, self.h10, self.n_queries),
            ("head", self.head.mrr, self.head.h1, self.head.h10, self.head.n_queries),
            ("tail", self.tail.mrr, self.tail.h1, self.tail.h10, self.tail.n_queries),
        ]
        if breakdown:
            for n, m in self.by_qualifier_count.items():
                rows.append((f"{n} qualifier{'s' if n != 1 else ''}",
                             m.mrr, m.h1, m.h10, m.n_queries))
        if self.aux is not None:
            rows.append(("qualifier entities", self.aux.mrr, self.aux.h1, self.aux.h10,
                         self.aux.n_queries))
        lines = [
            f"split={self.split}  tie_policy={self.tie_policy}",
            f"{'pool':<20} {'MRR':>8} {'H@1':>8} {'H@10':>8} {'queries':>8}",
        ]
        for name, mrr, h1, h10, n in rows:
            lines.append(f"{name:<20} {mrr:>8.4f} {h1:>8.4f} {h10:>8.4f} {n:>8d}")
        return "\n".join(lines)


def _score_queries(model: HyTransformer, queries: Sequence[CompletionQuery],
                   batch_size: int) -> np.ndarray:
    """Pre-sigmoid logits, one row per query; embeddings processed once."""
    ent_hat, rel_hat = model.process_embeddings(mode="eval")
    t = model.cfg.max_seq_len
    out = np.empty((len(queries), model.n_entities), dtype=np.float64)
    for start in range(0, len(queries), batch_size):
        chunk = queries[start:start + batch_size]
        seqs = [flatten(q.source, q.masked_slot, t) for q in chunk]
        batch = batch_sequences(seqs)
        rep = model.encode(batch, ent_hat, rel_hat, mode="eval")
        logits = model.score_logits(rep, batch, ent_hat, mode="eval")
        out[start:start + len(chunk)] = logits.values
    return out


def evaluate(
    model: HyTransformer,
    graph: KnowledgeGraph,
    split: str,
    tie_policy: str = "mean",
    include_aux: bool = False,
    batch_size: int = 256,
    filter_index: FilterIndex | None = None,
) -> RankReport:
    """Filtered ranking of every head/tail query in ``split``.

    The filter index spans all loaded splits unless one is passed in.
    With ``include_aux`` the qualifier-entity queries are also ranked,
    into the report's separate ``aux`` section.
    """
    if model.n_entities != graph.n_entities or model.n_relations != graph.n_relations:
        raise EvaluationError(
            f"vocabulary mismatch: model built for {model.n_entities} entities / "
            f"{model.n_relations} relations, dataset has {graph.n_entities} / {graph.n_relations}"
        )
    if tie_policy not in TIE_POLICIES:
        raise EvaluationError(f"unknown tie policy {tie_policy!r}; expected one of {TIE_POLICIES}")
    if not graph.split_statements(split):
        raise EvaluationError(f"split {split!r} is empty")
    if filter_index is None:
        filter_index = FilterIndex(graph)
    queries = build_queries(graph, split, include_aux=include_aux,
                            filter_index=filter_index, train_index=filter_index)
    scores = _score_queries(model, queries, batch_size)

    head_ranks: list[float] = []
    tail_ranks: list[float] = []
    aux_ranks: list[float] = []
    ranks_by_count: dict[int, list[float]] = {}
    for q, row in zip(queries, scores):
        rank = filtered_rank(row, q.gold, q.filter_answers, tie_policy)
        if q.masked_slot.kind == "qualifier":
            aux_ranks.append(rank)
            continue
        (head_ranks if q.masked_slot.kind == "head" else tail_ranks).append(rank)
        ranks_by_count.setdefault(q.source.n_qualifiers, []).append(rank)
    return RankReport.from_pools(split, tie_policy, head_ranks, tail_ranks, ranks_by_count,
                                 aux_ranks if include_aux else None)
