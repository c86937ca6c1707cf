"""Deterministic synthetic graph generators for tests, demos, and benchmarks.

Each family is shaped to make one behaviour measurable at desk scale:

``random_graph``
    Uniformly random statements.  No structure to generalize from, so it
    measures raw capacity: a healthy model should be able to overfit its
    training split.

``bench_graph``
    Uniformly random with an exact qualifier count per statement, built
    vectorized so timing sweeps can request tens of thousands of
    statements cheaply.

``relation_tail_graph``
    The tail is a function of the relation alone, and validation heads
    never occur anywhere in the training split.  Answering validation
    queries therefore requires the encoder to behave sensibly on entity
    embeddings that never received input-side gradients.

``group_tail_graph``
    Heads belong to latent groups and the tail is a function of (group,
    relation).  Every head is seen in training, but most of its
    (head, relation) cells are held out, so validation accuracy measures
    whether the model inferred group membership instead of memorizing
    cells — generalization that regularization of the embedding tables
    genuinely helps, making it the right terrain for ablation studies.

``qualifier_function_graph``
    The qualifier entity is a deterministic function of (head, relation),
    while train and validation use disjoint qualifier relations so the
    splits share no literal statements.  A model trained with the
    qualifier-entity auxiliary objective can learn the mapping; one
    trained without it has never produced a qualifier-position prediction.
"""

from __future__ import annotations

from .data import KnowledgeGraph, Statement
from .rng import stream


def random_graph(
    n_entities: int = 50,
    n_relations: int = 5,
    n_train: int = 200,
    n_valid: int = 0,
    n_test: int = 0,
    qualifier_fraction: float = 0.5,
    max_qualifiers: int = 2,
    seed: int = 0,
) -> KnowledgeGraph:
    """Uniformly random statements; ``qualifier_fraction`` of them carry
    1..max_qualifiers qualifier pairs."""
    rng = stream(seed, "synthetic/random")
    statements: list[Statement] = []
    splits: list[str] = []
    for split, count in (("train", n_train), ("valid", n_valid), ("test", n_test)):
        for _ in range(count):
            h, t = rng.integers(0, n_entities, size=2)
            r = rng.integers(0, n_relations)
            quals: tuple[tuple[int, int], ...] = ()
            if rng.random() < qualifier_fraction:
                k = int(rng.integers(1, max_qualifiers + 1))
                quals = tuple(
                    (int(rng.integers(0, n_relations)), int(rng.integers(0, n_entities)))
                    for _ in range(k)
                )
            statements.append(Statement(int(h), int(r), int(t), quals))
            splits.append(split)
    entity_names = [f"e{i}" for i in range(n_entities)]
    relation_names = [f"r{i}" for i in range(n_relations)]
    return KnowledgeGraph(entity_names, relation_names, statements, splits)


def bench_graph(
    n_entities: int = 20000,
    n_relations: int = 300,
    n_statements: int = 20000,
    quals_per_statement: int = 2,
    seed: int = 0,
) -> KnowledgeGraph:
    """Uniform random graph with an exact qualifier count per statement,
    sized for timing sweeps (all ids drawn vectorized)."""
    rng = stream(seed, "synthetic/bench")
    q = quals_per_statement
    heads = rng.integers(0, n_entities, size=n_statements)
    rels = rng.integers(0, n_relations, size=n_statements)
    tails = rng.integers(0, n_entities, size=n_statements)
    qual_rels = rng.integers(0, n_relations, size=(n_statements, q))
    qual_ents = rng.integers(0, n_entities, size=(n_statements, q))
    statements = [
        Statement(
            int(heads[i]), int(rels[i]), int(tails[i]),
            tuple((int(qual_rels[i, j]), int(qual_ents[i, j])) for j in range(q)),
        )
        for i in range(n_statements)
    ]
    entity_names = [f"e{i}" for i in range(n_entities)]
    relation_names = [f"r{i}" for i in range(n_relations)]
    return KnowledgeGraph(entity_names, relation_names, statements, ["train"] * n_statements)


def relation_tail_graph(
    n_train_heads: int = 30,
    n_valid_heads: int = 10,
    n_relations: int = 8,
    valid_relations_per_head: int = 4,
    seed: int = 0,
) -> KnowledgeGraph:
    """Tails determined by the relation; validation heads unseen in training.

    Entities are ``n_train_heads + n_valid_heads`` heads followed by one
    tail per relation.  Training pairs every training head with every
    relation; validation pairs each held-out head with a random subset of
    relations.  Both splits obey the same rule tail = tail_of(relation).
    """
    rng = stream(seed, "synthetic/relation_tail")
    n_heads = n_train_heads + n_valid_heads
    tail_of = [n_heads + r for r in range(n_relations)]
    statements: list[Statement] = []
    splits: list[str] = []
    for h in range(n_train_heads):
        for r in range(n_relations):
            statements.append(Statement(h, r, tail_of[r]))
            splits.append("train")
    k = min(valid_relations_per_head, n_relations)
    for h in range(n_train_heads, n_heads):
        for r in sorted(rng.choice(n_relations, size=k, replace=False)):
            statements.append(Statement(h, int(r), tail_of[int(r)]))
            splits.append("valid")
    entity_names = [f"h{i}" for i in range(n_heads)] + [f"t{r}" for r in range(n_relations)]
    relation_names = [f"r{r}" for r in range(n_relations)]
    return KnowledgeGraph(entity_names, relation_names, statements, splits)


def group_tail_graph(
    n_groups: int = 4,
    heads_per_group: int = 8,
    n_relations: int = 6,
    train_frac: float = 0.6,
    seed: int = 0,
) -> KnowledgeGraph:
    """Tails determined by (latent head group, relation); cells split randomly.

    The (head, relation) grid is shuffled and divided ``train_frac`` /
    0.2 / rest into train / valid / dropped.  All heads appear in
    training (with high probability at the default sizes), but roughly
    40% of each head's relations are hidden, so validation performance
    comes from recognizing which group a head belongs to.
    """
    rng = stream(seed, "synthetic/group")
    n_heads = n_groups * heads_per_group
    tail_of: dict[tuple[int, int], int] = {}
    tid = n_heads
    for g in range(n_groups):
        for r in range(n_relations):
            tail_of[(g, r)] = tid
            tid += 1
    cells = [(h, r) for h in range(n_heads) for r in range(n_relations)]
    order = rng.permutation(len(cells))
    n_train = int(train_frac * len(cells))
    n_valid = int(0.2 * len(cells))
    statements: list[Statement] = []
    splits: list[str] = []
    for k, idx in enumerate(order):
        h, r = cells[idx]
        t = tail_of[(h // heads_per_group, r)]
        if k < n_train:
            split = "train"
        elif k < n_train + n_valid:
            split = "valid"
        else:
            continue
        statements.append(Statement(h, r, t))
        splits.append(split)
    entity_names = [f"h{i}" for i in range(n_heads)] + [
        f"t{g}_{r}" for g in range(n_groups) for r in range(n_relations)
    ]
    relation_names = [f"r{r}" for r in range(n_relations)]
    return KnowledgeGraph(entity_names, relation_names, statements, splits)


def qualifier_function_graph(
    n_heads: int = 12,
    n_relations: int = 4,
    n_qual_entities: int = 8,
    train_qual_relations: int = 2,
    seed: int = 0,
) -> KnowledgeGraph:
    """Qualifier entity = fixed function of (head, relation).

    Every statement is (h, r, tail_of(r)) with exactly one qualifier pair
    whose entity is ``qual(h, r)``.  Training statements use qualifier
    relations 0..train_qual_relations-1, validation statements a reserved
    extra one, so validation statements are new while the (head, relation)
    → qualifier-entity mapping is fully determined by the training split.

    ``seed`` is accepted for interface symmetry; the construction is
    exhaustive and deterministic.
    """
    del seed
    n_tails = n_relations
    head_ids = list(range(n_heads))
    tail_ids = [n_heads + r for r in range(n_tails)]
    qual_ids = [n_heads + n_tails + q for q in range(n_qual_entities)]
    n_main = n_relations

    def qual_entity(h: int, r: int) -> int:
        return qual_ids[(31 * h + 17 * r) % n_qual_entities]

    statements: list[Statement] = []
    splits: list[str] = []
    for h in head_ids:
        for r in range(n_main):
            qe = qual_entity(h, r)
            for j in range(train_qual_relations):
                statements.append(Statement(h, r, tail_ids[r], ((n_main + j, qe),)))
                splits.append("train")
            statements.append(Statement(h, r, tail_ids[r], ((n_main + train_qual_relations, qe),)))
            splits.append("valid")
    entity_names = (
        [f"h{i}" for i in range(n_heads)]
        + [f"t{r}" for r in range(n_tails)]
        + [f"q{i}" for i in range(n_qual_entities)]
    )
    relation_names = [f"r{r}" for r in range(n_main)] + [
        f"qr{j}" for j in range(train_qual_relations + 1)
    ]
    return KnowledgeGraph(entity_names, relation_names, statements, splits)
