"""The masked-statement completion network.

Pipeline per query batch:

1. Lightweight embedding processing: the entity table goes through
   layer norm then dropout, the relation table through layer norm only.
   Each transform can be disabled independently for ablations; with all
   three off the tables pass through untouched (the vanilla-Transformer
   baseline path).  Cost is linear in table size and independent of the
   number of statements.
2. Statements are flattened to token sequences (main triplet first, then
   qualifier pairs in stored order) with the unknown entity replaced by a
   reserved mask token that lives in the last entity-table row.
3. Token embeddings are gathered from the processed tables, projected to
   the encoder width, summed with learned absolute position embeddings,
   and run through pre-norm Transformer encoder layers whose attention
   masks out padding columns.
4. The mask position's representation passes through a small feed-forward
   head back to embedding width and is dotted against every real entity's
   processed embedding; a sigmoid turns the similarities into per-entity
   probabilities.  The mask row itself is excluded from scoring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import MaskedSlot, Statement
from .rng import RngHub

# token kinds in a flattened sequence
PAD, ENTITY, RELATION, MASK = 0, 1, 2, 3

_NEG_INF = float("-inf")


class ModelError(Exception):
    pass


@dataclass
class ModelConfig:
    d_embed: int = 200
    d_hidden: int = 512
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 11
    attn_dropout: float = 0.1
    ent_emb_dropout: float = 0.3
    head_dropout: float = 0.1
    ff_mult: int = 2
    label_smoothing: float = 0.1
    ln_eps: float = 1e-5
    init_std: float = 0.02
    use_entity_ln: bool = True
    use_entity_dropout: bool = True
    use_relation_ln: bool = True
    use_position_embeddings: bool = True
    shuffle_qualifiers: bool = False

    def __post_init__(self):
        if self.d_hidden % self.n_heads != 0:
            raise ModelError(f"d_hidden={self.d_hidden} not divisible by n_heads={self.n_heads}")
        if self.max_seq_len < 3:
            raise ModelError(f"max_seq_len must be >= 3, got {self.max_seq_len}")
        for name in ("attn_dropout", "ent_emb_dropout", "head_dropout"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ModelError(f"{name} must be in [0, 1), got {rate}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ModelError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# Sequence flattening
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenSequence:
    """A flattened, masked, padded statement: (kind, id) per position."""

    tokens: tuple[tuple[int, int], ...]
    mask_index: int

    def __post_init__(self):
        n_masks = sum(1 for kind, _ in self.tokens if kind == MASK)
        if n_masks != 1:
            raise ModelError(f"sequence must contain exactly one mask token, got {n_masks}")
        if self.tokens[self.mask_index][0] != MASK:
            raise ModelError("mask_index does not point at the mask token")


def mask_position(slot: MaskedSlot) -> int:
    if slot.kind == "head":
        return 0
    if slot.kind == "tail":
        return 2
    return 4 + 2 * slot.index


def flatten(stmt: Statement, masked_slot: MaskedSlot, max_seq_len: int) -> TokenSequence:
    """Flatten a statement with one slot masked, tail-padding to ``max_seq_len``.

    Layout: [head, relation, tail, q_r1, q_e1, q_r2, q_e2, ...].
    """
    if stmt.token_length > max_seq_len:
        raise ModelError(
            f"statement ({stmt.head}, {stmt.relation}, {stmt.tail}) with "
            f"{stmt.n_qualifiers} qualifiers needs {stmt.token_length} tokens, "
            f"max_seq_len is {max_seq_len}"
        )
    if masked_slot.kind == "qualifier" and masked_slot.index >= stmt.n_qualifiers:
        raise ModelError(f"qualifier index {masked_slot.index} out of range")
    tokens: list[tuple[int, int]] = [
        (ENTITY, stmt.head),
        (RELATION, stmt.relation),
        (ENTITY, stmt.tail),
    ]
    for qr, qe in stmt.qualifiers:
        tokens.append((RELATION, qr))
        tokens.append((ENTITY, qe))
    pos = mask_position(masked_slot)
    tokens[pos] = (MASK, 0)
    tokens.extend((PAD, 0) for _ in range(max_seq_len - len(tokens)))
    return TokenSequence(tuple(tokens), pos)


def required_length(statements: Sequence[Statement]) -> int:
    """Smallest max_seq_len accommodating every statement."""
    return max((s.token_length for s in statements), default=3)


@dataclass
class TokenBatch:
    """Array view of a list of sequences: kinds/ids are (B, T) ints."""

    kinds: np.ndarray
    ids: np.ndarray
    mask_index: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.kinds.shape[0]

    @property
    def seq_len(self) -> int:
        return self.kinds.shape[1]


def batch_sequences(seqs: Sequence[TokenSequence]) -> TokenBatch:
    if not seqs:
        raise ModelError("empty batch")
    t = len(seqs[0].tokens)
    kinds = np.zeros((len(seqs), t), dtype=np.int8)
    ids = np.zeros((len(seqs), t), dtype=np.int64)
    mask_index = np.zeros(len(seqs), dtype=np.int64)
    for i, seq in enumerate(seqs):
        if len(seq.tokens) != t:
            raise ModelError("sequences in a batch must share max_seq_len")
        kinds[i] = [k for k, _ in seq.tokens]
        ids[i] = [v for _, v in seq.tokens]
        mask_index[i] = seq.mask_index
    return TokenBatch(kinds, ids, mask_index)


# ---------------------------------------------------------------------------
# Embedding tables + lightweight processing
# ---------------------------------------------------------------------------


class EmbeddingProcessor:
    """Entity/relation embedding tables and their per-step processing.

    The entity table has ``n_entities + 1`` rows; the extra last row is
    the mask token.  Processing runs layer norm and (entity side only)
    inverted dropout over the full tables, so its cost scales with table
    sizes and the embedding width, never with the statement count.
    """

    def __init__(self, n_entities: int, n_relations: int, cfg: ModelConfig, hub: RngHub):
        self.n_entities = n_entities
        self.n_relations = n_relations
        self.cfg = cfg
        self.hub = hub
        d = cfg.d_embed
        self.params: dict[str, Tensor] = {
            "ent_embed": ad.normal((n_entities + 1, d), cfg.init_std, hub.stream("init/ent_embed"),
                                   requires_grad=True, name="ent_embed"),
            "rel_embed": ad.normal((n_relations, d), cfg.init_std, hub.stream("init/rel_embed"),
                                   requires_grad=True, name="rel_embed"),
            "ent_ln_gain": ad.ones((d,), requires_grad=True, name="ent_ln_gain"),
            "ent_ln_bias": ad.zeros((d,), requires_grad=True, name="ent_ln_bias"),
            "rel_ln_gain": ad.ones((d,), requires_grad=True, name="rel_ln_gain"),
            "rel_ln_bias": ad.zeros((d,), requires_grad=True, name="rel_ln_bias"),
        }

    def process(self, mode: str = "train", step: int = 0) -> tuple[Tensor, Tensor]:
        """Return the processed (entity, relation) tables for this step."""
        cfg = self.cfg
        p = self.params
        ent = p["ent_embed"]
        if cfg.use_entity_ln:
            ent = ad.layer_norm(ent, p["ent_ln_gain"], p["ent_ln_bias"], cfg.ln_eps)
        if cfg.use_entity_dropout:
            ent = ad.dropout(ent, cfg.ent_emb_dropout, mode,
                             self.hub.stream("dropout/ent_embed", step))
        rel = p["rel_embed"]
        if cfg.use_relation_ln:
            rel = ad.layer_norm(rel, p["rel_ln_gain"], p["rel_ln_bias"], cfg.ln_eps)
        return ent, rel


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------


@dataclass
class ScoreVector:
    """Per-entity probabilities for one or more queries; the mask row is
    excluded, so the last axis has exactly ``n_entities`` entries."""

    probs: np.ndarray

    def __post_init__(self):
        if np.any(self.probs <= 0.0) or np.any(self.probs >= 1.0):
            raise ModelError("probabilities must lie strictly in (0, 1)")


class HyTransformer:
    """Encoder plus scoring head; owns all learnable parameters by name."""

    def __init__(self, cfg: ModelConfig, n_entities: int, n_relations: int, seed: int = 0):
        if n_entities < 1 or n_relations < 1:
            raise ModelError("need at least one entity and one relation")
        self.cfg = cfg
        self.n_entities = n_entities
        self.n_relations = n_relations
        self.seed = seed
        self.hub = RngHub(seed)
        self.embeddings = EmbeddingProcessor(n_entities, n_relations, cfg, self.hub)
        self.params: dict[str, Tensor] = dict(self.embeddings.params)
        self._build_encoder()

    def _build_encoder(self) -> None:
        cfg = self.cfg
        std = cfg.init_std
        dh = cfg.d_hidden

        def w(name, shape):
            self.params[name] = ad.normal(shape, std, self.hub.stream(f"init/{name}"),
                                          requires_grad=True, name=name)

        def b(name, width):
            self.params[name] = ad.zeros((width,), requires_grad=True, name=name)

        def ln(prefix, width):
            self.params[f"{prefix}_gain"] = ad.ones((width,), requires_grad=True, name=f"{prefix}_gain")
            self.params[f"{prefix}_bias"] = ad.zeros((width,), requires_grad=True, name=f"{prefix}_bias")

        w("in_proj_w", (cfg.d_embed, dh))
        b("in_proj_b", dh)
        w("pos_embed", (cfg.max_seq_len, dh))
        for layer in range(cfg.n_layers):
            pre = f"layer{layer}"
            ln(f"{pre}_ln1", dh)
            for mat in ("q", "k", "v", "o"):
                w(f"{pre}_w{mat}", (dh, dh))
                b(f"{pre}_b{mat}", dh)
            ln(f"{pre}_ln2", dh)
            w(f"{pre}_ff1_w", (dh, cfg.ff_mult * dh))
            b(f"{pre}_ff1_b", cfg.ff_mult * dh)
            w(f"{pre}_ff2_w", (cfg.ff_mult * dh, dh))
            b(f"{pre}_ff2_b", dh)
        ln("final_ln", dh)
        w("head_w1", (dh, cfg.ff_mult * dh))
        b("head_b1", cfg.ff_mult * dh)
        w("head_w2", (cfg.ff_mult * dh, cfg.d_embed))
        b("head_b2", cfg.d_embed)

    # -- forward pieces -----------------------------------------------------

    def process_embeddings(self, mode: str = "train", step: int = 0) -> tuple[Tensor, Tensor]:
        return self.embeddings.process(mode, step)

    def _gather_tokens(self, batch: TokenBatch, ent_hat: Tensor, rel_hat: Tensor) -> Tensor:
        ent_sel = (batch.kinds == ENTITY) | (batch.kinds == MASK)
        rel_sel = batch.kinds == RELATION
        bad_ent = (batch.kinds == ENTITY) & ((batch.ids < 0) | (batch.ids >= self.n_entities))
        bad_rel = rel_sel & ((batch.ids < 0) | (batch.ids >= self.n_relations))
        if bad_ent.any() or bad_rel.any():
            raise ModelError("token id out of vocabulary range")
        ent_idx = np.where(batch.kinds == MASK, self.n_entities, np.where(ent_sel, batch.ids, 0))
        rel_idx = np.where(rel_sel, batch.ids, 0)
        dt = ent_hat.values.dtype
        ent_rows = ad.mul(ad.gather(ent_hat, ent_idx), ent_sel[..., None].astype(dt))
        rel_rows = ad.mul(ad.gather(rel_hat, rel_idx), rel_sel[..., None].astype(dt))
        # pad positions end up as exact zero rows with no gradient path
        return ad.add(ent_rows, rel_rows)

    def encode(self, batch: TokenBatch, ent_hat: Tensor, rel_hat: Tensor,
               mode: str = "train", step: int = 0) -> Tensor:
        """Run the encoder; returns the (B, T, d_hidden) statement representation."""
        cfg = self.cfg
        p = self.params
        if batch.seq_len != cfg.max_seq_len:
            raise ModelError(f"batch seq_len {batch.seq_len} != model max_seq_len {cfg.max_seq_len}")
        x = self._gather_tokens(batch, ent_hat, rel_hat)
        x = ad.add(ad.matmul(x, p["in_proj_w"]), p["in_proj_b"])
        if cfg.use_position_embeddings:
            x = ad.add(x, p["pos_embed"])

        pad_cols = batch.kinds == PAD  # (B, T)
        attn_bias = np.where(pad_cols[:, None, None, :], _NEG_INF, 0.0).astype(x.values.dtype)

        b, t = batch.batch_size, batch.seq_len
        heads, hd = cfg.n_heads, cfg.d_hidden // cfg.n_heads
        scale = 1.0 / math.sqrt(hd)

        def split_heads(y: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(y, (b, t, heads, hd)), (0, 2, 1, 3))

        for layer in range(cfg.n_layers):
            pre = f"layer{layer}"
            a = ad.layer_norm(x, p[f"{pre}_ln1_gain"], p[f"{pre}_ln1_bias"], cfg.ln_eps)
            q = split_heads(ad.add(ad.matmul(a, p[f"{pre}_wq"]), p[f"{pre}_bq"]))
            k = split_heads(ad.add(ad.matmul(a, p[f"{pre}_wk"]), p[f"{pre}_bk"]))
            v = split_heads(ad.add(ad.matmul(a, p[f"{pre}_wv"]), p[f"{pre}_bv"]))
            scores = ad.add(ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale), attn_bias)
            weights = ad.softmax(scores, axis=-1)
            weights = ad.dropout(weights, cfg.attn_dropout, mode,
                                 self.hub.stream(f"dropout/attn{layer}", step))
            ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (b, t, cfg.d_hidden))
            ctx = ad.add(ad.matmul(ctx, p[f"{pre}_wo"]), p[f"{pre}_bo"])
            ctx = ad.dropout(ctx, cfg.attn_dropout, mode,
                             self.hub.stream(f"dropout/resid_attn{layer}", step))
            x = ad.add(x, ctx)

            f_in = ad.layer_norm(x, p[f"{pre}_ln2_gain"], p[f"{pre}_ln2_bias"], cfg.ln_eps)
            h = ad.gelu(ad.add(ad.matmul(f_in, p[f"{pre}_ff1_w"]), p[f"{pre}_ff1_b"]))
            h = ad.dropout(h, cfg.attn_dropout, mode, self.hub.stream(f"dropout/ff{layer}", step))
            h = ad.add(ad.matmul(h, p[f"{pre}_ff2_w"]), p[f"{pre}_ff2_b"])
            h = ad.dropout(h, cfg.attn_dropout, mode,
                           self.hub.stream(f"dropout/resid_ff{layer}", step))
            x = ad.add(x, h)

        return ad.layer_norm(x, p["final_ln_gain"], p["final_ln_bias"], cfg.ln_eps)

    def score_logits(self, rep: Tensor, batch: TokenBatch, ent_hat: Tensor,
                     mode: str = "train", step: int = 0) -> Tensor:
        """Similarity of the mask representation against every real entity.

        The mask-token row (last entity-table row) never appears as a
        candidate, so the output has ``n_entities`` columns.
        """
        p = self.params
        masked = ad.select_positions(rep, batch.mask_index)
        h = ad.gelu(ad.add(ad.matmul(masked, p["head_w1"]), p["head_b1"]))
        h = ad.dropout(h, self.cfg.head_dropout, mode, self.hub.stream("dropout/head", step))
        e = ad.add(ad.matmul(h, p["head_w2"]), p["head_b2"])
        candidates = ad.gather(ent_hat, np.arange(self.n_entities))
        return ad.matmul(e, ad.transpose(candidates, (1, 0)))

    def forward_logits(self, batch: TokenBatch, mode: str = "train", step: int = 0) -> Tensor:
        ent_hat, rel_hat = self.process_embeddings(mode, step)
        rep = self.encode(batch, ent_hat, rel_hat, mode, step)
        return self.score_logits(rep, batch, ent_hat, mode, step)

    def score(self, batch: TokenBatch, mode: str = "eval", step: int = 0) -> ScoreVector:
        logits = self.forward_logits(batch, mode, step)
        probs = ad.sigmoid(logits).values
        # undo float rounding at the sigmoid's open endpoints
        dt = probs.dtype.type
        probs = np.clip(probs, np.finfo(probs.dtype).tiny, np.nextafter(dt(1.0), dt(0.0)))
        return ScoreVector(probs)

    # -- bookkeeping ----------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def param_counts(self) -> dict[str, int]:
        return {name: p.size for name, p in self.params.items()}

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.values for name, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ModelError(f"parameter name mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
        for name, p in self.params.items():
            arr = arrays[name]
            if tuple(arr.shape) != p.shape:
                raise ModelError(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.shape}")
            p.values = arr.astype(p.values.dtype, copy=True)

    def meta(self) -> dict:
        return {
            "model_config": self.cfg.to_dict(),
            "n_entities": self.n_entities,
            "n_relations": self.n_relations,
            "seed": self.seed,
        }


def model_from_meta(meta: dict) -> HyTransformer:
    cfg = ModelConfig.from_dict(meta["model_config"])
    return HyTransformer(cfg, meta["n_entities"], meta["n_relations"], seed=meta.get("seed", 0))
