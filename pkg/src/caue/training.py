"""CAUE training: random-split snippets, counterfactual sampling, the
patient-document and patient-concept BCE losses and RMSprop updates."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import zipfile
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .concepts import LexiconEntry, is_excluded
from .corpus import Corpus, Vocabulary
from .nn import (
    DIM,
    BiGRUEncoder,
    EmbeddingTable,
    GruDirection,
    GruParams,
    MeanPoolEncoder,
    Param,
    log_sigmoid,
    sigmoid,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    lambda_: float = 0.3
    alpha: float = 0.0
    epochs: int = 15
    batch_size: int = 16
    negatives_per_positive: int = 3
    token_negatives: int = 1
    token_replace_prob: float = 0.5
    max_positive_concepts: int = 5
    concept_negatives: int = 3
    snippet_min: int = 200
    snippet_max: int = 512
    lr: float = 1e-4
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    encoder: str = "bigru"
    dim: int = DIM
    gru_hidden: int | None = None
    gru_project: bool = False
    dropout: float = 0.2
    init_scale: float = 0.05
    vocab_size: int = 15000
    concept_vocab_size: int = 15000
    seed: int = 0
    enable_contrastive: bool = True
    enable_concepts: bool = True
    doc_negative_source: str = "batch"

    def __post_init__(self):
        if not 0.0 <= self.lambda_ <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lambda_}")
        if self.alpha != 0.0:
            raise ValueError("alpha must be 0: the masked-LM term is not implemented for GRU/mean-pool encoders")
        if self.snippet_min < 1 or self.snippet_min > self.snippet_max:
            raise ValueError("need 1 <= snippet_min <= snippet_max")
        if self.negatives_per_positive < 1 or self.concept_negatives < 1:
            raise ValueError("negative counts must be >= 1")
        if not 0.0 < self.token_replace_prob <= 1.0:
            raise ValueError("token_replace_prob must lie in (0, 1]")
        if self.doc_negative_source not in ("batch", "epoch"):
            raise ValueError(f"doc_negative_source must be 'batch' or 'epoch', got {self.doc_negative_source!r}")
        if self.encoder not in ("bigru", "meanpool"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.encoder == "bigru" and not self.gru_project and 2 * self.hidden != self.dim:
            raise ValueError("2 * gru_hidden must equal dim unless gru_project is set")

    @property
    def hidden(self) -> int:
        if self.gru_hidden is not None:
            return self.gru_hidden
        return self.dim if self.gru_project else self.dim // 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        data = dict(data)
        if "lambda" in data:
            data["lambda_"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)

    def fingerprint(self) -> str:
        return config_fingerprint(self.to_dict())


def config_fingerprint(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Snippet:
    patient_id: int
    note_id: int
    token_ids: np.ndarray
    start: int = 0

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass
class TrainingExample:
    patient_id: int
    positive: Snippet
    doc_negatives: list[Snippet] = field(default_factory=list)
    token_negatives: list[Snippet] = field(default_factory=list)
    positive_concepts: list[int] = field(default_factory=list)
    concept_negatives: list[list[int]] = field(default_factory=list)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def random_split(
    token_ids: Sequence[int],
    lo: int = 200,
    hi: int = 512,
    rng: np.random.Generator | None = None,
    patient_id: int = -1,
    note_id: int = -1,
) -> list[Snippet]:
    """Cut a note left to right into pieces of random length in [lo, hi].

    Notes no longer than ``hi`` stay whole; the final piece of a longer note
    may be shorter than ``lo``.
    """
    if lo > hi:
        raise ValueError("lo must not exceed hi")
    ids = np.asarray(token_ids, dtype=np.int64)
    if len(ids) <= hi:
        return [Snippet(patient_id, note_id, ids, 0)]
    if rng is None:
        raise ValueError("splitting a long note needs an rng")
    out, start = [], 0
    while start < len(ids):
        size = int(rng.integers(lo, hi + 1))
        out.append(Snippet(patient_id, note_id, ids[start : start + size], start))
        start += size
    return out


class SnippetPool:
    """All snippets of one epoch, indexed by owning patient."""

    def __init__(self, snippets: Sequence[Snippet]):
        self.snippets = list(snippets)
        self.owners = np.array([s.patient_id for s in self.snippets], dtype=np.int64)
        self.n_patients = len(set(self.owners.tolist()))


def sample_doc_negatives(target: int, pool: SnippetPool, k: int, rng: np.random.Generator) -> list[Snippet]:
    """k snippets drawn uniformly from those not owned by ``target``."""
    if pool.n_patients < 2:
        raise ValueError("document negatives need at least two patients")
    if not np.any(pool.owners != target):
        raise ValueError(f"no snippets from patients other than {target}")
    out = []
    while len(out) < k:
        # rejection sampling keeps the draw uniform over non-target snippets
        draws = rng.integers(0, len(pool.snippets), size=2 * (k - len(out)))
        out.extend(pool.snippets[i] for i in draws if pool.owners[i] != target)
    return out[:k]


def make_token_negative(
    snippet: Snippet,
    vocab_size: int,
    replace_prob: float = 0.5,
    rng: np.random.Generator | None = None,
    first_index: int = 2,
) -> Snippet:
    """Replace each token with probability ``replace_prob`` by a uniform vocabulary draw.

    Draws come from ``[first_index, vocab_size)`` so PAD/UNK never appear.
    """
    if not 0.0 < replace_prob <= 1.0:
        raise ValueError("replace_prob must lie in (0, 1]")
    if vocab_size <= first_index:
        raise ValueError("vocabulary has no regular tokens to draw from")
    ids = snippet.token_ids.copy()
    hit = rng.random(len(ids)) < replace_prob
    ids[hit] = rng.integers(first_index, vocab_size, size=int(hit.sum()))
    return Snippet(snippet.patient_id, snippet.note_id, ids, snippet.start)


def sample_positive_concepts(bag: Mapping[int, int], max_count: int, rng: np.random.Generator) -> list[int]:
    """Up to ``max_count`` distinct concepts, weighted by their multiplicity."""
    if not bag:
        return []
    ids = np.array(sorted(bag), dtype=np.int64)
    weights = np.array([bag[i] for i in ids], dtype=np.float64)
    size = min(max_count, len(ids))
    return rng.choice(ids, size=size, replace=False, p=weights / weights.sum()).tolist()


def sample_concept_negatives(exclude: Iterable[int], n_concepts: int, k: int, rng: np.random.Generator) -> list[int]:
    exclude = set(exclude)
    if len(exclude) >= n_concepts:
        return []
    out: list[int] = []
    while len(out) < k:
        c = int(rng.integers(0, n_concepts))
        if c not in exclude:
            out.append(c)
    return out


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def contrastive_bce(pos_scores: np.ndarray, neg_scores: np.ndarray, neg_mask: np.ndarray | None = None):
    """Per-row BCE ``-log s(p) - sum log(1 - s(n))`` and its score gradients.

    ``pos_scores`` has shape (B,), ``neg_scores`` (B, K) with K possibly 0;
    ``neg_mask`` zeroes padded negatives.
    """
    neg_terms = -log_sigmoid(-neg_scores)
    g_neg = sigmoid(neg_scores)
    if neg_mask is not None:
        neg_terms = neg_terms * neg_mask
        g_neg = g_neg * neg_mask
    loss = -log_sigmoid(pos_scores) + neg_terms.sum(axis=1)
    return loss, sigmoid(pos_scores) - 1.0, g_neg


def _pair_loss(user_vec, pos_vec, neg_vecs):
    u = np.asarray(user_vec, dtype=np.float64)
    p = np.asarray(pos_vec, dtype=np.float64)
    negs = np.asarray(neg_vecs, dtype=np.float64).reshape(-1, u.shape[0])
    if p.shape != u.shape:
        raise ValueError("positive vector dimension differs from the user vector")
    loss, g_pos, g_neg = contrastive_bce(np.array([u @ p]), (negs @ u)[None, :])
    g_neg = g_neg[0]
    grads = {
        "user": g_pos[0] * p + g_neg @ negs,
        "positive": g_pos[0] * u,
        "negatives": g_neg[:, None] * u[None, :],
    }
    return float(loss[0]), grads


def loss_patient_document(user_vec, pos_doc_vec, neg_doc_vecs):
    """BCE of a patient against one true and several counterfactual documents.

    Returns ``(loss, grads)`` with grads keyed ``user``, ``positive`` and
    ``negatives``.
    """
    return _pair_loss(user_vec, pos_doc_vec, neg_doc_vecs)


def loss_patient_concept(user_vec, pos_concept_vec, neg_concept_vecs):
    return _pair_loss(user_vec, pos_concept_vec, neg_concept_vecs)


def joint_loss(concept_loss: float, doc_loss: float, lambda_: float, alpha: float = 0.0, mlm_loss: float = 0.0) -> float:
    return lambda_ * concept_loss + (1.0 - lambda_) * doc_loss + alpha * mlm_loss


# --------------------------------------------------------------------------
# parameters and optimizer
# --------------------------------------------------------------------------


@dataclass
class ModelParams:
    words: EmbeddingTable
    users: EmbeddingTable
    concepts: EmbeddingTable | None = None
    gru: GruParams | None = None

    def named(self, include_concepts: bool = True) -> dict[str, Param]:
        out: dict[str, Param] = {"words": self.words, "users": self.users}
        if self.concepts is not None and include_concepts:
            out["concepts"] = self.concepts
        if self.gru is not None:
            out.update(self.gru.parameters())
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.named().items()}


class RMSprop:
    """c <- rho c + (1 - rho) g^2;  theta <- theta - lr g / (sqrt(c) + eps)."""

    def __init__(self, params: Mapping[str, Param], lr: float, decay: float = 0.9, eps: float = 1e-8):
        self.params = dict(params)
        self.lr, self.decay, self.eps = lr, decay, eps
        self.cache = {name: np.zeros_like(p.value) for name, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            c = self.cache[name]
            c *= self.decay
            c += (1.0 - self.decay) * p.grad * p.grad
            p.value -= self.lr * p.grad / (np.sqrt(c) + self.eps)
            p.zero_grad()


def rmsprop_update(optimizer: RMSprop) -> None:
    optimizer.step()


def build_encoder(config: TrainConfig, words: EmbeddingTable, gru: GruParams | None):
    if config.encoder == "meanpool":
        return MeanPoolEncoder(words)
    return BiGRUEncoder(words, gru, config.dropout)


def concept_surface_ids(lexicon: Sequence[LexiconEntry], vocab: Vocabulary) -> dict[str, list[int]]:
    return {e.concept_id: vocab.encode(e.surface_forms[0]) for e in lexicon if e.surface_forms}


def init_concept_table(
    lexicon: Sequence[LexiconEntry],
    words: EmbeddingTable,
    vocab: Vocabulary,
    concept_ids: Sequence[str] | None = None,
) -> EmbeddingTable:
    """Each concept starts as the mean of its first surface form's word vectors.

    Out-of-vocabulary tokens contribute the UNK vector. Rows follow
    ``concept_ids`` (default: lexicon order).
    """
    surfaces = concept_surface_ids(lexicon, vocab)
    if concept_ids is None:
        concept_ids = list(surfaces)
    missing = [c for c in concept_ids if c not in surfaces]
    if missing:
        raise KeyError(f"concepts missing from the lexicon: {missing[:5]}")
    table = np.stack([words.value[surfaces[c]].mean(axis=0) for c in concept_ids]) if concept_ids else np.zeros((0, words.dim))
    return EmbeddingTable(table)


def build_concept_index(bags: Sequence[Mapping[str, int]], max_size: int) -> list[str]:
    totals: Counter = Counter()
    for bag in bags:
        totals.update(bag)
    ranked = sorted(totals.items(), key=lambda kv: (-kv[1], kv[0]))
    return [cid for cid, _ in ranked[:max_size]]


# --------------------------------------------------------------------------
# joint step
# --------------------------------------------------------------------------


@dataclass
class StepResult:
    total: float
    doc_loss: float
    concept_loss: float


class JointTrainer:
    """Holds parameters, encoder and optimizer; ``step`` runs one batch."""

    def __init__(self, params: ModelParams, config: TrainConfig):
        self.params, self.config = params, config
        self.encoder = build_encoder(config, params.words, params.gru)
        use_concepts = config.enable_concepts and params.concepts is not None
        self.optimizer = RMSprop(params.named(include_concepts=use_concepts), config.lr, config.rmsprop_decay, config.rmsprop_eps)

    def step(self, batch: Sequence[TrainingExample], rng: np.random.Generator) -> StepResult:
        return joint_step(batch, self.params, self.config, self.encoder, self.optimizer, rng)


def joint_step(
    batch: Sequence[TrainingExample],
    params: ModelParams,
    config: TrainConfig,
    encoder=None,
    optimizer: RMSprop | None = None,
    rng: np.random.Generator | None = None,
    apply_update: bool = True,
) -> StepResult:
    """One optimisation step on ``lambda * L(u,c) + (1 - lambda) * L(u,d)``.

    Both task losses are means over their instances in the batch: one
    instance per positive snippet and one per positive concept. Gradients are
    accumulated and, when ``apply_update``, an RMSprop step is taken.
    """
    if not batch:
        raise ValueError("empty batch")
    encoder = encoder or build_encoder(config, params.words, params.gru)
    lam = config.lambda_
    B = len(batch)
    pids = np.array([ex.patient_id for ex in batch], dtype=np.int64)
    users = params.users.value[pids]

    # patient-document task; a snippet shared by several examples is encoded once
    slots: dict[int, int] = {}
    seqs: list[np.ndarray] = []

    def slot(snip: Snippet) -> int:
        if id(snip) not in slots:
            slots[id(snip)] = len(seqs)
            seqs.append(snip.token_ids)
        return slots[id(snip)]

    n_neg = {len(ex.doc_negatives) + len(ex.token_negatives) for ex in batch}
    if len(n_neg) != 1:
        raise ValueError("all examples in a batch need the same number of negatives")
    K = n_neg.pop()
    pos_idx = np.array([slot(ex.positive) for ex in batch], dtype=np.int64)
    neg_idx = np.array(
        [[slot(s) for s in ex.doc_negatives + ex.token_negatives] for ex in batch], dtype=np.int64
    ).reshape(B, K)
    docs, tape = encoder.forward(seqs, training=True, rng=rng)
    pos_docs = docs[pos_idx]
    neg_docs = docs[neg_idx]
    pos_s = np.einsum("bd,bd->b", users, pos_docs)
    neg_s = np.einsum("bd,bkd->bk", users, neg_docs)
    d_loss, g_pos, g_neg = contrastive_bce(pos_s, neg_s)
    doc_loss = float(d_loss.mean())
    scale_d = (1.0 - lam) / B
    g_pos, g_neg = g_pos * scale_d, g_neg * scale_d
    grad_users = g_pos[:, None] * pos_docs + np.einsum("bk,bkd->bd", g_neg, neg_docs)
    grad_docs = np.zeros_like(docs)
    np.add.at(grad_docs, pos_idx, g_pos[:, None] * users)
    np.add.at(grad_docs, neg_idx.ravel(), (g_neg[:, :, None] * users[:, None, :]).reshape(B * K, docs.shape[1]))

    # patient-concept task
    concept_loss = 0.0
    use_concepts = config.enable_concepts and params.concepts is not None and lam > 0.0
    if use_concepts:
        rows, pos_c, neg_c = [], [], []
        for b, ex in enumerate(batch):
            for c, negs in zip(ex.positive_concepts, ex.concept_negatives):
                rows.append(b)
                pos_c.append(c)
                neg_c.append(negs)
        if rows:
            M = len(rows)
            K_c = max(len(n) for n in neg_c)
            rows_a = np.array(rows, dtype=np.int64)
            pos_a = np.array(pos_c, dtype=np.int64)
            neg_a = np.zeros((M, K_c), dtype=np.int64)
            mask = np.zeros((M, K_c))
            for i, negs in enumerate(neg_c):
                neg_a[i, : len(negs)] = negs
                mask[i, : len(negs)] = 1.0
            C = params.concepts.value
            u = users[rows_a]
            cp, cn = C[pos_a], C[neg_a]
            c_loss, gp, gn = contrastive_bce(np.einsum("md,md->m", u, cp), np.einsum("md,mkd->mk", u, cn), mask)
            concept_loss = float(c_loss.mean())
            scale_c = lam / len(rows)
            gp, gn = gp * scale_c, gn * scale_c
            np.add.at(grad_users, rows_a, gp[:, None] * cp + np.einsum("mk,mkd->md", gn, cn))
            np.add.at(params.concepts.grad, pos_a, gp[:, None] * u)
            np.add.at(params.concepts.grad, neg_a.ravel(), (gn[:, :, None] * u[:, None, :]).reshape(-1, u.shape[1]))

    total = joint_loss(concept_loss, doc_loss, lam, config.alpha)
    if not math.isfinite(total):
        raise FloatingPointError(
            f"non-finite loss (doc={doc_loss}, concept={concept_loss}); max |user|="
            f"{np.abs(params.users.value).max():.3g}, max |word|={np.abs(params.words.value).max():.3g}"
        )
    np.add.at(params.users.grad, pids, grad_users)
    tape.backward(grad_docs)
    if apply_update:
        if optimizer is None:
            raise ValueError("apply_update needs an optimizer")
        optimizer.step()
    return StepResult(total, doc_loss, concept_loss)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    loss_log: list[dict]
    concept_ids: list[str]
    config: TrainConfig


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for init, sampling and dropout from one seed."""
    names = ("init", "sample", "dropout")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(ss) for name, ss in zip(names, children)}


def initial_word_table(vocab: Vocabulary, config: TrainConfig) -> EmbeddingTable:
    """The word table ``train`` starts from when no pretrained vectors are given."""
    rng = rng_streams(config.seed)["init"]
    table = EmbeddingTable.uniform(len(vocab), config.dim, rng, config.init_scale)
    table.value[vocab.pad_index] = 0.0
    return table


def initial_params(
    corpus: Corpus,
    vocab: Vocabulary,
    config: TrainConfig,
    concept_ids: Sequence[str] = (),
    lexicon: Sequence[LexiconEntry] | None = None,
    words: EmbeddingTable | None = None,
) -> ModelParams:
    rng = rng_streams(config.seed)["init"]
    w = EmbeddingTable.uniform(len(vocab), config.dim, rng, config.init_scale)
    w.value[vocab.pad_index] = 0.0
    if words is not None:
        if words.value.shape != w.value.shape:
            raise ValueError("pretrained word table shape does not match vocabulary x dim")
        w = EmbeddingTable(words.value.copy())
    users = EmbeddingTable.uniform(len(corpus.patients), config.dim, rng, config.init_scale)
    gru = None
    if config.encoder == "bigru":
        gru = GruParams.init(config.dim, config.hidden, rng, project_to=config.dim if config.gru_project else None)
    concepts = None
    if concept_ids:
        concepts = init_concept_table(lexicon or [], w, vocab, concept_ids)
    return ModelParams(w, users, concepts, gru)


def _encode_notes(corpus: Corpus, vocab: Vocabulary) -> list[np.ndarray]:
    return [np.asarray(vocab.encode(n.tokens), dtype=np.int64) for n in corpus.notes]


def make_examples(
    snippets: Sequence[Snippet],
    pool: SnippetPool,
    bags: Sequence[Mapping[int, int]],
    n_concepts: int,
    vocab_size: int,
    config: TrainConfig,
    rng: np.random.Generator,
) -> list[TrainingExample]:
    out = []
    for snip in snippets:
        ex = TrainingExample(snip.patient_id, snip)
        if config.enable_contrastive:
            ex.doc_negatives = sample_doc_negatives(snip.patient_id, pool, config.negatives_per_positive, rng)
            ex.token_negatives = [
                make_token_negative(snip, vocab_size, config.token_replace_prob, rng)
                for _ in range(config.token_negatives)
            ]
        if config.enable_concepts and n_concepts:
            bag = bags[snip.patient_id]
            ex.positive_concepts = sample_positive_concepts(bag, config.max_positive_concepts, rng)
            ex.concept_negatives = [
                sample_concept_negatives(bag.keys(), n_concepts, config.concept_negatives, rng)
                if config.enable_contrastive
                else []
                for _ in ex.positive_concepts
            ]
        out.append(ex)
    return out


def train(
    corpus: Corpus,
    vocab: Vocabulary,
    config: TrainConfig,
    concept_bags: Sequence[Mapping[str, int]] | None = None,
    lexicon: Sequence[LexiconEntry] | None = None,
    words: EmbeddingTable | None = None,
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    """Train CAUE user embeddings.

    ``concept_bags`` holds one concept-id multiset per patient (in patient id
    order); concepts need ``lexicon`` for their initial vectors.
    """
    if len(corpus.patients) < 2:
        raise ValueError("training needs at least two patients")
    concept_ids: list[str] = []
    bags_idx: list[dict[int, int]] = [{} for _ in corpus.patients]
    if config.enable_concepts and concept_bags is not None:
        if len(concept_bags) != len(corpus.patients):
            raise ValueError("need one concept bag per patient")
        if lexicon is not None:
            allowed = {e.concept_id for e in lexicon if not is_excluded(e.semantic_type)}
            concept_bags = [Counter({c: n for c, n in bag.items() if c in allowed}) for bag in concept_bags]
        concept_ids = build_concept_index(concept_bags, config.concept_vocab_size)
        cidx = {c: i for i, c in enumerate(concept_ids)}
        bags_idx = [{cidx[c]: n for c, n in bag.items() if c in cidx} for bag in concept_bags]

    params = initial_params(corpus, vocab, config, concept_ids, lexicon, words)
    streams = rng_streams(config.seed)
    sample_rng, dropout_rng = streams["sample"], streams["dropout"]
    trainer = JointTrainer(params, config)
    note_ids = _encode_notes(corpus, vocab)
    loss_log: list[dict] = []

    for epoch in range(1, config.epochs + 1):
        snippets = [
            s
            for note, ids in zip(corpus.notes, note_ids)
            for s in random_split(ids, config.snippet_min, config.snippet_max, sample_rng, note.patient_id, note.note_id)
        ]
        pool = SnippetPool(snippets)
        order = sample_rng.permutation(len(snippets))
        totals, docs, concepts, sizes = [], [], [], []
        for start in range(0, len(order), config.batch_size):
            chunk = [snippets[i] for i in order[start : start + config.batch_size]]
            neg_pool = pool
            if config.doc_negative_source == "batch":
                in_batch = SnippetPool(chunk)
                # every example needs at least one other-patient snippet in the batch
                if in_batch.n_patients >= 2:
                    neg_pool = in_batch
            batch = make_examples(chunk, neg_pool, bags_idx, len(concept_ids), len(vocab), config, sample_rng)
            res = trainer.step(batch, dropout_rng)
            totals.append(res.total)
            docs.append(res.doc_loss)
            concepts.append(res.concept_loss)
            sizes.append(len(batch))
        w = np.asarray(sizes, dtype=np.float64)
        entry = {
            "epoch": epoch,
            "loss": float(np.average(totals, weights=w)),
            "doc_loss": float(np.average(docs, weights=w)),
            "concept_loss": float(np.average(concepts, weights=w)),
            "batches": len(sizes),
        }
        loss_log.append(entry)
        logger.info("epoch %d loss %.4f (doc %.4f, concept %.4f)", epoch, entry["loss"], entry["doc_loss"], entry["concept_loss"])
        if checkpoint_dir is not None:
            save_checkpoint(
                Path(checkpoint_dir) / f"checkpoint_epoch{epoch:03d}.npz",
                params, config, vocab, concept_ids, loss_log, streams,
            )
    return TrainResult(params, loss_log, concept_ids, config)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def _zip_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping) -> None:
    """Write an ``.npz``-compatible archive with fixed timestamps, atomically.

    Byte-identical output for identical inputs, unlike ``np.savez``.
    """
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            _zip_entry(zf, f"{name}.npy", buf.getvalue())
        _zip_entry(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
    tmp.replace(path)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        arrays = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                with zf.open(name) as fh:
                    arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
    return arrays, meta


def save_checkpoint(path, params: ModelParams, config: TrainConfig, vocab: Vocabulary, concept_ids, loss_log, streams=None) -> None:
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config.to_dict(),
        "config_fingerprint": config.fingerprint(),
        "vocab": vocab.to_dict(),
        "concept_ids": list(concept_ids),
        "loss_log": loss_log,
        "rng_state": {k: g.bit_generator.state for k, g in (streams or {}).items()},
    }
    save_arrays(path, params.arrays(), meta)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    arrays, meta = load_arrays(path)
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('format_version')!r}")
    gru = None
    if "gru.fwd.W" in arrays:
        dirs = {
            tag: GruDirection(Param(arrays[f"gru.{tag}.W"]), Param(arrays[f"gru.{tag}.U"]), Param(arrays[f"gru.{tag}.b"]))
            for tag in ("fwd", "bwd")
        }
        proj = Param(arrays["gru.proj"]) if "gru.proj" in arrays else None
        gru = GruParams(dirs["fwd"], dirs["bwd"], proj)
    concepts = EmbeddingTable(arrays["concepts"]) if "concepts" in arrays else None
    params = ModelParams(EmbeddingTable(arrays["words"]), EmbeddingTable(arrays["users"]), concepts, gru)
    return params, meta
