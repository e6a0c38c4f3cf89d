"""word2user and usr2vec baselines, with and without medical concepts."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from .concepts import LexiconEntry
from .corpus import Corpus, Vocabulary
from .nn import DIM, EmbeddingTable, log_sigmoid, sigmoid
from .training import RMSprop, TrainConfig, build_concept_index, init_concept_table, initial_word_table

logger = logging.getLogger(__name__)

KINDS = ("word2user", "usr2vec", "word2user_concept", "usr2vec_concept")


@dataclass
class BaselineSpec:
    kind: str = "word2user"
    epochs: int = 10
    negatives: int = 3
    batch_size: int = 256
    lr: float = 1e-3
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    unigram_power: float = 1.0
    concat: bool = False
    dim: int = DIM
    init_scale: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown baseline kind {self.kind!r}; expected one of {KINDS}")

    @classmethod
    def from_dict(cls, data: Mapping) -> "BaselineSpec":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown baseline config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def _default_words(vocab: Vocabulary, spec: BaselineSpec) -> EmbeddingTable:
    return initial_word_table(vocab, TrainConfig(seed=spec.seed, dim=spec.dim, init_scale=spec.init_scale))


def word2user(corpus: Corpus, vocab: Vocabulary, words: EmbeddingTable) -> np.ndarray:
    """Mean word vector over all tokens of each patient's notes."""
    out = np.empty((len(corpus.patients), words.dim))
    for p in corpus.patients:
        ids = vocab.encode(corpus.patient_tokens(p.patient_id))
        if not ids:
            raise ValueError(f"patient {p.patient_id} has no tokens")
        out[p.patient_id] = words.value[ids].mean(axis=0)
    return out


def word2user_concept(
    corpus: Corpus,
    vocab: Vocabulary,
    words: EmbeddingTable,
    concept_table: EmbeddingTable,
    concept_ids: Sequence[str],
    concept_bags: Sequence[Mapping[str, int]],
    concat: bool = False,
) -> np.ndarray:
    """Combine the token mean with the mean concept vector of each patient.

    The two halves are averaged back to ``dim`` (or concatenated with
    ``concat``). Patients without concepts keep their token mean.
    """
    tokens = word2user(corpus, vocab, words)
    index = {c: i for i, c in enumerate(concept_ids)}
    concept_mean = tokens.copy()
    for pid, bag in enumerate(concept_bags):
        rows = [index[c] for c, n in bag.items() if c in index for _ in range(n)]
        if rows:
            concept_mean[pid] = concept_table.value[rows].mean(axis=0)
    if concat:
        return np.concatenate([tokens, concept_mean], axis=1)
    return (tokens + concept_mean) / 2.0


@dataclass
class BaselineResult:
    users: np.ndarray
    loss_log: list[dict]
    words: EmbeddingTable
    concepts: EmbeddingTable | None = None


def _pair_bce(u, pos, negs):
    """Batched BCE of users against one positive and K negative vectors."""
    ps = np.einsum("bd,bd->b", u, pos)
    ns = np.einsum("bd,bkd->bk", u, negs)
    loss = -log_sigmoid(ps) - log_sigmoid(-ns).sum(axis=1)
    gp = sigmoid(ps) - 1.0
    gn = sigmoid(ns)
    return loss, gp, gn


def _token_pairs(corpus: Corpus, vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    pids, toks = [], []
    for p in corpus.patients:
        ids = [i for i in vocab.encode(corpus.patient_tokens(p.patient_id)) if i >= 2]
        pids.extend([p.patient_id] * len(ids))
        toks.extend(ids)
    return np.asarray(pids, dtype=np.int64), np.asarray(toks, dtype=np.int64)


def usr2vec_train(
    corpus: Corpus,
    vocab: Vocabulary,
    spec: BaselineSpec | None = None,
    words: EmbeddingTable | None = None,
    concept_bags: Sequence[Mapping[str, int]] | None = None,
    lexicon: Sequence[LexiconEntry] | None = None,
) -> BaselineResult:
    """Patient embeddings from predicting which tokens each patient's notes contain.

    Each (patient, token) occurrence is a positive scored by sigma(u . w) against
    ``spec.negatives`` tokens drawn from the unigram distribution (raised to
    ``unigram_power``). With ``concept_bags`` a patient-concept task with
    negatives absent from the patient is added with equal weight.
    """
    spec = spec or BaselineSpec(kind="usr2vec")
    if len(corpus.patients) < 2:
        raise ValueError("usr2vec needs at least two patients")
    rng = np.random.default_rng(spec.seed)
    words = EmbeddingTable((words if words is not None else _default_words(vocab, spec)).value.copy())
    users = EmbeddingTable.uniform(len(corpus.patients), words.dim, rng, spec.init_scale)

    pids, toks = _token_pairs(corpus, vocab)
    counts = np.bincount(toks, minlength=len(vocab)).astype(np.float64) ** spec.unigram_power
    unigram_cdf = np.cumsum(counts / counts.sum())
    unigram_cdf[-1] = 1.0

    concepts = None
    c_pids = c_ids = None
    bag_sets: list[set[int]] = []
    if concept_bags is not None and any(concept_bags):
        concept_ids = build_concept_index(concept_bags, 10**9)
        concepts = init_concept_table(lexicon or [], words, vocab, concept_ids)
        cidx = {c: i for i, c in enumerate(concept_ids)}
        c_pids_l, c_ids_l = [], []
        for pid, bag in enumerate(concept_bags):
            bag_sets.append({cidx[c] for c in bag})
            for c, n in sorted(bag.items()):
                c_pids_l.extend([pid] * n)
                c_ids_l.extend([cidx[c]] * n)
        c_pids, c_ids = np.asarray(c_pids_l, dtype=np.int64), np.asarray(c_ids_l, dtype=np.int64)

    params = {"users": users, "words": words}
    if concepts is not None:
        params["concepts"] = concepts
    opt = RMSprop(params, spec.lr, spec.rmsprop_decay, spec.rmsprop_eps)
    n_steps = math.ceil(len(toks) / spec.batch_size)
    loss_log = []
    for epoch in range(1, spec.epochs + 1):
        order = rng.permutation(len(toks))
        c_order = rng.permutation(len(c_ids)) if concepts is not None else None
        c_batch = math.ceil(len(c_ids) / n_steps) if concepts is not None else 0
        total, tok_total, con_total = 0.0, 0.0, 0.0
        for step in range(n_steps):
            sel = order[step * spec.batch_size : (step + 1) * spec.batch_size]
            bp, bt = pids[sel], toks[sel]
            negs = np.searchsorted(unigram_cdf, rng.random((len(sel), spec.negatives)), side="right")
            u = users.value[bp]
            wpos, wneg = words.value[bt], words.value[negs]
            loss, gp, gn = _pair_bce(u, wpos, wneg)
            tok_loss = float(loss.mean())
            gp, gn = gp / len(sel), gn / len(sel)
            np.add.at(users.grad, bp, gp[:, None] * wpos + np.einsum("bk,bkd->bd", gn, wneg))
            np.add.at(words.grad, bt, gp[:, None] * u)
            np.add.at(words.grad, negs.ravel(), (gn[:, :, None] * u[:, None, :]).reshape(-1, u.shape[1]))
            con_loss = 0.0
            if concepts is not None:
                csel = c_order[step * c_batch : (step + 1) * c_batch]
                if len(csel):
                    con_loss = _concept_step(users, concepts, c_pids[csel], c_ids[csel], bag_sets, spec.negatives, rng)
            opt.step()
            total += tok_loss + con_loss
            tok_total += tok_loss
            con_total += con_loss
        loss_log.append({
            "epoch": epoch,
            "loss": total / n_steps,
            "token_loss": tok_total / n_steps,
            "concept_loss": con_total / n_steps,
        })
        logger.info("usr2vec epoch %d loss %.4f", epoch, total / n_steps)
    return BaselineResult(users.value.copy(), loss_log, words, concepts)


def _concept_step(users, concepts, bp, bc, bag_sets, k, rng) -> float:
    n_concepts = concepts.rows
    negs = np.empty((len(bp), k), dtype=np.int64)
    mask = np.ones((len(bp), k))
    for i, pid in enumerate(bp):
        exclude = bag_sets[pid]
        if len(exclude) >= n_concepts:
            negs[i] = 0
            mask[i] = 0.0
            continue
        for j in range(k):
            c = int(rng.integers(0, n_concepts))
            while c in exclude:
                c = int(rng.integers(0, n_concepts))
            negs[i, j] = c
    u = users.value[bp]
    cpos, cneg = concepts.value[bc], concepts.value[negs]
    loss, gp, gn = _pair_bce(u, cpos, cneg)
    neg_terms = -log_sigmoid(-np.einsum("bd,bkd->bk", u, cneg))
    loss = loss - (neg_terms * (1.0 - mask)).sum(axis=1)
    gn = gn * mask
    n = len(bp)
    gp, gn = gp / n, gn / n
    np.add.at(users.grad, bp, gp[:, None] * cpos + np.einsum("bk,bkd->bd", gn, cneg))
    np.add.at(concepts.grad, bc, gp[:, None] * u)
    np.add.at(concepts.grad, negs.ravel(), (gn[:, :, None] * u[:, None, :]).reshape(-1, u.shape[1]))
    return float(loss.mean())


def usr2vec_concept_train(
    corpus: Corpus,
    vocab: Vocabulary,
    concept_bags: Sequence[Mapping[str, int]],
    lexicon: Sequence[LexiconEntry],
    spec: BaselineSpec | None = None,
    words: EmbeddingTable | None = None,
) -> BaselineResult:
    return usr2vec_train(corpus, vocab, spec or BaselineSpec(kind="usr2vec_concept"), words, concept_bags, lexicon)
