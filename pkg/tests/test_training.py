import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from caue.concepts import LexiconEntry
from caue.corpus import Vocabulary
from caue.nn import EmbeddingTable, GruParams, Param, grad_check
from caue.training import (
    ModelParams,
    RMSprop,
    Snippet,
    SnippetPool,
    TrainConfig,
    TrainingExample,
    contrastive_bce,
    init_concept_table,
    initial_params,
    joint_loss,
    joint_step,
    load_checkpoint,
    loss_patient_concept,
    loss_patient_document,
    make_token_negative,
    random_split,
    rmsprop_update,
    sample_concept_negatives,
    sample_doc_negatives,
    sample_positive_concepts,
    train,
)

LN2 = math.log(2.0)


def _pool(owners, length=5):
    return SnippetPool([Snippet(o, i, np.arange(2, 2 + length)) for i, o in enumerate(owners)])


# random split ---------------------------------------------------------------


def test_short_note_is_one_snippet():
    (snip,) = random_split(np.arange(100), 200, 512, np.random.default_rng(0))
    assert len(snip) == 100


def test_long_note_pieces_in_range():
    pieces = random_split(np.arange(1000), 200, 512, np.random.default_rng(1))
    assert all(200 <= len(p) <= 512 for p in pieces[:-1])
    assert 1 <= len(pieces[-1]) <= 512
    assert [p.start for p in pieces] == list(np.cumsum([0] + [len(p) for p in pieces[:-1]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3000), st.integers(0, 2**32 - 1))
def test_random_split_concatenation(n, seed):
    ids = np.random.default_rng(seed).integers(0, 50, n)
    pieces = random_split(ids, 200, 512, np.random.default_rng(seed))
    npt.assert_array_equal(np.concatenate([p.token_ids for p in pieces]), ids)
    assert all(len(p) > 0 for p in pieces)


def test_random_split_rejects_bad_range():
    with pytest.raises(ValueError):
        random_split(np.arange(10), 5, 4, np.random.default_rng(0))


# counterfactual sampling ------------------------------------------------------


def test_doc_negatives_come_from_other_patients():
    pool = _pool(list(range(10)) * 2)
    rng = np.random.default_rng(0)
    negs = sample_doc_negatives(4, pool, 3, rng)
    assert len(negs) == 3 and all(s.patient_id != 4 for s in negs)
    two = _pool([0, 1, 1, 0])
    assert all(s.patient_id == 1 for s in sample_doc_negatives(0, two, 3, rng))


def test_doc_negatives_need_two_patients():
    with pytest.raises(ValueError):
        sample_doc_negatives(0, _pool([0, 0]), 3, np.random.default_rng(0))


def test_doc_negatives_uniform_over_non_target_snippets():
    owners = [0, 1, 1, 2, 3, 3, 3, 4]
    pool = _pool(owners)
    negs = sample_doc_negatives(3, pool, 100_000, np.random.default_rng(2))
    counts = np.bincount([s.note_id for s in negs], minlength=len(owners))
    observed = counts[[i for i, o in enumerate(owners) if o != 3]]
    assert counts[[4, 5, 6]].sum() == 0
    assert stats.chisquare(observed).pvalue > 0.01


def test_token_negative_limits():
    snip = Snippet(0, 0, np.arange(2, 42))
    rng = np.random.default_rng(3)
    full = make_token_negative(snip, 10**9, 1.0, rng)
    assert len(full) == len(snip) and np.mean(full.token_ids == snip.token_ids) < 0.05
    same = make_token_negative(snip, 10**9, 1e-12, rng)
    npt.assert_array_equal(same.token_ids, snip.token_ids)
    assert full.token_ids.min() >= 2
    with pytest.raises(ValueError):
        make_token_negative(snip, 100, 0.0, rng)


def test_token_negative_replaced_fraction():
    snip = Snippet(0, 0, np.full(10, 5))
    rng = np.random.default_rng(4)
    frac = np.mean([np.mean(make_token_negative(snip, 10**9, 0.5, rng).token_ids != 5) for _ in range(10_000)])
    assert abs(frac - 0.5) < 0.02


def test_concept_sampling():
    rng = np.random.default_rng(5)
    bag = {3: 10, 7: 1, 9: 1}
    picks = [sample_positive_concepts(bag, 1, rng)[0] for _ in range(3000)]
    assert np.mean(np.array(picks) == 3) == pytest.approx(10 / 12, abs=0.03)
    assert sorted(sample_positive_concepts(bag, 5, rng)) == [3, 7, 9]
    assert sample_positive_concepts({}, 5, rng) == []
    negs = sample_concept_negatives(bag, 12, 3, rng)
    assert len(negs) == 3 and not set(negs) & set(bag)
    assert sample_concept_negatives(range(4), 4, 3, rng) == []


# losses ---------------------------------------------------------------------------


def test_doc_loss_at_zero_scores():
    u = np.zeros(300)
    loss, _ = loss_patient_document(u, np.ones(300), np.ones((1, 300)))
    assert loss == pytest.approx(2 * LN2, abs=1e-12)


def test_concept_loss_three_negatives_and_empty():
    u = np.zeros(300)
    loss, _ = loss_patient_concept(u, np.ones(300), np.ones((3, 300)))
    assert abs(loss - 4 * LN2) < 1e-12
    loss, grads = loss_patient_concept(u, np.ones(300), np.zeros((0, 300)))
    assert abs(loss - LN2) < 1e-12
    assert grads["negatives"].shape == (0, 300)


def test_loss_vanishes_with_separation():
    u = np.array([1.0, 0.0])
    loss, _ = loss_patient_document(u, np.array([1e3, 0.0]), np.array([[-1e3, 0.0], [-1e3, 1.0]]))
    assert 0.0 <= loss < 1e-300 or loss == 0.0


def test_loss_matches_scalar_oracle():
    rng = np.random.default_rng(6)
    u, p, negs = rng.normal(size=5), rng.normal(size=5), rng.normal(size=(3, 5))
    sig = lambda x: 1.0 / (1.0 + math.exp(-x))
    expected = -math.log(sig(float(u @ p))) - sum(math.log(1.0 - sig(float(u @ n))) for n in negs)
    loss, _ = loss_patient_document(u, p, negs)
    assert loss == pytest.approx(expected, rel=1e-12)


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    u, p, negs = rng.normal(size=6), rng.normal(size=6), rng.normal(size=(3, 6))
    _, grads = loss_patient_concept(u, p, negs)
    report = grad_check(
        lambda: loss_patient_concept(u, p, negs)[0],
        {"user": u, "positive": p, "negatives": negs},
        grads,
    )
    assert report.ok, report


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8), st.floats(-30, 30))
def test_bce_nonnegative(negs, pos):
    loss, _, _ = contrastive_bce(np.array([pos]), np.array([negs]))
    assert loss[0] >= 0.0


def test_joint_loss_combination():
    assert joint_loss(1.0, 2.0, 0.3) == pytest.approx(1.7, abs=1e-15)
    assert joint_loss(1.0, 2.0, 0.0) == 2.0
    assert joint_loss(1.0, 2.0, 1.0) == 1.0


# optimizer and concept init ----------------------------------------------------


def test_rmsprop_zero_gradient_is_noop():
    p = Param(np.array([1.0, -2.0]))
    opt = RMSprop({"p": p}, lr=0.1)
    rmsprop_update(opt)
    npt.assert_array_equal(p.value, [1.0, -2.0])


def test_rmsprop_first_step_closed_form():
    p = Param(np.zeros(3))
    opt = RMSprop({"p": p}, lr=1e-4, decay=0.9, eps=1e-8)
    p.grad[:] = 1.0
    opt.step()
    npt.assert_allclose(p.value, -1e-4 / (math.sqrt(0.1) + 1e-8), rtol=1e-15)
    npt.assert_array_equal(p.grad, 0.0)


def test_rmsprop_constant_gradient_step_tends_to_lr():
    p = Param(np.zeros(1))
    opt = RMSprop({"p": p}, lr=1e-3, decay=0.9, eps=1e-8)
    for _ in range(300):
        before = p.value.copy()
        p.grad[:] = 2.5
        opt.step()
    assert abs(before - p.value)[0] == pytest.approx(1e-3, rel=1e-6)


def test_concept_init_averages_first_surface_form():
    vocab = Vocabulary(["chest", "pain", "cough", "a"], 10)
    words = EmbeddingTable(np.random.default_rng(8).normal(size=(len(vocab), 4)))
    lex = [
        LexiconEntry("C1", "Finding", [("cough",)]),
        LexiconEntry("C2", "Finding", [("chest", "pain"), ("cough",)]),
        LexiconEntry("C3", "Finding", [("chest", "pain", "zzz")]),
    ]
    table = init_concept_table(lex, words, vocab)
    v = {t: words.value[vocab.index(t)] for t in ("chest", "pain", "cough")}
    npt.assert_array_equal(table.value[0], v["cough"])
    npt.assert_allclose(table.value[1], (v["chest"] + v["pain"]) / 2, rtol=1e-15)
    npt.assert_allclose(table.value[2], (v["chest"] + v["pain"] + words.value[1]) / 3, rtol=1e-15)
    with pytest.raises(KeyError):
        init_concept_table(lex, words, vocab, ["C9"])


# joint step ---------------------------------------------------------------------


def _toy_model(encoder, rng, n_users=4, n_concepts=6, dim=6, vocab=12):
    words = EmbeddingTable(rng.normal(scale=0.5, size=(vocab, dim)))
    users = EmbeddingTable(rng.normal(scale=0.5, size=(n_users, dim)))
    concepts = EmbeddingTable(rng.normal(scale=0.5, size=(n_concepts, dim)))
    gru = None
    if encoder == "bigru":
        gru = GruParams.init(dim, dim // 2, rng)
        for p in gru.parameters().values():
            p.value[...] = rng.normal(scale=0.5, size=p.shape)
    return ModelParams(words, users, concepts, gru)


def _toy_batch(rng):
    def snip(pid, n):
        return Snippet(pid, pid, rng.integers(2, 12, n))

    a, b, c = snip(0, 4), snip(1, 3), snip(2, 2)
    return [
        TrainingExample(0, a, [b, c], [snip(0, 4)], [1, 2], [[0, 3], [4, 5]]),
        TrainingExample(1, b, [a, c], [snip(1, 3)], [0], [[2, 3]]),
    ]


@pytest.mark.parametrize("encoder", ["meanpool", "bigru"])
def test_joint_step_gradients(encoder):
    rng = np.random.default_rng(9)
    params = _toy_model(encoder, rng)
    batch = _toy_batch(rng)
    config = TrainConfig(encoder=encoder, dim=6, dropout=0.0)

    def loss_fn():
        res = joint_step(batch, params, config, apply_update=False)
        for p in params.named().values():
            p.zero_grad()
        return res.total

    joint_step(batch, params, config, apply_update=False)
    named = params.named()
    analytic = {k: p.grad.copy() for k, p in named.items()}
    for p in named.values():
        p.zero_grad()
    report = grad_check(loss_fn, {k: p.value for k, p in named.items()}, analytic)
    assert report.ok, report


def test_joint_step_lambda_boundaries():
    rng = np.random.default_rng(10)
    batch = _toy_batch(rng)
    for lam, field in ((0.0, "doc_loss"), (1.0, "concept_loss")):
        params = _toy_model("meanpool", np.random.default_rng(11))
        res = joint_step(batch, params, TrainConfig(encoder="meanpool", dim=6, lambda_=lam), apply_update=False)
        assert res.total == getattr(res, field)
    params = _toy_model("meanpool", np.random.default_rng(11))
    res = joint_step(batch, params, TrainConfig(encoder="meanpool", dim=6), apply_update=False)
    assert res.total == pytest.approx(0.3 * res.concept_loss + 0.7 * res.doc_loss, rel=1e-15)


def test_joint_step_leaves_absent_users_alone():
    rng = np.random.default_rng(12)
    params = _toy_model("meanpool", rng)
    config = TrainConfig(encoder="meanpool", dim=6)
    opt = RMSprop(params.named(), 0.1)
    before = params.users.value.copy()
    joint_step(_toy_batch(rng), params, config, optimizer=opt)
    npt.assert_array_equal(params.users.value[2:], before[2:])
    assert not np.array_equal(params.users.value[:2], before[:2])


def test_joint_step_positive_only_without_contrast():
    rng = np.random.default_rng(13)
    params = _toy_model("meanpool", rng)
    batch = _toy_batch(rng)
    for ex in batch:
        ex.doc_negatives, ex.token_negatives = [], []
        ex.concept_negatives = [[] for _ in ex.positive_concepts]
    res = joint_step(batch, params, TrainConfig(encoder="meanpool", dim=6), apply_update=False)
    u = params.users.value
    doc = [params.words.value[ex.positive.token_ids].mean(axis=0) for ex in batch]
    expected = np.mean([np.logaddexp(0.0, -u[i] @ d) for i, d in enumerate(doc)])
    assert res.doc_loss == pytest.approx(expected, rel=1e-12)


def test_joint_step_rejects_non_finite():
    rng = np.random.default_rng(14)
    params = _toy_model("meanpool", rng)
    params.users.value[0] = np.nan
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        joint_step(_toy_batch(rng), params, TrainConfig(encoder="meanpool", dim=6), apply_update=False)


# config ---------------------------------------------------------------------------


def test_config_validation_and_roundtrip():
    cfg = TrainConfig()
    assert cfg.hidden == 150 and cfg.lambda_ == 0.3 and cfg.lr == 1e-4
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert "lambda" in cfg.to_dict()
    for bad in ({"lambda": 1.5}, {"alpha": 0.03}, {"snippet_min": 600}, {"negatives_per_positive": 0}, {"bogus": 1}):
        with pytest.raises(ValueError):
            TrainConfig.from_dict(bad)
    assert TrainConfig(seed=1).fingerprint() != cfg.fingerprint()


# full training loop ----------------------------------------------------------------


def _small(**kw):
    base = dict(dim=16, epochs=15, lr=1e-2, encoder="bigru", seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_epochs_returns_initialization(tiny):
    corpus, vocab, lex, bags = tiny
    cfg = _small(epochs=0)
    res = train(corpus, vocab, cfg, bags, lex)
    init = initial_params(corpus, vocab, cfg, res.concept_ids, lex)
    assert res.loss_log == []
    for k, v in init.arrays().items():
        npt.assert_array_equal(res.params.arrays()[k], v)


def test_training_reduces_loss_and_is_deterministic(tiny, tmp_path):
    corpus, vocab, lex, bags = tiny
    cfg = _small()
    res = train(corpus, vocab, cfg, bags, lex, checkpoint_dir=tmp_path)
    assert res.loss_log[-1]["loss"] < res.loss_log[0]["loss"]
    again = train(corpus, vocab, cfg, bags, lex)
    assert again.loss_log == res.loss_log
    loaded, meta = load_checkpoint(tmp_path / "checkpoint_epoch015.npz")
    for k, v in res.params.arrays().items():
        npt.assert_array_equal(loaded.arrays()[k], v)
    assert meta["loss_log"] == res.loss_log
    assert meta["config_fingerprint"] == cfg.fingerprint()
    assert (tmp_path / "checkpoint_epoch015.npz").read_bytes() == (tmp_path / "checkpoint_epoch015.npz").read_bytes()


def test_concept_table_frozen_without_concept_task(tiny):
    corpus, vocab, lex, bags = tiny
    cfg = _small(epochs=2, enable_concepts=False, encoder="meanpool")
    res = train(corpus, vocab, cfg, bags, lex)
    assert res.params.concepts is None or res.loss_log[-1]["concept_loss"] == 0.0
    cfg = _small(epochs=2, lambda_=0.0, encoder="meanpool")
    res = train(corpus, vocab, cfg, bags, lex)
    init = initial_params(corpus, vocab, cfg, res.concept_ids, lex)
    npt.assert_array_equal(res.params.concepts.value, init.concepts.value)


def test_training_needs_two_patients(tiny):
    corpus, vocab, lex, bags = tiny
    from caue.corpus import Corpus

    one = Corpus(corpus.patient_notes(0), corpus.patients[:1], corpus.label_names)
    with pytest.raises(ValueError):
        train(one, vocab, _small(epochs=1), None, None)
