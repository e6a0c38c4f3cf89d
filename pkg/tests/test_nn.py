import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caue.nn import (
    BiGRUEncoder,
    EmbeddingTable,
    GruParams,
    MeanPoolEncoder,
    Tape,
    backward,
    encode_bigru,
    encode_meanpool,
    grad_check,
    log_sigmoid,
    sigmoid,
)


def _loss_and_grads(encoder, words, params, seqs, coef):
    """Loss sum(coef * enc(seqs)) with analytic grads from one backward pass."""

    def loss_fn():
        out, _ = encoder.forward(seqs)
        return float((coef * out).sum())

    words.zero_grad()
    for p in params.values():
        p.zero_grad()
    out, tape = encoder.forward(seqs)
    tape.backward(coef)
    analytic = {"words": words.grad.copy()}
    analytic.update({k: p.grad.copy() for k, p in params.items()})
    values = {"words": words.value}
    values.update({k: p.value for k, p in params.items()})
    return loss_fn, values, analytic


def _reference_gru_direction(x, W, U, b):
    H = U.shape[0]
    h = np.zeros(H)
    for xt in x:
        a = xt @ W + b
        z = 1.0 / (1.0 + np.exp(-(a[:H] + h @ U[:, :H])))
        r = 1.0 / (1.0 + np.exp(-(a[H : 2 * H] + h @ U[:, H : 2 * H])))
        n = np.tanh(a[2 * H :] + (r * h) @ U[:, 2 * H :])
        h = (1.0 - z) * n + z * h
    return h


def test_sigmoid_matches_logistic_and_is_stable():
    x = np.linspace(-30, 30, 121)
    npt.assert_allclose(sigmoid(x), 1.0 / (1.0 + np.exp(-x)), rtol=1e-9, atol=1e-15)
    assert np.all(np.isfinite(sigmoid(np.array([-1e4, 1e4]))))
    npt.assert_allclose(log_sigmoid(np.array([0.0])), [-np.log(2.0)], rtol=1e-15)
    assert np.isfinite(log_sigmoid(np.array([-1e4])))[0]


def test_meanpool_forward_is_token_mean():
    rng = np.random.default_rng(0)
    words = EmbeddingTable.uniform(10, 4, rng)
    doc = encode_meanpool([2, 3, 3, 7], words)
    npt.assert_allclose(doc.vector, words.value[[2, 3, 3, 7]].mean(axis=0))


def test_meanpool_gradient_check():
    rng = np.random.default_rng(1)
    words = EmbeddingTable(rng.normal(size=(9, 5)))
    seqs = [[2, 3, 3, 8], [4, 5], [8]]
    coef = rng.normal(size=(3, 5))
    loss_fn, values, analytic = _loss_and_grads(MeanPoolEncoder(words), words, {}, seqs, coef)
    report = grad_check(loss_fn, values, analytic)
    assert report.ok, report


def test_bigru_matches_unbatched_reference():
    rng = np.random.default_rng(2)
    words = EmbeddingTable(rng.normal(size=(12, 4)))
    gru = GruParams.init(4, 3, rng)
    for p in gru.parameters().values():
        p.value[...] = rng.normal(scale=0.5, size=p.shape)
    seqs = [[2, 5, 7], [3, 4, 5, 6, 11], [9]]
    out, _ = BiGRUEncoder(words, gru, dropout_p=0.0).forward(seqs)
    for row, s in zip(out, seqs):
        x = words.value[s]
        f = _reference_gru_direction(x, gru.fwd.W.value, gru.fwd.U.value, gru.fwd.b.value)
        bw = _reference_gru_direction(x[::-1], gru.bwd.W.value, gru.bwd.U.value, gru.bwd.b.value)
        npt.assert_allclose(row, np.concatenate([f, bw]), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("project", [False, True])
def test_bigru_gradient_check_variable_lengths(project):
    rng = np.random.default_rng(3)
    words = EmbeddingTable(rng.normal(size=(10, 4)))
    gru = GruParams.init(4, 3, rng, project_to=5 if project else None)
    for p in gru.parameters().values():
        p.value[...] = rng.normal(scale=0.5, size=p.shape)
    seqs = [[2, 3, 4, 5], [6, 7], [8, 2, 9]]
    enc = BiGRUEncoder(words, gru, dropout_p=0.0)
    coef = rng.normal(size=(3, enc.out_dim))
    loss_fn, values, analytic = _loss_and_grads(enc, words, gru.parameters(), seqs, coef)
    report = grad_check(loss_fn, values, analytic)
    assert report.ok, report


def test_bigru_batch_equals_single_encodes():
    rng = np.random.default_rng(4)
    words = EmbeddingTable.uniform(20, 6, rng, 0.5)
    gru = GruParams.init(6, 3, rng)
    seqs = [[2, 3], [4, 5, 6, 7, 8], [9, 10, 11]]
    batched, _ = BiGRUEncoder(words, gru, 0.0).forward(seqs)
    for row, s in zip(batched, seqs):
        npt.assert_allclose(row, encode_bigru(s, words, gru, 0.0).vector, rtol=1e-12)


def test_dropout_training_only_and_scaled():
    rng = np.random.default_rng(5)
    words = EmbeddingTable.uniform(20, 6, rng, 0.5)
    gru = GruParams.init(6, 3, rng)
    enc = BiGRUEncoder(words, gru, dropout_p=0.5)
    seqs = [[2, 3, 4]] * 4
    clean, _ = enc.forward(seqs, training=False)
    noisy, _ = enc.forward(seqs, training=True, rng=np.random.default_rng(0))
    kept = noisy != 0.0
    npt.assert_allclose(noisy[kept], 2.0 * clean[kept])
    assert (~kept).any()
    with pytest.raises(ValueError):
        enc.forward(seqs, training=True)


def test_tape_single_use_and_missing_tape():
    rng = np.random.default_rng(6)
    words = EmbeddingTable.uniform(5, 3, rng)
    out, tape = MeanPoolEncoder(words).forward([[1, 2]])
    tape.backward(np.ones_like(out))
    with pytest.raises(RuntimeError):
        tape.backward(np.ones_like(out))
    with pytest.raises(RuntimeError):
        backward(np.ones(3), None)
    assert isinstance(tape, Tape)


def test_empty_sequence_rejected():
    words = EmbeddingTable.uniform(5, 3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        MeanPoolEncoder(words).forward([[]])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=5), st.integers(0, 2**31 - 1))
def test_bigru_ignores_padding_and_order(lengths, seed):
    rng = np.random.default_rng(seed)
    words = EmbeddingTable.uniform(15, 4, rng, 0.5)
    gru = GruParams.init(4, 2, rng)
    seqs = [rng.integers(2, 15, size=n).tolist() for n in lengths]
    enc = BiGRUEncoder(words, gru, 0.0)
    out, _ = enc.forward(seqs)
    perm = rng.permutation(len(seqs))
    out_perm, _ = enc.forward([seqs[i] for i in perm])
    npt.assert_allclose(out_perm, out[perm], rtol=1e-12, atol=1e-15)


def test_meanpool_identity_and_symmetry():
    words = EmbeddingTable(np.array([[0.0, 0.0], [0.0, 0.0], [1.5, -2.0], [-1.5, 2.0]]))
    npt.assert_array_equal(encode_meanpool([2], words).vector, [1.5, -2.0])
    npt.assert_array_equal(encode_meanpool([2, 3], words).vector, [0.0, 0.0])


def test_meanpool_gradient_is_upstream_over_n():
    words = EmbeddingTable(np.zeros((6, 3)))
    doc = encode_meanpool([2, 3, 4, 5], words)
    g = np.array([[4.0, -8.0, 2.0]])
    doc.tape.backward(g)
    npt.assert_allclose(words.grad[2:], np.tile(g / 4, (4, 1)))


def test_zero_gru_weights_hand_recurrence():
    # with all-zero gates z = r = 1/2 and n = tanh(0) = 0, so h_t = h_{t-1} / 2 = 0;
    # a candidate bias c gives n = tanh(c), h1 = tanh(c)/2, h2 = tanh(c)/2 + h1/2
    H = 2
    words = EmbeddingTable(np.ones((4, 3)))
    gru = GruParams.init(3, H, np.random.default_rng(0))
    for p in gru.parameters().values():
        p.value[...] = 0.0
    gru.fwd.b.value[2 * H :] = 0.7
    gru.bwd.b.value[2 * H :] = -0.3
    out = encode_bigru([2, 3], words, gru, dropout_p=0.0).vector
    tf, tb = np.tanh(0.7), np.tanh(-0.3)
    npt.assert_allclose(out, [0.75 * tf] * H + [0.75 * tb] * H, rtol=1e-15)


def test_reversal_swaps_halves_when_directions_tied():
    rng = np.random.default_rng(7)
    words = EmbeddingTable.uniform(12, 4, rng, 0.5)
    gru = GruParams.init(4, 3, rng)
    for name in ("W", "U", "b"):
        getattr(gru.bwd, name).value[...] = getattr(gru.fwd, name).value
    seq = [2, 5, 9, 3, 11]
    a = encode_bigru(seq, words, gru, 0.0).vector
    b = encode_bigru(seq[::-1], words, gru, 0.0).vector
    npt.assert_allclose(a, np.concatenate([b[3:], b[:3]]), rtol=1e-13)


def test_eval_mode_ignores_dropout_rng():
    rng = np.random.default_rng(8)
    words = EmbeddingTable.uniform(12, 4, rng, 0.5)
    gru = GruParams.init(4, 2, rng)
    a = encode_bigru([2, 3, 4], words, gru, 0.2, training=False, rng=np.random.default_rng(1)).vector
    b = encode_bigru([2, 3, 4], words, gru, 0.2, training=False, rng=np.random.default_rng(2)).vector
    npt.assert_array_equal(a, b)


def test_dropout_preserves_expectation():
    rng = np.random.default_rng(9)
    words = EmbeddingTable.uniform(12, 4, rng, 0.5)
    gru = GruParams.init(4, 3, rng)
    enc = BiGRUEncoder(words, gru, 0.2)
    n = 10_000
    clean, _ = enc.forward([[2, 3, 4]])
    noisy, _ = enc.forward([[2, 3, 4]] * n, training=True, rng=np.random.default_rng(0))
    # per-coordinate sd of x * Bernoulli(0.8) / 0.8 is |x| * sqrt(0.2 / 0.8)
    sigma = np.abs(clean[0]) * np.sqrt(0.25 / n)
    assert np.all(np.abs(noisy.mean(axis=0) - clean[0]) <= 3 * sigma + 1e-15)


def test_outputs_are_300d_for_any_length():
    rng = np.random.default_rng(10)
    words = EmbeddingTable.uniform(50, 300, rng)
    gru = GruParams.init(300, 150, rng)
    out, _ = BiGRUEncoder(words, gru).forward([[2], list(range(2, 40))])
    assert out.shape == (2, 300)


def test_two_backward_passes_accumulate():
    rng = np.random.default_rng(11)
    words = EmbeddingTable.uniform(8, 3, rng, 0.5)
    gru = GruParams.init(3, 2, rng)
    enc = BiGRUEncoder(words, gru, 0.0)
    g = rng.normal(size=(1, 4))
    _, tape = enc.forward([[2, 3, 4]])
    tape.backward(g)
    once = gru.fwd.U.grad.copy()
    _, tape = enc.forward([[2, 3, 4]])
    tape.backward(g)
    npt.assert_allclose(gru.fwd.U.grad, 2 * once, rtol=1e-15)


def test_grad_check_flags_corrupted_gradient():
    rng = np.random.default_rng(12)
    words = EmbeddingTable(rng.normal(size=(6, 3)))
    coef = rng.normal(size=(1, 3))
    loss_fn, values, analytic = _loss_and_grads(MeanPoolEncoder(words), words, {}, [[2, 3]], coef)
    assert grad_check(loss_fn, values, analytic).max_rel_error < 1e-9
    analytic["words"][2, 0] += 0.1
    assert not grad_check(loss_fn, values, analytic).ok
