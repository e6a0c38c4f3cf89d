"""Dense numeric core: parameter tables, document encoders with analytic
gradients, dropout and a finite-difference gradient checker.

Everything runs in float64. Encoders are called on a batch of token-id
sequences and return ``(outputs, tape)``; ``tape.backward(grad)`` accumulates
(+=) gradients into the parameters touched by that forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

DIM = 300


class Param:
    """A float64 array with a same-shape gradient accumulator."""

    def __init__(self, value: np.ndarray):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


class EmbeddingTable(Param):
    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def dim(self) -> int:
        return self.value.shape[1]

    @classmethod
    def uniform(cls, rows: int, dim: int, rng: np.random.Generator, scale: float = 0.05) -> "EmbeddingTable":
        return cls(rng.uniform(-scale, scale, size=(rows, dim)))


def load_word2vec_text(
    path: str | Path,
    vocab,
    dim: int,
    rng: np.random.Generator,
    scale: float = 0.05,
) -> tuple[EmbeddingTable, int]:
    """Build a word table for ``vocab`` from a word2vec text file.

    Tokens missing from the file keep a uniform(-scale, scale) init; PAD is
    zero. Returns the table and the number of rows found in the file.
    """
    table = EmbeddingTable.uniform(len(vocab), dim, rng, scale)
    table.value[vocab.pad_index] = 0.0
    found = 0
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError("word2vec header must be '<count> <dim>'")
        if int(header[1]) != dim:
            raise ValueError(f"vector dim {header[1]} does not match model dim {dim}")
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip().split(" ")
            if len(parts) != dim + 1:
                raise ValueError(f"line {lineno}: expected {dim} floats")
            idx = vocab.stoi.get(parts[0])
            if idx is not None and idx != vocab.pad_index:
                table.value[idx] = np.asarray(parts[1:], dtype=np.float64)
                found += 1
    return table, found


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free and much cheaper than a sign-split exp
    return 0.5 + 0.5 * np.tanh(0.5 * np.asarray(x, dtype=np.float64))


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


class Tape:
    """Records one forward pass; ``backward`` may run exactly once."""

    def __init__(self):
        self._consumed = False

    def backward(self, grad: np.ndarray) -> None:
        if self._consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        self._consumed = True
        self._backward(np.asarray(grad, dtype=np.float64))

    def _backward(self, grad: np.ndarray) -> None:
        raise NotImplementedError


def backward(loss_grad: np.ndarray, tape: Tape | None) -> None:
    if tape is None:
        raise RuntimeError("backward called without a recorded forward pass")
    tape.backward(loss_grad)


def _check_sequences(seqs: Sequence[Sequence[int]]) -> list[np.ndarray]:
    out = [np.asarray(s, dtype=np.int64) for s in seqs]
    if any(len(s) == 0 for s in out):
        raise ValueError("cannot encode an empty token sequence")
    return out


def _scatter_rows(table: EmbeddingTable, ids: np.ndarray, grads: np.ndarray) -> None:
    np.add.at(table.grad, ids, grads)


# --------------------------------------------------------------------------
# mean pooling
# --------------------------------------------------------------------------


class _MeanPoolTape(Tape):
    def __init__(self, words: EmbeddingTable, seqs: list[np.ndarray]):
        super().__init__()
        self.words, self.seqs = words, seqs

    def _backward(self, grad):
        for g, ids in zip(grad, self.seqs):
            _scatter_rows(self.words, ids, np.broadcast_to(g / len(ids), (len(ids), g.shape[0])))


class MeanPoolEncoder:
    """Arithmetic mean of token vectors."""

    def __init__(self, words: EmbeddingTable):
        self.words = words

    @property
    def out_dim(self) -> int:
        return self.words.dim

    def parameters(self) -> dict[str, Param]:
        return {}

    def forward(self, seqs, training: bool = False, rng: np.random.Generator | None = None):
        seqs = _check_sequences(seqs)
        out = np.stack([self.words.value[ids].mean(axis=0) for ids in seqs])
        return out, _MeanPoolTape(self.words, seqs)


# --------------------------------------------------------------------------
# bidirectional GRU
# --------------------------------------------------------------------------


@dataclass
class GruDirection:
    """Gate blocks are laid out [update | reset | candidate] along the last axis."""

    W: Param  # (input, 3H)
    U: Param  # (H, 3H)
    b: Param  # (3H,)

    @property
    def hidden(self) -> int:
        return self.U.shape[0]

    @classmethod
    def init(cls, input_dim: int, hidden: int, rng: np.random.Generator) -> "GruDirection":
        bound = 1.0 / np.sqrt(hidden)
        return cls(
            Param(rng.uniform(-bound, bound, (input_dim, 3 * hidden))),
            Param(rng.uniform(-bound, bound, (hidden, 3 * hidden))),
            Param(np.zeros(3 * hidden)),
        )


class GruParams:
    """Forward and backward GRU directions plus an optional 2H -> out projection."""

    def __init__(self, fwd: GruDirection, bwd: GruDirection, proj: Param | None = None):
        self.fwd, self.bwd, self.proj = fwd, bwd, proj
        if fwd.W.shape != bwd.W.shape or fwd.U.shape != bwd.U.shape:
            raise ValueError("forward and backward GRU shapes differ")

    @classmethod
    def init(
        cls,
        input_dim: int,
        hidden: int,
        rng: np.random.Generator,
        project_to: int | None = None,
    ) -> "GruParams":
        fwd = GruDirection.init(input_dim, hidden, rng)
        bwd = GruDirection.init(input_dim, hidden, rng)
        proj = None
        if project_to is not None:
            bound = 1.0 / np.sqrt(2 * hidden)
            proj = Param(rng.uniform(-bound, bound, (2 * hidden, project_to)))
        return cls(fwd, bwd, proj)

    @property
    def hidden(self) -> int:
        return self.fwd.hidden

    @property
    def out_dim(self) -> int:
        return self.proj.shape[1] if self.proj is not None else 2 * self.hidden

    def parameters(self) -> dict[str, Param]:
        params = {}
        for tag, d in (("fwd", self.fwd), ("bwd", self.bwd)):
            params.update({f"gru.{tag}.W": d.W, f"gru.{tag}.U": d.U, f"gru.{tag}.b": d.b})
        if self.proj is not None:
            params["gru.proj"] = self.proj
        return params


class _DirectionPass:
    """Forward recurrence of one direction over length-sorted sequences."""

    def __init__(self, d: GruDirection, words: EmbeddingTable, ids: np.ndarray, lengths: np.ndarray):
        # ids: (B, T) padded, rows sorted by descending length; state is kept time-major
        self.d, self.words, self.lengths = d, words, lengths
        self.ids_t = np.ascontiguousarray(ids.T)
        T, B = self.ids_t.shape
        H = d.hidden
        self.X = words.value[self.ids_t]
        XW = self.X @ d.W.value + d.b.value
        Uzr, Un = d.U.value[:, : 2 * H], d.U.value[:, 2 * H :]
        self.active = [int(np.count_nonzero(lengths > t)) for t in range(T)]
        self.h_prev = np.zeros((T, B, H))
        self.zr = np.zeros((T, B, 2 * H))
        self.n = np.zeros((T, B, H))
        h = np.zeros((B, H))
        for t in range(T):
            k = self.active[t]
            hk = h[:k]
            a = XW[t, :k]
            zr = sigmoid(a[:, : 2 * H] + hk @ Uzr)
            n = np.tanh(a[:, 2 * H :] + (zr[:, H:] * hk) @ Un)
            self.h_prev[t, :k] = hk
            self.zr[t, :k] = zr
            self.n[t, :k] = n
            z = zr[:, :H]
            h[:k] = n + z * (hk - n)
        self.h_final = h

    def backward(self, dh: np.ndarray) -> None:
        d = self.d
        H = d.hidden
        UzrT = d.U.value[:, : 2 * H].T
        UnT = d.U.value[:, 2 * H :].T
        T, B = self.ids_t.shape
        dh = dh.copy()
        dXW = np.zeros((T, B, 3 * H))
        for t in range(T - 1, -1, -1):
            k = self.active[t]
            hp, zr, n = self.h_prev[t, :k], self.zr[t, :k], self.n[t, :k]
            z, r = zr[:, :H], zr[:, H:]
            dhk = dh[:k]
            out = dXW[t, :k]
            dan = out[:, 2 * H :]
            np.multiply(dhk * (1.0 - z), 1.0 - n * n, out=dan)
            drh = dan @ UnT
            out[:, :H] = dhk * (hp - n) * z * (1.0 - z)
            out[:, H : 2 * H] = drh * hp * r * (1.0 - r)
            dh[:k] = dhk * z + drh * r + out[:, : 2 * H] @ UzrT
        # padded rows carry zero gradient, so whole-array products are exact
        flat = dXW.reshape(T * B, 3 * H)
        hp_all = self.h_prev.reshape(T * B, H)
        rh_all = (self.zr[:, :, H:] * self.h_prev).reshape(T * B, H)
        d.U.grad[:, : 2 * H] += hp_all.T @ flat[:, : 2 * H]
        d.U.grad[:, 2 * H :] += rh_all.T @ flat[:, 2 * H :]
        d.W.grad += self.X.reshape(T * B, -1).T @ flat
        d.b.grad += flat.sum(axis=0)
        mask = (np.arange(T)[:, None] < self.lengths[None, :]).ravel()
        _scatter_rows(self.words, self.ids_t.ravel()[mask], flat[mask] @ d.W.value.T)


class _BiGRUTape(Tape):
    def __init__(self, gru, fwd, bwd, order, concat, dropout_mask):
        super().__init__()
        self.gru, self.fwd, self.bwd = gru, fwd, bwd
        self.order, self.concat, self.dropout_mask = order, concat, dropout_mask

    def _backward(self, grad):
        H = self.gru.hidden
        if self.gru.proj is not None:
            self.gru.proj.grad += self.concat.T @ grad
            grad = grad @ self.gru.proj.value.T
        if self.dropout_mask is not None:
            grad = grad * self.dropout_mask
        # undo output reordering
        grad_sorted = grad[self.order]
        self.fwd.backward(grad_sorted[:, :H])
        self.bwd.backward(grad_sorted[:, H:])


class BiGRUEncoder:
    """Concatenated final hidden states of a forward and a backward GRU.

    Inverted dropout with rate ``dropout_p`` is applied to the concatenated
    vector in training mode only.
    """

    def __init__(self, words: EmbeddingTable, gru: GruParams, dropout_p: float = 0.2):
        if not 0.0 <= dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {dropout_p}")
        if gru.fwd.W.shape[0] != words.dim:
            raise ValueError("GRU input size does not match the word table")
        self.words, self.gru, self.dropout_p = words, gru, dropout_p

    @property
    def out_dim(self) -> int:
        return self.gru.out_dim

    def parameters(self) -> dict[str, Param]:
        return self.gru.parameters()

    def forward(self, seqs, training: bool = False, rng: np.random.Generator | None = None):
        seqs = _check_sequences(seqs)
        lengths = np.array([len(s) for s in seqs])
        order = np.argsort(-lengths, kind="stable")
        lengths_sorted = lengths[order]
        B, T = len(seqs), int(lengths.max())
        fwd_ids = np.zeros((B, T), dtype=np.int64)
        bwd_ids = np.zeros((B, T), dtype=np.int64)
        for row, i in enumerate(order):
            s = seqs[i]
            fwd_ids[row, : len(s)] = s
            bwd_ids[row, : len(s)] = s[::-1]
        fwd = _DirectionPass(self.gru.fwd, self.words, fwd_ids, lengths_sorted)
        bwd = _DirectionPass(self.gru.bwd, self.words, bwd_ids, lengths_sorted)
        sorted_out = np.concatenate([fwd.h_final, bwd.h_final], axis=1)
        # restore caller order: out[i] = sorted_out[inverse[i]]
        inverse = np.empty_like(order)
        inverse[order] = np.arange(B)
        concat = sorted_out[inverse]
        mask = None
        if training and self.dropout_p > 0.0:
            if rng is None:
                raise ValueError("training-mode dropout needs an rng")
            keep = 1.0 - self.dropout_p
            mask = (rng.random(concat.shape) < keep) / keep
            concat = concat * mask
        out = concat @ self.gru.proj.value if self.gru.proj is not None else concat
        return out, _BiGRUTape(self.gru, fwd, bwd, order, concat, mask)


@dataclass
class EncodedDoc:
    vector: np.ndarray
    note_id: int | None = None
    span: tuple[int, int] | None = None
    tape: Tape | None = None


def encode_meanpool(token_ids: Sequence[int], words: EmbeddingTable, note_id: int | None = None) -> EncodedDoc:
    out, tape = MeanPoolEncoder(words).forward([token_ids])
    return EncodedDoc(out[0], note_id, (0, len(token_ids)), tape)


def encode_bigru(
    token_ids: Sequence[int],
    words: EmbeddingTable,
    gru: GruParams,
    dropout_p: float = 0.2,
    training: bool = False,
    rng: np.random.Generator | None = None,
    note_id: int | None = None,
) -> EncodedDoc:
    out, tape = BiGRUEncoder(words, gru, dropout_p).forward([token_ids], training, rng)
    return EncodedDoc(out[0], note_id, (0, len(token_ids)), tape)


# --------------------------------------------------------------------------
# finite-difference gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    checked: int
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    loss_fn: Callable[[], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    tolerance: float = 1e-4,
    eps: float = 1e-5,
    floor: float = 1e-7,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare ``analytic`` gradients against central differences of ``loss_fn``.

    ``params`` are perturbed in place (and restored). Relative error is
    ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps entries whose true
    gradient is zero from reporting pure rounding noise. With ``max_entries``
    a seeded random subset of each array is checked.
    """
    worst, worst_name, checked = 0.0, "", 0
    for name, arr in params.items():
        grad = analytic[name]
        flat_idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat_idx = (rng or np.random.default_rng(0)).choice(arr.size, max_entries, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + eps
            up = loss_fn()
            arr[idx] = orig - eps
            down = loss_fn()
            arr[idx] = orig
            numeric = (up - down) / (2 * eps)
            a = grad[idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            if rel > worst:
                worst, worst_name = rel, f"{name}{tuple(int(i) for i in idx)}"
    return GradCheckReport(float(worst), worst_name, checked, tolerance)


def iter_params(*groups: Mapping[str, Param]) -> Iterator[tuple[str, Param]]:
    for group in groups:
        yield from group.items()
