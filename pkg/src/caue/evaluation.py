"""Extrinsic and intrinsic evaluation of patient embeddings.

Phenotype MAP and mortality macro-F1 use one-vs-rest logistic regression
under k-fold cross-validation; relatedness and retrieval are cosine-based
and need no training.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .corpus import write_json_atomic
from .nn import sigmoid

TASKS = ("phenotype_map", "mortality_f1", "relatedness_mse", "retrieval_jaccard", "concept_regression")
EXHAUSTIVE_PAIR_LIMIT = 2000
TIE_DECIMALS = 12


@dataclass
class EvalReport:
    task: str
    value: float
    folds: list[float] = field(default_factory=list)
    config_fingerprint: str = ""
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "EvalReport":
        return cls(**data)


def label_matrix(label_sets: Sequence[Sequence[int]], n_labels: int) -> np.ndarray:
    Y = np.zeros((len(label_sets), n_labels))
    for i, labels in enumerate(label_sets):
        Y[i, list(labels)] = 1.0
    return Y


# --------------------------------------------------------------------------
# logistic regression
# --------------------------------------------------------------------------


@dataclass
class LogisticRegression:
    W: np.ndarray  # (features, outputs)
    b: np.ndarray  # (outputs,)
    losses: list[float] = field(default_factory=list)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return sigmoid(np.asarray(X, dtype=np.float64) @ self.W + self.b)


def logreg_loss_grad(W, b, X, Y, l2: float):
    """Mean summed-over-labels BCE plus ``l2 / 2 * ||W||^2`` and its gradients."""
    Z = X @ W + b
    n = X.shape[0]
    loss = (np.logaddexp(0.0, Z) - Y * Z).sum() / n + 0.5 * l2 * np.sum(W * W)
    dZ = (sigmoid(Z) - Y) / n
    return float(loss), X.T @ dZ + l2 * W, dZ.sum(axis=0)


def logreg_train(
    X: np.ndarray,
    Y: np.ndarray,
    lr: float = 1e-3,
    l2: float = 0.01,
    epochs: int = 200,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> LogisticRegression:
    """Full-batch Adam on one sigmoid output per label column of ``Y``."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] < 2:
        raise ValueError("logistic regression needs at least two training rows")
    W = np.zeros((X.shape[1], Y.shape[1]))
    b = np.zeros(Y.shape[1])
    mW, vW, mb, vb = (np.zeros_like(W), np.zeros_like(W), np.zeros_like(b), np.zeros_like(b))
    losses = []
    for t in range(1, epochs + 1):
        loss, gW, gb = logreg_loss_grad(W, b, X, Y, l2)
        losses.append(loss)
        mW = beta1 * mW + (1 - beta1) * gW
        vW = beta2 * vW + (1 - beta2) * gW * gW
        mb = beta1 * mb + (1 - beta1) * gb
        vb = beta2 * vb + (1 - beta2) * gb * gb
        c1, c2 = 1 - beta1**t, 1 - beta2**t
        W = W - lr * (mW / c1) / (np.sqrt(vW / c2) + eps)
        b = b - lr * (mb / c1) / (np.sqrt(vb / c2) + eps)
    return LogisticRegression(W, b, losses)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def average_precision(scores: np.ndarray, true_labels) -> float:
    # descending score, ties by label index
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    hits = np.isin(order, list(true_labels))
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def map_score(scores: np.ndarray, true_sets: Sequence) -> float:
    """Mean over patients of average precision; unlabeled patients are skipped."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(true_sets) == 0:
        raise ValueError("empty test set")
    aps = [average_precision(row, labels) for row, labels in zip(scores, true_sets) if len(labels)]
    if not aps:
        raise ValueError("no test patient has a true label")
    return float(np.mean(aps))


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def macro_f1(predicted, truth) -> float:
    p = np.asarray(predicted, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    f_pos = _f1(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & t)))
    f_neg = _f1(int(np.sum(~p & ~t)), int(np.sum(~p & t)), int(np.sum(p & ~t)))
    return (f_pos + f_neg) / 2


def normalize_rows(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)


def pair_cosines(X: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    """Cosine for each (i, j) row pair; a zero vector has cosine 0 with anything."""
    Xn = normalize_rows(X)
    return np.einsum("pd,pd->p", Xn[pairs[:, 0]], Xn[pairs[:, 1]])


def all_pairs(n: int) -> np.ndarray:
    i, j = np.triu_indices(n, k=1)
    return np.stack([i, j], axis=1)


def sample_pairs(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` uniformly drawn unordered pairs of distinct indices."""
    i = rng.integers(0, n, size=count)
    j = rng.integers(0, n - 1, size=count)
    j = j + (j >= i)
    return np.sort(np.stack([i, j], axis=1), axis=1)


def relatedness_pairs(n: int, seed: int = 0, limit: int = EXHAUSTIVE_PAIR_LIMIT) -> np.ndarray:
    if n < 2:
        raise ValueError("relatedness needs at least two patients")
    if n <= limit:
        return all_pairs(n)
    return sample_pairs(n, 2 * n, np.random.default_rng(seed))


def relatedness_mse(user_vecs, label_vecs, pairs: np.ndarray | None = None, seed: int = 0) -> float:
    """Mean over pairs of (cos(labels) - cos(users))^2."""
    user_vecs = np.asarray(user_vecs, dtype=np.float64)
    if pairs is None:
        pairs = relatedness_pairs(len(user_vecs), seed)
    pairs = np.asarray(pairs, dtype=np.int64)
    diff = pair_cosines(label_vecs, pairs) - pair_cosines(user_vecs, pairs)
    return float(np.mean(diff * diff))


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    union = a | b
    return len(a & b) / len(union) if union else 0.0


def top_k_neighbors(user_vecs, k: int = 10, chunk: int = 1024) -> np.ndarray:
    """Indices of each row's k most cosine-similar other rows (ties by index)."""
    Xn = normalize_rows(user_vecs)
    n = len(Xn)
    if n < k + 1:
        raise ValueError(f"need at least k + 1 = {k + 1} patients, got {n}")
    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, chunk):
        # rounding makes cosines that are equal up to float noise tie exactly
        sims = np.round(Xn[start : start + chunk] @ Xn.T, TIE_DECIMALS)
        rows = np.arange(sims.shape[0])
        sims[rows, start + rows] = -np.inf
        out[start : start + chunk] = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return out


def query_neighbors(user_vecs, query: int, k: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """The k most cosine-similar rows to row ``query`` and their cosines."""
    Xn = normalize_rows(user_vecs)
    n = len(Xn)
    if not 0 <= query < n:
        raise IndexError(f"query {query} out of range for {n} patients")
    if k < 1 or k > n - 1:
        raise ValueError(f"k must lie in [1, {n - 1}] for {n} patients, got {k}")
    raw = Xn @ Xn[query]
    sims = np.round(raw, TIE_DECIMALS)
    sims[query] = -np.inf
    idx = np.argsort(-sims, kind="stable")[:k]
    return idx, raw[idx]


def retrieval_jaccard(user_vecs, label_sets: Sequence, k: int = 10) -> float:
    """Mean Jaccard between each query's labels and its top-k cosine neighbours."""
    neighbors = top_k_neighbors(user_vecs, k)
    sets = [set(s) for s in label_sets]
    per_query = [np.mean([jaccard(sets[q], sets[j]) for j in row]) for q, row in enumerate(neighbors)]
    return float(np.mean(per_query))


# --------------------------------------------------------------------------
# feature/label similarity regression
# --------------------------------------------------------------------------


class SingularDesignError(ValueError):
    def __init__(self, column: str):
        self.column = column
        super().__init__(f"design matrix is singular: column {column!r} is collinear with earlier columns")


@dataclass
class RegressionResult:
    names: list[str]
    coefficients: list[float]
    std_errors: list[float]
    t_values: list[float]
    p_values: list[float]
    n: int
    r_squared: float

    def coefficient(self, name: str) -> float:
        return self.coefficients[self.names.index(name)]

    def p_value(self, name: str) -> float:
        return self.p_values[self.names.index(name)]


def ols(X: np.ndarray, y: np.ndarray, names: Sequence[str]) -> RegressionResult:
    """Ordinary least squares with two-sided t-test p-values."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    for j in range(p):
        if np.linalg.matrix_rank(X[:, : j + 1]) < j + 1:
            raise SingularDesignError(names[j])
    if n <= p:
        raise ValueError(f"need more observations ({n}) than coefficients ({p})")
    xtx_inv = np.linalg.inv(X.T @ X)
    beta = xtx_inv @ (X.T @ y)
    resid = y - X @ beta
    dof = n - p
    sigma2 = float(resid @ resid) / dof
    se = np.sqrt(np.diag(xtx_inv) * sigma2)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / se, np.inf * np.sign(beta))
    pvals = 2 * stats.t.sf(np.abs(t), dof)
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / tss if tss > 0 else 0.0
    return RegressionResult(list(names), beta.tolist(), se.tolist(), t.tolist(), pvals.tolist(), n, r2)


def regression_pairs(n: int, seed: int = 0) -> np.ndarray:
    """2n distinct sampled pairs (all pairs when there are fewer)."""
    total = n * (n - 1) // 2
    if total <= 2 * n:
        return all_pairs(n)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(total, size=2 * n, replace=False)
    chosen.sort()
    return all_pairs(n)[chosen]


def concept_regression(ngram_feats, concept_feats, label_vecs, pairs: np.ndarray | None = None, seed: int = 0) -> RegressionResult:
    """Regress label cosine on [1, n-gram cosine, concept cosine] over patient pairs.

    Feature arguments are dense arrays or scipy sparse matrices, one row per
    patient.
    """
    ngram = _dense_normalized(ngram_feats)
    concept = _dense_normalized(concept_feats)
    if pairs is None:
        pairs = regression_pairs(ngram.shape[0], seed)
    pairs = np.asarray(pairs, dtype=np.int64)
    y = pair_cosines(label_vecs, pairs)
    x_ng = np.einsum("pd,pd->p", ngram[pairs[:, 0]], ngram[pairs[:, 1]])
    x_cc = np.einsum("pd,pd->p", concept[pairs[:, 0]], concept[pairs[:, 1]])
    X = np.column_stack([np.ones(len(pairs)), x_ng, x_cc])
    return ols(X, y, ["intercept", "ngram", "concept"])


def _dense_normalized(feats) -> np.ndarray:
    if hasattr(feats, "toarray"):
        feats = feats.toarray()
    return normalize_rows(np.asarray(feats, dtype=np.float64))


# --------------------------------------------------------------------------
# cross-validation
# --------------------------------------------------------------------------


def fold_indices(n: int, folds: int = 5, seed: int = 0) -> list[np.ndarray]:
    if n < folds:
        raise ValueError(f"need at least {folds} patients for {folds}-fold CV, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, folds)]


def cross_validate(
    embeddings: np.ndarray,
    targets: Sequence,
    task: str,
    n_labels: int | None = None,
    folds: int = 5,
    seed: int = 0,
    lr: float = 1e-3,
    l2: float = 0.01,
    epochs: int = 200,
    config_fingerprint: str = "",
) -> EvalReport:
    """k-fold logistic-regression evaluation.

    ``phenotype_map``: ``targets`` are label-index sets and the metric is
    MAP. ``mortality_f1``: ``targets`` are booleans and the metric is macro-F1
    at a 0.5 threshold. Per-fold values are averaged.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if len(X) != len(targets):
        raise ValueError("one target per embedding row required")
    details: dict = {"fold_sizes": [], "skipped_labels": {}}
    values: list[float] = []
    parts = fold_indices(len(X), folds, seed)
    for f, test in enumerate(parts):
        train = np.setdiff1d(np.arange(len(X)), test)
        details["fold_sizes"].append(len(test))
        if task == "phenotype_map":
            if n_labels is None:
                n_labels = 1 + max((max(s) for s in targets if len(s)), default=-1)
            Y = label_matrix(targets, n_labels)
            present = np.flatnonzero(Y[train].sum(axis=0) > 0)
            skipped = sorted(set(range(n_labels)) - set(present.tolist()))
            if skipped:
                details["skipped_labels"][str(f)] = skipped
            model = logreg_train(X[train], Y[train][:, present], lr, l2, epochs)
            scores = model.predict_proba(X[test])
            col = {int(lab): i for i, lab in enumerate(present)}
            true_sets = [[col[l] for l in targets[i] if l in col] for i in test]
            values.append(map_score(scores, true_sets))
        elif task == "mortality_f1":
            y = np.asarray(targets, dtype=np.float64)
            model = logreg_train(X[train], y[train], lr, l2, epochs)
            pred = model.predict_proba(X[test])[:, 0] >= 0.5
            values.append(macro_f1(pred, y[test] > 0.5))
        else:
            raise ValueError(f"unknown cross-validation task {task!r}")
    return EvalReport(task, float(np.mean(values)), values, config_fingerprint, details)


def evaluate_embeddings(
    user_vecs: np.ndarray,
    label_sets: Sequence,
    n_labels: int,
    mortality: Sequence | None = None,
    seed: int = 0,
    folds: int = 5,
    k: int = 10,
    lr: float = 1e-3,
    l2: float = 0.01,
    epochs: int = 200,
    config_fingerprint: str = "",
) -> list[EvalReport]:
    """The four standard evaluations; mortality only when flags are given."""
    user_vecs = np.asarray(user_vecs, dtype=np.float64)
    labeled = [i for i, s in enumerate(label_sets) if len(s)]
    reports = []
    if len(labeled) >= folds:
        reports.append(
            cross_validate(user_vecs[labeled], [label_sets[i] for i in labeled], "phenotype_map",
                           n_labels, folds, seed, lr, l2, epochs, config_fingerprint)
        )
    if mortality is not None:
        known = [i for i, m in enumerate(mortality) if m is not None]
        if len(known) >= folds:
            reports.append(
                cross_validate(user_vecs[known], [bool(mortality[i]) for i in known], "mortality_f1",
                               None, folds, seed, lr, l2, epochs, config_fingerprint)
            )
    Y = label_matrix(label_sets, n_labels)
    reports.append(EvalReport("relatedness_mse", relatedness_mse(user_vecs, Y, seed=seed), [], config_fingerprint))
    reports.append(EvalReport("retrieval_jaccard", retrieval_jaccard(user_vecs, label_sets, k), [], config_fingerprint,
                              {"k": k}))
    return reports


def save_reports(reports: Sequence[EvalReport], path: str | Path) -> None:
    write_json_atomic(path, [r.to_dict() for r in reports])


def load_reports(path: str | Path) -> list[EvalReport]:
    with open(path, encoding="utf-8") as fh:
        return [EvalReport.from_dict(d) for d in json.load(fh)]


def write_table(rows: Mapping[str, Sequence[EvalReport]], path: str | Path) -> None:
    """CSV with one row per method and one column per task."""
    columns = ["phenotype_map", "mortality_f1", "relatedness_mse", "retrieval_jaccard"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", *columns])
        for method, reports in rows.items():
            by_task = {r.task: r.value for r in reports}
            writer.writerow([method, *(f"{by_task[c]:.4f}" if c in by_task else "" for c in columns)])
