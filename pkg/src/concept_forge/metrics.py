"""Evaluation of concept sets against labeled embeddings.

Concept scores are cosine similarities. On top of them this module computes
the compositionality score (mean nonnegative reconstruction residual of each
sample from its own concepts), MAP of predicting composite concepts from
base-concept scores, Hungarian-matched cosine similarity to reference
concepts, per-concept ROC-AUC, and downstream linear-probe accuracy.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .concepts import ConceptSet
from .embedding_store import EmbeddingMatrix, Labeling
from .synthetic import ground_truth_representations
from .errors import (
    FewerLearnedThanGT,
    NoPositives,
    OneClassOnly,
    UnmatchedConcept,
    ZeroVector,
)

SCHEMA_VERSION = 1
ALL_METRICS = ("map", "comp", "cosine", "auc", "downstream")


def _rows(X):
    if isinstance(X, EmbeddingMatrix):
        return X.data
    if isinstance(X, ConceptSet):
        return X.vectors
    return np.asarray(X, dtype=float)


# ---------------------------------------------------------------------------
# concept scores


def concept_score(z, c) -> float:
    """Cosine similarity between a sample embedding and a concept vector."""
    z = np.asarray(z, dtype=float)
    c = np.asarray(c, dtype=float)
    nz, nc = np.linalg.norm(z), np.linalg.norm(c)
    if nz == 0 or nc == 0:
        raise ZeroVector("concept score undefined for a zero vector")
    return float(z @ c / (nz * nc))


def score_matrix(Z, concepts) -> np.ndarray:
    """``n x K`` matrix of concept scores."""
    X, C = _rows(Z), _rows(concepts)
    nx, nc = np.linalg.norm(X, axis=1), np.linalg.norm(C, axis=1)
    if np.any(nx == 0):
        raise ZeroVector("zero-norm sample rows", indices=np.flatnonzero(nx == 0).tolist())
    if np.any(nc == 0):
        raise ZeroVector("zero-norm concept rows", indices=np.flatnonzero(nc == 0).tolist())
    return (X / nx[:, None]) @ (C / nc[:, None]).T


def composed_score_weights(Ri, Rj, wi: float, wj: float):
    """Coefficients turning component scores into the score of ``wi Ri + wj Rj``.

    ``s(z, c_k) = a * s(z, c_i) + b * s(z, c_j)`` with the returned ``(a, b)``.
    """
    Ri, Rj = np.asarray(Ri, dtype=float), np.asarray(Rj, dtype=float)
    Rk = wi * Ri + wj * Rj
    nk = np.linalg.norm(Rk)
    return wi * np.linalg.norm(Ri) / nk, wj * np.linalg.norm(Rj) / nk


# ---------------------------------------------------------------------------
# nonnegative least squares


class NNLSResult(NamedTuple):
    x: np.ndarray
    residual: float
    converged: bool
    n_iter: int


def nnls(A, b, tol: float = 1e-12, max_iter: int = 20000) -> NNLSResult:
    """Minimize ``|b - A x|`` over ``x >= 0`` by projected gradient.

    The step is fixed at ``1 / |A^T A|_2``. If the iterate has not settled
    within ``max_iter`` steps the best iterate is returned with
    ``converged=False``.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    x, resid, conv, it = _nnls_batch(A[None], b[None], tol, max_iter)
    return NNLSResult(x[0], float(resid[0]), bool(conv[0]), int(it))


def _nnls_batch(A, b, tol, max_iter):
    """Projected gradient for a batch of independent problems ``A[i] x = b[i]``."""
    AtA = np.einsum("nki,nkj->nij", A, A)
    Atb = np.einsum("nki,nk->ni", A, b)
    L = np.linalg.norm(AtA, ord=2, axis=(1, 2))
    step = np.where(L > 0, 1.0 / np.where(L > 0, L, 1.0), 0.0)
    x = np.zeros(Atb.shape)
    done = np.zeros(len(x), dtype=bool)
    it = 0
    for it in range(1, max_iter + 1):
        grad = np.einsum("nij,nj->ni", AtA, x) - Atb
        new = np.maximum(x - step[:, None] * grad, 0.0)
        moved = np.abs(new - x).max(axis=1) <= tol * (1.0 + np.abs(new).max(axis=1))
        x = np.where(done[:, None], x, new)
        done |= moved
        if done.all():
            break
    resid = np.linalg.norm(b - np.einsum("nki,ni->nk", A, x), axis=1)
    return x, resid, done, it


# ---------------------------------------------------------------------------
# compositionality score


class CompositionalityResult(NamedTuple):
    score: float
    per_sample: np.ndarray
    weights: np.ndarray
    converged: bool


def compositionality_score(Z, L: Labeling, concepts, matching=None, tol=1e-12, max_iter=20000):
    """Mean over samples of ``min_{w >= 0} |z - sum_a w_a R(c_a)|``.

    ``matching[g]`` is the row of ``concepts`` representing ground-truth
    concept ``g`` (flattened attribute-major index); identity by default.
    """
    X, C = _rows(Z), _rows(concepts)
    if matching is None:
        matching = np.arange(L.total_concepts)
    matching = np.asarray(matching)
    if len(matching) < L.total_concepts:
        raise UnmatchedConcept(f"matching covers {len(matching)} of {L.total_concepts} concepts")
    used = np.unique(L.global_assignment())
    bad = [int(g) for g in used if not 0 <= matching[g] < len(C)]
    if bad:
        raise UnmatchedConcept(f"ground-truth concepts {bad} have no matched concept")
    idx = matching[L.global_assignment()]  # n x attributes
    A = np.transpose(C[idx], (0, 2, 1))  # n x d x attributes
    w, resid, conv, _ = _nnls_batch(A, X, tol, max_iter)
    return CompositionalityResult(float(resid.mean()), resid, w, bool(conv.all()))


# ---------------------------------------------------------------------------
# ranking metrics


def average_precision(scores, labels) -> float:
    """Step-wise AP, ``sum_n (R_n - R_{n-1}) P_n`` over descending thresholds.

    Tied scores form a single threshold step.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    npos = int(labels.sum())
    if npos == 0:
        raise NoPositives("average precision needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = tp[last]
    precision = tp / (last + 1)
    recall = tp / npos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def roc_auc(scores, labels) -> float:
    """``P(score+ > score-) + P(score+ == score-) / 2``."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    npos = int(labels.sum())
    nneg = len(labels) - npos
    if npos == 0 or nneg == 0:
        raise OneClassOnly("ROC-AUC needs both positive and negative samples")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - npos * (npos + 1) / 2) / (npos * nneg))


def roc_auc_table(scores, indicator) -> np.ndarray:
    """For every ground-truth concept, the best AUC over all learned concepts."""
    scores = np.asarray(scores, dtype=float)
    indicator = np.asarray(indicator, dtype=bool)
    out = np.full(indicator.shape[1], np.nan)
    for g in range(indicator.shape[1]):
        y = indicator[:, g]
        if y.all() or not y.any():
            continue
        out[g] = max(roc_auc(scores[:, k], y) for k in range(scores.shape[1]))
    return out


# ---------------------------------------------------------------------------
# matching


class Matching(NamedTuple):
    permutation: np.ndarray  # permutation[g] = learned row matched to gt row g
    cosines: np.ndarray
    mean: float


def cosine_table(learned, gt) -> np.ndarray:
    """``|gt| x |learned|`` cosine similarities."""
    return score_matrix(_rows(gt), _rows(learned))


def match_concepts(learned, gt) -> Matching:
    """One-to-one assignment maximizing total (signed) cosine similarity."""
    table = cosine_table(learned, gt)
    if table.shape[1] < table.shape[0]:
        raise FewerLearnedThanGT(f"{table.shape[1]} learned concepts for {table.shape[0]} ground-truth concepts")
    rows, cols = linear_sum_assignment(table, maximize=True)
    perm = np.empty(table.shape[0], dtype=np.int64)
    perm[rows] = cols
    cos = table[np.arange(table.shape[0]), perm]
    return Matching(perm, cos, float(cos.mean()))


# ---------------------------------------------------------------------------
# linear probes


def stratified_split(strata, train_frac: float = 0.7, seed=0):
    """Seeded per-stratum split; returns boolean train mask."""
    strata = np.asarray(strata)
    rng = np.random.default_rng(seed)
    train = np.zeros(len(strata), dtype=bool)
    for s in np.unique(strata):
        idx = np.flatnonzero(strata == s)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(train_frac * len(idx)))
        if len(idx) >= 2:
            k = min(max(k, 1), len(idx) - 1)
        train[idx[:k]] = True
    return train


def _standardize(Xtr, Xte):
    mu = Xtr.mean(axis=0)
    sd = Xtr.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (Xtr - mu) / sd, (Xte - mu) / sd


def _with_bias(X):
    return np.hstack([X, np.ones((len(X), 1))])


def _softmax(T):
    T = T - T.max(axis=1, keepdims=True)
    E = np.exp(T)
    return E / E.sum(axis=1, keepdims=True)


def fit_linear_probe(X, y, n_classes=None, l2=1e-4, epochs=500):
    """Multinomial logistic regression by full-batch gradient descent.

    Features should be standardized; an intercept column is appended. The
    step size is the inverse of a Lipschitz bound on the loss gradient.
    Binary problems use ``n_classes=2``. Returns the weight matrix.
    """
    X = _with_bias(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=np.int64)
    k = int(n_classes or y.max() + 1)
    n = len(X)
    Y = np.zeros((n, k))
    Y[np.arange(n), y] = 1.0
    lip = 0.5 * np.linalg.norm(X, ord=2) ** 2 / n + l2
    lr = 1.0 / lip
    W = np.zeros((X.shape[1], k))
    mask = np.ones_like(W)
    mask[-1] = 0.0  # intercept is not regularized
    for _ in range(epochs):
        P = _softmax(X @ W)
        W -= lr * (X.T @ (P - Y) / n + l2 * mask * W)
    return W


def predict_proba(W, X):
    return _softmax(_with_bias(np.asarray(X, dtype=float)) @ W)


class MAPResult(NamedTuple):
    map: float
    ap: dict
    skipped: list


def composite_indicator(L: Labeling):
    """Presence of each pairwise cross-attribute composite observed in ``L``.

    Returns ``(names, keys, indicator)`` where ``keys`` are pairs of flattened
    concept indices.
    """
    g = L.global_assignment()
    names = L.concept_names()
    keys, cols = [], []
    for a, b in itertools.combinations(range(g.shape[1]), 2):
        pairs = np.unique(g[:, [a, b]], axis=0)
        for ci, cj in pairs:
            keys.append((int(ci), int(cj)))
            cols.append((g[:, a] == ci) & (g[:, b] == cj))
    labels = [f"{names[i]}&{names[j]}" for i, j in keys]
    ind = np.stack(cols, axis=1) if cols else np.zeros((L.n, 0), dtype=bool)
    return labels, keys, ind


def map_composition(base_scores, composite_labels, train_frac: float = 0.7, seed=0, strata=None, names=None):
    """MAP of per-composite linear classifiers on base-concept scores.

    Each composite is an independent binary problem trained on the train
    split; AP is measured on the held-out split. Composites without
    positives in either split are skipped and listed.
    """
    S = np.asarray(base_scores, dtype=float)
    Yc = np.asarray(composite_labels).astype(bool)
    if Yc.ndim == 1:
        Yc = Yc[:, None]
    if names is None:
        names = [str(c) for c in range(Yc.shape[1])]
    if strata is None:
        strata = np.unique(Yc, axis=0, return_inverse=True)[1].reshape(-1)
    train = stratified_split(strata, train_frac, seed)
    Str, Ste = _standardize(S[train], S[~train])
    ap, skipped = {}, []
    for c, name in enumerate(names):
        ytr, yte = Yc[train, c], Yc[~train, c]
        if not ytr.any() or not yte.any() or ytr.all():
            skipped.append(name)
            continue
        W = fit_linear_probe(Str, ytr.astype(int), n_classes=2)
        ap[name] = average_precision(predict_proba(W, Ste)[:, 1], yte)
    if not ap:
        raise NoPositives("no composite has positives in both splits")
    return MAPResult(float(np.mean(list(ap.values()))), ap, skipped)


def downstream_accuracy(S, class_labels, train_frac: float = 0.7, seed=0, l2=1e-4, epochs=500) -> float:
    """Held-out accuracy of a multinomial linear probe on the features ``S``.

    Pass concept scores for the concept-bottleneck setting or raw embeddings
    for the no-concept control.
    """
    S = _rows(S)
    y = np.asarray(class_labels, dtype=np.int64)
    classes, y = np.unique(y, return_inverse=True)
    y = y.reshape(-1)
    if len(classes) < 2:
        raise OneClassOnly("downstream accuracy needs at least two classes")
    train = stratified_split(y, train_frac, seed)
    Str, Ste = _standardize(S[train], S[~train])
    W = fit_linear_probe(Str, y[train], n_classes=len(classes), l2=l2, epochs=epochs)
    pred = np.argmax(predict_proba(W, Ste), axis=1)
    return float(np.mean(pred == y[~train]))


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    method: str = ""
    seed: int = 0
    map_score: Optional[float] = None
    map_per_composite: dict = field(default_factory=dict)
    map_skipped: list = field(default_factory=list)
    compositionality_score: Optional[float] = None
    compositionality_per_sample: Optional[list] = None
    matched_cosine: Optional[list] = None
    matched_cosine_mean: Optional[float] = None
    matching: Optional[list] = None
    roc_auc_table: Optional[list] = None
    downstream_accuracy: Optional[float] = None
    concept_names: list = field(default_factory=list)

    def to_json(self, per_sample: bool = False) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "method": self.method,
            "seed": self.seed,
            "map": self.map_score,
            "map_per_composite": self.map_per_composite,
            "map_skipped": self.map_skipped,
            "compositionality_score": self.compositionality_score,
            "matched_cosine": self.matched_cosine,
            "matched_cosine_mean": self.matched_cosine_mean,
            "matching": self.matching,
            "roc_auc_max": self.roc_auc_table,
            "downstream_accuracy": self.downstream_accuracy,
            "concept_names": self.concept_names,
        }
        if per_sample:
            out["compositionality_per_sample"] = self.compositionality_per_sample
        return out


def evaluate(Z, L: Labeling, concepts: ConceptSet, gt: Optional[ConceptSet] = None,
             metrics: Sequence[str] = ALL_METRICS, seed=0, method: str = "") -> MetricsReport:
    """Compute the requested metrics for one concept set.

    ``gt`` defaults to the per-concept sample means of ``Z``. Learned
    concepts are aligned to ``gt`` by :func:`match_concepts`; the
    compositionality score uses the matched rows.
    """
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}")
    X = _rows(Z)
    if gt is None:
        gt, _ = ground_truth_representations(Z, L)
    report = MetricsReport(method=method, seed=int(seed), concept_names=list(L.concept_names()))
    scores = score_matrix(X, concepts)

    matching = None
    if "cosine" in metrics or "comp" in metrics:
        matching = match_concepts(concepts, gt)
        report.matched_cosine = matching.cosines.tolist()
        report.matched_cosine_mean = matching.mean
        report.matching = matching.permutation.tolist()
    if "comp" in metrics:
        comp = compositionality_score(X, L, concepts, matching.permutation)
        report.compositionality_score = comp.score
        report.compositionality_per_sample = comp.per_sample.tolist()
    if "map" in metrics:
        names, _, ind = composite_indicator(L)
        res = map_composition(scores, ind, seed=seed, strata=L.assignment @ np.cumprod([1] + L.sizes[:-1]), names=names)
        report.map_score = res.map
        report.map_per_composite = res.ap
        report.map_skipped = res.skipped
    if "auc" in metrics:
        table = roc_auc_table(scores, L.indicator())
        report.roc_auc_table = [None if np.isnan(v) else float(v) for v in table]
    if "downstream" in metrics and L.class_label is not None:
        report.downstream_accuracy = downstream_accuracy(scores, L.class_label, seed=seed)
    return report
