"""Compositional concept extraction.

For each attribute in turn, an orthonormal subspace ``P`` (``d x S``) and a
spherical K-Means clustering of the projected data ``ZP`` are learned
jointly: K-Means fixes the clustering, then one gradient-ascent step on

    F(P) = Sil(ZP, L) + reg_weight * sum_k cos(P c_k, mean_{i: L_i = k} Z_i)

moves the subspace. Once an attribute converges its concepts are mapped
back to the embedding space and the subspace is removed from the data by
orthogonal rejection, so later attributes live in orthogonal subspaces.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import cdist

from .concepts import ConceptSet, normalize_rows
from .embedding_store import EmbeddingMatrix
from .errors import DegenerateData, InsufficientSamples, NonCentered, SingleCluster

log = logging.getLogger(__name__)

ORTHO_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Subspace:
    basis: np.ndarray

    def __post_init__(self):
        P = np.array(self.basis, dtype=float, copy=True)
        if P.ndim != 2 or P.shape[1] > P.shape[0]:
            raise ValueError(f"basis must be d x S with S <= d, got {P.shape}")
        err = np.linalg.norm(P.T @ P - np.eye(P.shape[1]))
        if err > ORTHO_TOL:
            raise ValueError(f"basis is not orthonormal (|P'P - I|_F = {err:.3g})")
        P.flags.writeable = False
        object.__setattr__(self, "basis", P)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    objective: tuple = ()

    @property
    def K(self) -> int:
        return self.centroids.shape[0]


@dataclass(frozen=True)
class CCEConfig:
    """Hyperparameters; ``K`` may be one count or one count per attribute."""

    M: int = 2
    K: Union[int, tuple] = 3
    S: int = 16
    learning_rate: float = 0.1
    max_alternations: int = 300
    inner_kmeans_iters: int = 100
    conv_tol: float = 1e-5
    reg_weight: float = 1.0
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.K, (list, tuple)):
            object.__setattr__(self, "K", tuple(int(k) for k in self.K))
            if len(self.K) != self.M:
                raise ValueError(f"K lists {len(self.K)} counts for M={self.M} attributes")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if min(self.ks) < 2:
            raise ValueError("K must be >= 2")
        if self.S < 1:
            raise ValueError("S must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be nonnegative")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")

    @property
    def ks(self) -> tuple:
        return self.K if isinstance(self.K, tuple) else (int(self.K),) * self.M

    def to_json(self) -> dict:
        out = asdict(self)
        out["K"] = list(self.ks) if isinstance(self.K, tuple) else self.K
        return out


@dataclass(frozen=True, eq=False)
class ExtractionResult:
    concepts: ConceptSet
    subspaces: tuple
    trace: tuple
    assignments: tuple
    config: CCEConfig

    def to_json(self) -> dict:
        return {
            "method": "cce",
            "concepts": self.concepts.to_json(),
            "subspaces": [s.basis.tolist() for s in self.subspaces],
            "trace": [list(t) for t in self.trace],
            "config": self.config.to_json(),
        }


# ---------------------------------------------------------------------------
# spherical K-Means


def _indicator(labels, K):
    out = np.zeros((len(labels), K))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _farthest_point_init(X, K, rng):
    """Cosine farthest-point seeding from a random nonzero first row."""
    nonzero = np.flatnonzero(np.linalg.norm(X, axis=1) > 0)
    chosen = [int(rng.choice(nonzero))]
    best = X @ X[chosen[0]]
    best[np.setdiff1d(np.arange(len(X)), nonzero)] = np.inf
    for _ in range(1, K):
        nxt = int(np.argmin(best))
        chosen.append(nxt)
        best = np.maximum(best, X @ X[nxt])
    return X[chosen].copy()


def _repair_empty(X, labels, C, K):
    for k in range(K):
        if np.any(labels == k):
            continue
        counts = np.bincount(labels, minlength=K)
        own = np.einsum("ij,ij->i", X, C[labels])
        own[counts[labels] < 2] = np.inf
        far = int(np.argmin(own))
        labels[far] = k
        C[k] = X[far]
    return labels, C


def spherical_objective(Zp, labels, centroids) -> float:
    X = normalize_rows(Zp)
    return float(np.einsum("ij,ij->", X, np.asarray(centroids)[labels]))


def learn_concepts(Zp, K: int, seed=0, init=None, max_iter: int = 100) -> ClusterAssignment:
    """Spherical K-Means on the rows of ``Zp``.

    Rows are compared by cosine; each centroid is the normalized sum of the
    unit-normalized rows assigned to it, which maximizes the total cosine
    for a fixed assignment. Empty clusters are reseeded with the row least
    similar to its current centroid.

    ``objective`` in the result records ``sum_i cos(Zp_i, c_{L_i})`` after
    every centroid update; it is non-decreasing.
    """
    Zp = np.asarray(Zp, dtype=float)
    n = Zp.shape[0]
    if n < K:
        raise InsufficientSamples(f"need at least K={K} rows, got {n}")
    X = normalize_rows(Zp)
    if not np.any(np.linalg.norm(X, axis=1) > 0):
        raise DegenerateData("every row has zero norm")
    rng = np.random.default_rng(seed)
    if init is None:
        C = _farthest_point_init(X, K, rng)
    else:
        C = normalize_rows(np.array(init, dtype=float, copy=True))

    labels = None
    trace = []
    for _ in range(max(1, max_iter)):
        new = np.argmax(X @ C.T, axis=1)
        new, C = _repair_empty(X, new, C, K)
        sums = _indicator(new, K).T @ X
        norms = np.linalg.norm(sums, axis=1)
        ok = norms > 1e-12
        C[ok] = sums[ok] / norms[ok, None]
        trace.append(spherical_objective(Zp, new, C))
        if labels is not None and np.array_equal(new, labels):
            labels = new
            break
        labels = new
    return ClusterAssignment(labels, C, tuple(trace))


# ---------------------------------------------------------------------------
# Silhouette


def _pairwise(Y):
    return cdist(Y, Y)


def _silhouette_parts(Y, labels):
    labels = np.asarray(labels)
    ids, lab = np.unique(labels, return_inverse=True)
    lab = lab.reshape(-1)
    if len(ids) < 2:
        raise SingleCluster("silhouette needs at least two nonempty clusters")
    n = len(lab)
    onehot = np.zeros((n, len(ids)))
    onehot[np.arange(n), lab] = 1.0
    counts = onehot.sum(axis=0)
    D = _pairwise(Y)
    sums = D @ onehot
    own = counts[lab] - 1
    a = np.where(own > 0, sums[np.arange(n), lab] / np.maximum(own, 1), 0.0)
    means = sums / counts
    means[np.arange(n), lab] = np.inf
    kstar = np.argmin(means, axis=1)
    b = means[np.arange(n), kstar]
    m = np.maximum(a, b)
    valid = (own > 0) & (m > 0)
    s = np.where(valid, (b - a) / np.where(valid, m, 1.0), 0.0)
    return D, lab, onehot, counts, own, a, b, kstar, valid, s


def silhouette(Zp, labels) -> float:
    """Mean Silhouette coefficient with Euclidean distances.

    Singleton clusters, and points with ``a = b = 0``, contribute 0.
    """
    *_, s = _silhouette_parts(np.asarray(Zp, dtype=float), labels)
    return float(s.mean())


def silhouette_grad(Y, labels):
    """Silhouette value and its gradient with respect to the points ``Y``."""
    Y = np.asarray(Y, dtype=float)
    D, lab, onehot, counts, own, a, b, kstar, valid, s = _silhouette_parts(Y, labels)
    n = len(lab)
    # ds/da, ds/db; the two branches agree at a == b
    lo = a < b
    dsda = np.where(lo, -1.0 / np.where(lo, b, 1.0), -b / np.where(lo, 1.0, a) ** 2)
    dsdb = np.where(lo, a / np.where(lo, b, 1.0) ** 2, 1.0 / np.where(lo, 1.0, a))
    dsda = np.where(valid, dsda, 0.0) / n
    dsdb = np.where(valid, dsdb, 0.0) / n

    same = onehot[:, lab].T  # same[i, j] = j in cluster of i
    W = (dsda / np.maximum(own, 1))[:, None] * same
    W += (dsdb / counts[kstar])[:, None] * onehot[:, kstar].T
    with np.errstate(divide="ignore", invalid="ignore"):
        G = np.where(D > 0, W / D, 0.0)
    Gs = G + G.T
    grad = Gs.sum(axis=1)[:, None] * Y - Gs @ Y
    return float(s.mean()), grad


# ---------------------------------------------------------------------------
# objective and subspace updates


def original_space_centroids(Z, labels, K):
    """Mean of the rows of ``Z`` in each cluster (zero for empty clusters)."""
    Z = np.asarray(Z, dtype=float)
    sums = _indicator(labels, K).T @ Z
    counts = np.bincount(labels, minlength=K)
    return sums / np.maximum(counts, 1)[:, None], counts


def objective(P, Z, A: ClusterAssignment, reg_weight: float = 1.0) -> float:
    return objective_and_grad(P, Z, A, reg_weight, need_grad=False)[0]


def objective_and_grad(P, Z, A: ClusterAssignment, reg_weight: float = 1.0, need_grad=True):
    """``F(P)`` and ``dF/dP`` with the clustering ``A`` held fixed."""
    P = np.asarray(P, dtype=float)
    Z = np.asarray(Z, dtype=float)
    Y = Z @ P
    if need_grad:
        sil, dY = silhouette_grad(Y, A.labels)
        grad = Z.T @ dY
    else:
        sil = silhouette(Y, A.labels)
        grad = None
    value = sil
    if reg_weight:
        hat, counts = original_space_centroids(Z, A.labels, A.K)
        for k in np.flatnonzero(counts):
            c = A.centroids[k]
            u = P @ c
            nu, nm = np.linalg.norm(u), np.linalg.norm(hat[k])
            if nu == 0 or nm == 0:
                continue
            cos = float(u @ hat[k]) / (nu * nm)
            value += reg_weight * cos
            if need_grad:
                du = hat[k] / (nu * nm) - cos * u / nu**2
                grad += reg_weight * np.outer(du, c)
    return value, grad


def _stack(forbidden):
    mats = [f.basis if isinstance(f, Subspace) else np.asarray(f, dtype=float) for f in forbidden]
    return np.hstack(mats) if mats else None


def _project_off(P, F):
    if F is None:
        return P
    for _ in range(2):
        P = P - F @ (F.T @ P)
    return P


def retract(P):
    """Re-orthonormalize by QR with a positive-diagonal sign convention."""
    Q, R = np.linalg.qr(P)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs


def _ascend(P, grad, learning_rate, F):
    new = _project_off(P + learning_rate * grad, F)
    new = _project_off(retract(new), F)
    return Subspace(retract(new))


def learn_subspace_step(P, Z, A: ClusterAssignment, cfg: CCEConfig, forbidden=()) -> Subspace:
    """One gradient-ascent step on ``F``, then re-orthonormalization.

    The step is projected off every subspace in ``forbidden`` before the QR
    retraction so the result stays orthogonal to them.
    """
    P = P.basis if isinstance(P, Subspace) else np.asarray(P, dtype=float)
    _, grad = objective_and_grad(P, Z, A, cfg.reg_weight)
    return _ascend(P, grad, cfg.learning_rate, _stack(forbidden))


def orthogonal_reject(Z, P):
    """Remove the component of every row of ``Z`` lying in ``span(P)``."""
    P = P.basis if isinstance(P, Subspace) else np.asarray(P, dtype=float)
    Z = np.asarray(Z, dtype=float)
    return Z - (Z @ P) @ P.T


def random_subspace(d, S, rng, forbidden=()) -> Subspace:
    F = _stack(forbidden)
    P = _project_off(rng.standard_normal((d, S)), F)
    return Subspace(retract(_project_off(retract(P), F)))


# ---------------------------------------------------------------------------
# outer loop


def _fit_attribute(Z, K, cfg, forbidden, rng):
    F = _stack(forbidden)
    P = random_subspace(Z.shape[1], cfg.S, rng, forbidden)
    seed = int(rng.integers(2**32))
    A = learn_concepts(Z @ P.basis, K, seed=seed, max_iter=cfg.inner_kmeans_iters)
    value, grad = objective_and_grad(P.basis, Z, A, cfg.reg_weight)
    trace = []
    for _ in range(cfg.max_alternations):
        P = _ascend(P.basis, grad, cfg.learning_rate, F)
        A = learn_concepts(Z @ P.basis, K, seed=seed, init=A.centroids, max_iter=cfg.inner_kmeans_iters)
        # the gradient at (P, A) is also the next step's
        new_value, grad = objective_and_grad(P.basis, Z, A, cfg.reg_weight)
        trace.append(float(new_value))
        done = abs(new_value - value) <= cfg.conv_tol * max(abs(value), 1e-12)
        value = new_value
        if done:
            break
    return P, A, trace


def cce_extract(Z: EmbeddingMatrix, cfg: CCEConfig) -> ExtractionResult:
    """Extract ``M`` groups of ``K`` concepts from centered embeddings."""
    if isinstance(Z, EmbeddingMatrix):
        if not Z.centered:
            raise NonCentered("cce_extract expects centered embeddings; run center_standardize first")
        data = Z.data
    else:
        data = np.asarray(Z, dtype=float)
    n, d = data.shape
    if n < max(cfg.ks):
        raise InsufficientSamples(f"need at least {max(cfg.ks)} samples, got {n}")
    if cfg.M * cfg.S > d:
        raise ValueError(f"M*S = {cfg.M * cfg.S} exceeds embedding dimension {d}")

    rng = np.random.default_rng([sum(b"cce"), int(cfg.seed)])
    residual = data.copy()
    subspaces, traces, assignments, rows, attr = [], [], [], [], []
    for m, K in enumerate(cfg.ks):
        fits = [_fit_attribute(residual, K, cfg, subspaces, rng) for _ in range(cfg.restarts)]
        P, A, trace = max(fits, key=lambda fit: fit[2][-1])
        log.debug("attribute %d: %d alternations, F=%.6f", m, len(trace), trace[-1] if trace else float("nan"))
        rows.append(normalize_rows(A.centroids @ P.basis.T))
        attr.extend([m] * K)
        subspaces.append(P)
        traces.append(tuple(trace))
        assignments.append(A)
        residual = orthogonal_reject(residual, P)

    names = tuple(f"attr{a}_c{k}" for a, K in enumerate(cfg.ks) for k in range(K))
    concepts = ConceptSet(np.vstack(rows), np.array(attr), names, normalized=True)
    return ExtractionResult(concepts, tuple(subspaces), tuple(traces), tuple(assignments), cfg)
