"""Unsupervised concept extractors used as points of comparison.

Every extractor returns a unit-normalized :class:`ConceptSet`. Iterative
extractors accept ``return_info=True`` and then also return a dict whose
``"trace"`` entry lists the objective after every iteration.
"""
from __future__ import annotations

import warnings

import numpy as np

from .concepts import ConceptSet
from .embedding_store import EmbeddingMatrix
from .errors import InsufficientSamples, NearZeroConceptWarning, RankDeficient

NEAR_ZERO = 1e-8


def _rng(method, seed):
    # salted so extractor streams never coincide with the data generator's
    return np.random.default_rng([sum(method.encode()), int(seed)])


def _data(Z):
    return Z.data if isinstance(Z, EmbeddingMatrix) else np.asarray(Z, dtype=float)


def _names(prefix, K):
    return tuple(f"{prefix}_{k}" for k in range(K))


def pca_concepts(Z, K: int) -> ConceptSet:
    """Top-``K`` right singular vectors of ``Z``.

    Each vector's sign is fixed so that its largest-magnitude coordinate is
    positive.
    """
    X = _data(Z)
    if K > min(X.shape):
        raise RankDeficient(f"K={K} exceeds min(n, d)={min(X.shape)}")
    _, s, Vt = np.linalg.svd(X, full_matrices=False)
    tol = max(X.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    if np.count_nonzero(s > tol) < K:
        raise RankDeficient(f"only {np.count_nonzero(s > tol)} nonzero singular values, K={K}")
    V = Vt[:K].copy()
    pivot = np.argmax(np.abs(V), axis=1)
    V *= np.sign(V[np.arange(K), pivot])[:, None]
    return ConceptSet.from_rows(V, names=_names("pca", K))


# ---------------------------------------------------------------------------
# K-Means (ACE)


def _kmeanspp(X, K, rng):
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _sq_dists(X, C):
    return (X**2).sum(1)[:, None] - 2.0 * X @ C.T + (C**2).sum(1)[None, :]


def kmeans(X, K, rng, n_init=10, max_iter=300):
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` runs.

    Returns ``(centroids, labels, inertia)``.
    """
    X = np.asarray(X, dtype=float)
    best = None
    for _ in range(n_init):
        C = _kmeanspp(X, K, rng)
        labels = None
        for _ in range(max_iter):
            new = np.argmin(_sq_dists(X, C), axis=1)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for k in range(K):
                members = X[labels == k]
                if len(members):
                    C[k] = members.mean(axis=0)
        inertia = float(((X - C[labels]) ** 2).sum())
        if best is None or inertia < best[2]:
            best = (C.copy(), labels.copy(), inertia)
    return best


def ace_concepts(Z, K: int, seed=0, n_init: int = 10) -> ConceptSet:
    """Euclidean K-Means centroids, unit-normalized."""
    X = _data(Z)
    if X.shape[0] < K:
        raise InsufficientSamples(f"need at least K={K} samples, got {X.shape[0]}")
    rng = _rng("ace", seed)
    C, _, _ = kmeans(X, K, rng, n_init=n_init)
    scale = np.abs(X).max() if X.size else 1.0
    flags = []
    for k, c in enumerate(C):
        if np.linalg.norm(c) <= NEAR_ZERO * max(scale, 1.0):
            flags.append(f"near_zero:{k}")
            warnings.warn(f"ACE concept {k} is a near-zero centroid", NearZeroConceptWarning, stacklevel=2)
            if not np.any(c):
                C[k] = np.eye(X.shape[1])[0]
    return ConceptSet.from_rows(C, names=_names("ace", K), flags=flags)


# ---------------------------------------------------------------------------
# dictionary learning


def _soft(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _dl_objective(X, A, D, lam):
    return float(((X - A @ D) ** 2).sum() + lam * np.abs(A).sum())


def _sparse_code(X, A, D, lam, sweeps=100, tol=1e-12):
    """Coordinate descent on the codes with unit-norm atoms."""
    R = X - A @ D
    for _ in range(sweeps):
        delta = 0.0
        for k in range(D.shape[0]):
            rho = R @ D[k] + A[:, k]
            new = _soft(rho, lam / 2.0)
            step = new - A[:, k]
            if np.any(step):
                R -= np.outer(step, D[k])
                A[:, k] = new
                delta = max(delta, float(np.abs(step).max()))
        if delta <= tol:
            break
    return A


def _update_atoms(X, A, D):
    R = X - A @ D
    for k in range(D.shape[0]):
        a = A[:, k]
        if not np.any(a):
            continue
        Rk = R + np.outer(a, D[k])
        v = Rk.T @ a
        norm = np.linalg.norm(v)
        if norm > 0:
            D[k] = v / norm
        R = Rk - np.outer(a, D[k])
    return D


def dictlearn_concepts(Z, K: int, lam: float = 0.1, iters: int = 200, seed=0, tol=1e-10, return_info=False):
    """Minimize ``|Z - A D|_F^2 + lam |A|_1`` over codes ``A`` and unit-norm atoms ``D``.

    Each alternation runs coordinate descent with soft-thresholding on ``A``
    and then an exact per-atom update of ``D`` on the unit sphere, so the
    objective never increases.
    """
    X = _data(Z)
    n, d = X.shape
    rng = _rng("dictlearn", seed)
    if n >= K:
        D = X[rng.choice(n, K, replace=False)].copy()
    else:
        D = rng.standard_normal((K, d))
    norms = np.linalg.norm(D, axis=1)
    D[norms == 0] = rng.standard_normal((int(np.sum(norms == 0)), d))
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    A = np.zeros((n, K))
    trace = []
    for _ in range(iters):
        A = _sparse_code(X, A, D, lam)
        D = _update_atoms(X, A, D)
        trace.append(_dl_objective(X, A, D, lam))
        if len(trace) > 1 and trace[-2] - trace[-1] <= tol * max(trace[-2], 1e-300):
            break
    concepts = ConceptSet.from_rows(D, names=_names("dictlearn", K))
    if return_info:
        return concepts, {"trace": trace, "codes": A}
    return concepts


# ---------------------------------------------------------------------------
# semi-NMF


def _pos(M):
    return (np.abs(M) + M) / 2.0


def _neg(M):
    return (np.abs(M) - M) / 2.0


def seminmf_concepts(Z, K: int, iters: int = 200, seed=0, tol=1e-10, return_info=False):
    """Semi-NMF ``Z ~ G F^T`` with ``G >= 0``; columns of ``F`` are the concepts.

    ``F`` is the exact least-squares solution given ``G``; ``G`` uses the
    square-root multiplicative update, which keeps it nonnegative and the
    objective non-increasing.
    """
    X = _data(Z)
    n = X.shape[0]
    if n < K:
        raise InsufficientSamples(f"need at least K={K} samples, got {n}")
    rng = _rng("seminmf", seed)
    _, labels, _ = kmeans(X, K, rng, n_init=1)
    G = np.full((n, K), 0.2)
    G[np.arange(n), labels] += 1.0
    eps = 1e-16
    trace = []
    for _ in range(iters):
        F = X.T @ G @ np.linalg.pinv(G.T @ G)
        XF = X @ F
        FtF = F.T @ F
        G = G * np.sqrt((_pos(XF) + G @ _neg(FtF)) / (_neg(XF) + G @ _pos(FtF) + eps))
        trace.append(float(((X - G @ F.T) ** 2).sum()))
        if len(trace) > 1 and trace[-2] - trace[-1] <= tol * max(trace[-2], 1e-300):
            break
    F = X.T @ G @ np.linalg.pinv(G.T @ G)
    cols = F.T.copy()
    dead = np.linalg.norm(cols, axis=1) == 0
    cols[dead] = rng.standard_normal((int(dead.sum()), cols.shape[1]))
    concepts = ConceptSet.from_rows(cols, names=_names("seminmf", K))
    if return_info:
        return concepts, {"trace": trace, "G": G, "F": F}
    return concepts


def random_concepts(d: int, K: int, seed=0) -> ConceptSet:
    rng = _rng("random", seed)
    return ConceptSet.from_rows(rng.standard_normal((K, d)), names=_names("random", K))


METHODS = ("pca", "ace", "dictlearn", "seminmf", "random")


def extract(method: str, Z, K: int, seed=0, lam: float = 0.1, iters: int = 200) -> ConceptSet:
    """Dispatch to a baseline extractor by name."""
    if method == "pca":
        return pca_concepts(Z, K)
    if method == "ace":
        return ace_concepts(Z, K, seed)
    if method == "dictlearn":
        return dictlearn_concepts(Z, K, lam, iters, seed)
    if method == "seminmf":
        return seminmf_concepts(Z, K, iters, seed)
    if method == "random":
        return random_concepts(_data(Z).shape[1], K, seed)
    raise ValueError(f"unknown baseline {method!r}; expected one of {METHODS}")
