"""Synthetic embeddings with known compositional ground truth.

Every composite concept (one concept per attribute) gets a representation
drawn i.i.d. from ``N(0, I_d)``; samples are that representation plus
isotropic Gaussian noise. Base-concept representations are the averages of
the composites that contain them, centered by the grand mean of all
composites and scaled by the per-coordinate standard deviation.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .concepts import ConceptSet, normalize_rows
from .embedding_store import EmbeddingMatrix, Labeling
from .errors import EmptyConcept, InvalidSpec

MODES = ("iid", "additive")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic dataset.

    ``composite_counts`` overrides the per-composite sample count, e.g.
    ``{(0, 0): 10}``. ``mode="additive"`` is an extension in which each
    composite is ``u_i + u'_j + interaction * e_ij`` instead of an i.i.d.
    draw; the default ``"iid"`` is the model the theory is stated for.
    """

    d: int
    attribute_sizes: tuple = (3, 3)
    samples_per_composite: int = 100
    noise_scale: float = 0.0
    seed: int = 0
    composite_counts: tuple = ()
    mode: str = "iid"
    interaction: float = 1.0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.attribute_sizes)
        object.__setattr__(self, "attribute_sizes", sizes)
        counts = self.composite_counts
        if isinstance(counts, dict):
            counts = counts.items()
        counts = tuple(sorted((tuple(int(i) for i in k), int(v)) for k, v in counts))
        object.__setattr__(self, "composite_counts", counts)
        if self.d < 8:
            raise InvalidSpec(f"d must be >= 8, got {self.d}")
        if len(sizes) < 2:
            raise InvalidSpec("need at least two attributes")
        if min(sizes) < 2:
            raise InvalidSpec(f"every attribute needs >= 2 concepts, got {sizes}")
        if self.samples_per_composite < 1:
            raise InvalidSpec("samples_per_composite must be >= 1")
        if self.noise_scale < 0:
            raise InvalidSpec("noise_scale must be nonnegative")
        if self.mode not in MODES:
            raise InvalidSpec(f"mode must be one of {MODES}")
        for key, n in counts:
            if len(key) != len(sizes) or any(not 0 <= k < s for k, s in zip(key, sizes)):
                raise InvalidSpec(f"composite {key} outside grid {sizes}")
            if n < 0:
                raise InvalidSpec("composite counts must be nonnegative")

    def count(self, composite) -> int:
        return dict(self.composite_counts).get(tuple(composite), self.samples_per_composite)

    def to_json(self) -> dict:
        return {
            "d": self.d,
            "attribute_sizes": list(self.attribute_sizes),
            "samples_per_composite": self.samples_per_composite,
            "noise_scale": self.noise_scale,
            "seed": self.seed,
            "composite_counts": [[list(k), v] for k, v in self.composite_counts],
            "mode": self.mode,
            "interaction": self.interaction,
        }

    @classmethod
    def from_json(cls, obj) -> "SyntheticSpec":
        obj = dict(obj)
        obj["attribute_sizes"] = tuple(obj.get("attribute_sizes", (3, 3)))
        obj["composite_counts"] = tuple((tuple(k), v) for k, v in obj.get("composite_counts", ()))
        return cls(**obj)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Generator-side truth.

    ``composite_reps`` has shape ``(*attribute_sizes, d)``. ``base_reps_raw``
    are composite averages before centering; ``base_reps`` are the same after
    ``(v - grand_mean) / scale``.
    """

    composite_reps: np.ndarray
    base_reps_raw: tuple
    base_reps: tuple
    grand_mean: np.ndarray
    scale: np.ndarray
    labeling: Optional[Labeling] = None
    spec: Optional[SyntheticSpec] = None

    @property
    def sizes(self) -> tuple:
        return self.composite_reps.shape[:-1]

    @property
    def d(self) -> int:
        return self.composite_reps.shape[-1]

    def centered_composites(self) -> np.ndarray:
        return (self.composite_reps - self.grand_mean) / self.scale

    def base_concepts(self, stats=None) -> ConceptSet:
        """Base representations as a ConceptSet, flattened attribute-major.

        With ``stats`` (a CenteringStats from the sample data) the raw base
        means are mapped into that data's standardized coordinates, which is
        where extracted concepts live.
        """
        if stats is None:
            rows = np.concatenate(self.base_reps)
        else:
            rows = stats.apply(np.concatenate(self.base_reps_raw))
        attr = np.repeat(np.arange(len(self.sizes)), self.sizes)
        names = self.labeling.concept_names() if self.labeling is not None else ()
        return ConceptSet(rows, attr, tuple(names))

    def to_json(self) -> dict:
        return {
            "attribute_sizes": list(self.sizes),
            "composite_reps": self.composite_reps.reshape(-1, self.d).tolist(),
            "base_reps_raw": [b.tolist() for b in self.base_reps_raw],
            "base_reps": [b.tolist() for b in self.base_reps],
            "grand_mean": self.grand_mean.tolist(),
            "scale": self.scale.tolist(),
        }


def _labeling_for(sizes, composites) -> Labeling:
    attributes = [f"attr{a}" for a in range(len(sizes))]
    concepts = [[f"c{k}" for k in range(s)] for s in sizes]
    assignment = np.asarray(composites, dtype=np.int64).reshape(-1, len(sizes))
    class_label = np.ravel_multi_index(tuple(assignment.T), sizes) if len(assignment) else []
    names = ["+".join(f"c{k}" for k in idx) for idx in itertools.product(*map(range, sizes))]
    return Labeling(attributes, concepts, assignment, class_label, names)


def grid_base_means(grid: np.ndarray, attribute: int) -> np.ndarray:
    """Average a ``(*sizes, d)`` composite grid over every other attribute."""
    grid = np.asarray(grid, dtype=float)
    others = tuple(a for a in range(grid.ndim - 1) if a != attribute)
    return grid.mean(axis=others)


def generate(spec: SyntheticSpec):
    """Sample embeddings and the matching ground truth.

    Rows are emitted in a seeded random order; ``GroundTruth.labeling``
    records each row's composite.

    Returns
    -------
    (EmbeddingMatrix, GroundTruth)
    """
    rng = np.random.default_rng(spec.seed)
    sizes = spec.attribute_sizes
    if spec.mode == "iid":
        grid = rng.standard_normal((*sizes, spec.d))
    else:
        grid = spec.interaction * rng.standard_normal((*sizes, spec.d))
        for a, s in enumerate(sizes):
            shape = [1] * len(sizes) + [spec.d]
            shape[a] = s
            grid = grid + rng.standard_normal((s, spec.d)).reshape(shape)

    cells = list(itertools.product(*map(range, sizes)))
    rows, composites = [], []
    for cell in cells:
        k = spec.count(cell)
        rows.append(grid[cell] + spec.noise_scale * rng.standard_normal((k, spec.d)))
        composites.extend([cell] * k)
    data = np.concatenate(rows)
    composites = np.asarray(composites, dtype=np.int64).reshape(-1, len(sizes))
    order = rng.permutation(len(data))
    data, composites = data[order], composites[order]

    truth = make_ground_truth(grid, _labeling_for(sizes, composites), spec)
    source = f"synthetic:d={spec.d},sizes={list(sizes)},seed={spec.seed}"
    return EmbeddingMatrix(data, False, source), truth


def make_ground_truth(grid, labeling=None, spec=None) -> GroundTruth:
    grid = np.asarray(grid, dtype=float)
    d = grid.shape[-1]
    flat = grid.reshape(-1, d)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    scale = np.where(std > 1e-12, std, 1.0)
    raw = tuple(grid_base_means(grid, a) for a in range(grid.ndim - 1))
    centered = tuple((b - mean) / scale for b in raw)
    return GroundTruth(grid, raw, centered, mean, scale, labeling, spec)


def base_from_composites(G: GroundTruth, attribute: int) -> np.ndarray:
    """Raw (uncentered) base representations of one attribute's concepts."""
    return grid_base_means(G.composite_reps, attribute)


def ground_truth_representations(E: EmbeddingMatrix, L: Labeling):
    """Per-concept sample means, plus means of every observed composite.

    Returns
    -------
    base : ConceptSet
        One row per concept, attribute-major, unnormalized.
    composites : dict
        ``{composite index tuple: mean vector}`` for each combination present.
    """
    data = E.data if isinstance(E, EmbeddingMatrix) else np.asarray(E, dtype=float)
    if L.n != data.shape[0]:
        raise ValueError(f"labeling has {L.n} rows but embeddings have {data.shape[0]}")
    rows = []
    names = L.concept_names()
    g = L.global_assignment()
    for k in range(L.total_concepts):
        mask = np.any(g == k, axis=1)
        if not mask.any():
            raise EmptyConcept(f"concept {names[k]!r} has no samples")
        rows.append(data[mask].mean(axis=0))
    base = ConceptSet(np.array(rows), L.attribute_of(), tuple(names))

    keys, inverse = np.unique(L.assignment, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    composites = {
        tuple(int(v) for v in key): data[inverse == c].mean(axis=0)
        for c, key in enumerate(keys)
    }
    return base, composites


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


@dataclass(frozen=True, eq=False)
class PropertyReport:
    sum_to_zero: tuple
    cross_abs_cos: np.ndarray
    within_abs_cos: tuple
    within_nonorthogonal: tuple
    reconstruction_residuals: np.ndarray

    @property
    def cross_max(self) -> float:
        return float(self.cross_abs_cos.max())

    @property
    def cross_median(self) -> float:
        return float(np.median(self.cross_abs_cos))

    @property
    def mean_reconstruction_residual(self) -> float:
        return float(self.reconstruction_residuals.mean())

    def to_json(self) -> dict:
        return {
            "sum_to_zero": list(self.sum_to_zero),
            "cross_max_abs_cos": self.cross_max,
            "cross_median_abs_cos": self.cross_median,
            "within_nonorthogonal": list(self.within_nonorthogonal),
            "mean_reconstruction_residual": self.mean_reconstruction_residual,
        }


def reconstruction_residual(composite, bases) -> float:
    """Relative error of rebuilding ``composite`` from cosine-weighted bases.

    ``composite ~ |composite| * sum_a cos(composite, b_a) * b_a / |b_a|``;
    zero when the composite is a positive sum of orthogonal bases with
    equal norm.
    """
    composite = np.asarray(composite, dtype=float)
    norm = np.linalg.norm(composite)
    unit = composite / norm
    approx = sum(_cos(composite, b) * b / np.linalg.norm(b) for b in bases)
    return float(np.linalg.norm(unit - approx))


def verify_theorem_properties(G: GroundTruth, within_threshold: float = 0.1) -> PropertyReport:
    """Measure the orthogonality and composition properties of ``G``.

    Reports per-attribute sum-to-zero residual norms, all cross-attribute
    absolute cosines, within-attribute absolute cosines (and whether some
    pair exceeds ``within_threshold``), and the per-composite reconstruction
    residual from the base representations of its own concepts.
    """
    bases = G.base_reps
    sum_to_zero = tuple(float(np.linalg.norm(b.sum(axis=0))) for b in bases)

    cross = []
    for a, b in itertools.combinations(range(len(bases)), 2):
        cross.extend(abs(_cos(x, y)) for x in bases[a] for y in bases[b])
    within = tuple(
        np.array([abs(_cos(x, y)) for x, y in itertools.combinations(b, 2)]) for b in bases
    )
    nonorth = tuple(bool(w.size and w.max() > within_threshold) for w in within)

    comp = G.centered_composites()
    residuals = np.empty(G.sizes)
    for cell in itertools.product(*map(range, G.sizes)):
        residuals[cell] = reconstruction_residual(comp[cell], [bases[a][k] for a, k in enumerate(cell)])
    return PropertyReport(sum_to_zero, np.array(cross), within, nonorth, residuals)


def perfect_ranker_instance(d, sizes, samples_per_composite, rng, max_noise: float = 1.0):
    """Orthonormal base concepts and samples that each base ranks perfectly.

    Every sample with concepts ``(i, j)`` is ``v_i + v'_j + e`` where ``e``
    is orthogonal to every base vector with ``|e| <= max_noise``. Each base
    then scores its own samples strictly above all others. With
    ``max_noise**2 < 6`` the sum ``v_i + v'_j`` also ranks its composite
    perfectly; perfect base rankers alone do not guarantee that, since two
    samples sharing ``c_i`` are not ordered by ``v_i``.

    Returns ``(bases, X, assignment)`` where ``bases`` is a list of per-
    attribute ``(size, d)`` arrays.
    """
    total = int(sum(sizes))
    if total >= d:
        raise InvalidSpec("need d > total number of concepts")
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    splits = np.cumsum(sizes)[:-1]
    bases = [q.T for q in np.split(Q[:, :total], splits, axis=1)]
    free = Q[:, total:]
    X, assignment = [], []
    for cell in itertools.product(*map(range, sizes)):
        for _ in range(samples_per_composite):
            e = free @ rng.standard_normal(free.shape[1])
            e *= rng.uniform(0.0, max_noise) / np.linalg.norm(e)
            X.append(sum(bases[a][k] for a, k in enumerate(cell)) + e)
            assignment.append(cell)
    return bases, np.array(X), np.array(assignment)
