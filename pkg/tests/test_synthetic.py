import itertools

import numpy as np
import pytest

from concept_forge.embedding_store import EmbeddingMatrix, Labeling, center_standardize
from concept_forge.errors import EmptyConcept, InvalidSpec
from concept_forge.metrics import composed_score_weights, concept_score, roc_auc
from concept_forge.synthetic import (
    SyntheticSpec,
    base_from_composites,
    generate,
    ground_truth_representations,
    make_ground_truth,
    perfect_ranker_instance,
    reconstruction_residual,
    verify_theorem_properties,
)


def test_zero_noise_samples_equal_composites():
    E, G = generate(SyntheticSpec(d=16, attribute_sizes=(2, 2), samples_per_composite=1))
    assert E.n == 4
    for x, cell in zip(E.data, G.labeling.assignment):
        np.testing.assert_array_equal(x, G.composite_reps[tuple(cell)])


def test_generate_deterministic():
    spec = SyntheticSpec(d=512, attribute_sizes=(3, 3), samples_per_composite=100, noise_scale=0.5, seed=7)
    (E1, G1), (E2, G2) = generate(spec), generate(spec)
    assert np.array_equal(E1.data, E2.data)
    assert np.array_equal(G1.labeling.assignment, G2.labeling.assignment)
    assert not np.array_equal(E1.data, generate(SyntheticSpec(d=512, noise_scale=0.5, seed=8))[0].data)


def test_composite_counts_override():
    spec = SyntheticSpec(d=16, samples_per_composite=5, composite_counts={(0, 0): 1})
    E, G = generate(spec)
    assert E.n == 8 * 5 + 1
    assert np.sum(np.all(G.labeling.assignment == [0, 0], axis=1)) == 1


@pytest.mark.parametrize("kwargs", [dict(d=4), dict(d=16, attribute_sizes=(3,)), dict(d=16, attribute_sizes=(1, 3)),
                                    dict(d=16, samples_per_composite=0), dict(d=16, noise_scale=-1.0),
                                    dict(d=16, mode="other"), dict(d=16, composite_counts={(5, 0): 1})])
def test_spec_validation(kwargs):
    with pytest.raises(InvalidSpec):
        SyntheticSpec(**kwargs)


def test_spec_json_roundtrip():
    spec = SyntheticSpec(d=32, attribute_sizes=(2, 3), composite_counts={(1, 2): 4}, mode="additive", seed=3)
    assert SyntheticSpec.from_json(spec.to_json()) == spec


def test_cross_attribute_orthogonality_d1024():
    _, G = generate(SyntheticSpec(d=1024, attribute_sizes=(4, 4), samples_per_composite=50, noise_scale=0.3))
    rep = verify_theorem_properties(G)
    assert rep.cross_median < 0.1
    assert max(rep.sum_to_zero) < 1e-8


def test_orthogonality_95th_percentile_over_seeds():
    cos = []
    for seed in range(20):
        G = make_ground_truth(np.random.default_rng(seed).standard_normal((4, 4, 1024)))
        cos.extend(verify_theorem_properties(G).cross_abs_cos)
    assert np.percentile(cos, 95) < 0.25


@pytest.mark.parametrize("sizes", [(2, 2), (3, 3), (4, 2), (3, 2, 2)])
def test_sum_to_zero_every_seed(sizes):
    for seed in range(10):
        G = make_ground_truth(np.random.default_rng(seed).standard_normal((*sizes, 64)))
        assert max(verify_theorem_properties(G).sum_to_zero) <= 1e-8


def test_base_from_composites_small():
    grid = np.array([[[2.0, 0.0], [0.0, 2.0]], [[1.0, 1.0], [3.0, 3.0]]])
    G = make_ground_truth(grid)
    np.testing.assert_array_equal(base_from_composites(G, 0), [[1, 1], [2, 2]])
    np.testing.assert_array_equal(base_from_composites(G, 1), [[1.5, 0.5], [1.5, 2.5]])


def test_base_from_composites_single_column_is_identity():
    grid = np.random.default_rng(0).standard_normal((3, 1, 8))
    np.testing.assert_array_equal(base_from_composites(make_ground_truth(grid), 0), grid[:, 0])


def test_base_from_composites_matches_direct_sum():
    grid = np.random.default_rng(1).standard_normal((3, 3, 64))
    G = make_ground_truth(grid)
    for i in range(3):
        manual = sum(grid[i, j] for j in range(3)) / 3
        np.testing.assert_allclose(base_from_composites(G, 0)[i], manual, atol=1e-12)
        manual = sum(grid[j, i] for j in range(3)) / 3
        np.testing.assert_allclose(base_from_composites(G, 1)[i], manual, atol=1e-12)


def test_centering_uses_grand_mean_of_composites():
    G = make_ground_truth(np.random.default_rng(2).standard_normal((3, 4, 16)))
    flat = G.composite_reps.reshape(-1, 16)
    np.testing.assert_allclose(G.grand_mean, flat.mean(axis=0))
    np.testing.assert_allclose(G.base_reps[0], (base_from_composites(G, 0) - flat.mean(0)) / flat.std(0))


def test_sample_means_two_rows():
    E = EmbeddingMatrix(np.array([[1.0, 0.0], [0.0, 1.0]]))
    L = Labeling(["color", "shape"], [["red", "blue"], ["a", "b"]], [[0, 0], [0, 1]])
    with pytest.raises(EmptyConcept):
        ground_truth_representations(E, L)
    E = EmbeddingMatrix(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
    L = Labeling(["color", "shape"], [["red", "blue"], ["a", "b"]], [[0, 0], [0, 1], [1, 1]])
    base, comps = ground_truth_representations(E, L)
    np.testing.assert_allclose(base.vectors[0], [0.5, 0.5])
    assert set(comps) == {(0, 0), (0, 1), (1, 1)}


def test_sample_means_equal_generator_bases_zero_noise():
    E, G = generate(SyntheticSpec(d=64, attribute_sizes=(3, 4), samples_per_composite=3))
    base, comps = ground_truth_representations(E, G.labeling)
    expected = np.concatenate([base_from_composites(G, 0), base_from_composites(G, 1)])
    assert np.abs(base.vectors - expected).max() <= 1e-9
    for cell, mean in comps.items():
        np.testing.assert_allclose(mean, G.composite_reps[cell], atol=1e-12)


def test_generator_gt_close_to_sample_gt_under_noise():
    E, G = generate(SyntheticSpec(d=256, samples_per_composite=200, noise_scale=0.3, seed=4))
    Z, stats = center_standardize(E)
    base, _ = ground_truth_representations(Z, G.labeling)
    gen = G.base_concepts(stats)
    cos = np.sum(base.vectors * gen.vectors, 1) / np.linalg.norm(base.vectors, axis=1) / np.linalg.norm(gen.vectors, axis=1)
    assert cos.min() > 0.99


def test_reconstruction_exact_composition_is_zero():
    Q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((16, 5)))
    rows, cols = Q[:, :2].T, Q[:, 2:].T
    for i, j in itertools.product(range(2), range(3)):
        assert reconstruction_residual(rows[i] + cols[j], [rows[i], cols[j]]) < 1e-12


def test_reconstruction_limit_formula():
    # large-d limit of the residual for i.i.d. composites: sqrt((l-1)(l'-1)/(l l' - 1))
    for l1, l2 in [(3, 3), (4, 4), (2, 5)]:
        G = make_ground_truth(np.random.default_rng(0).standard_normal((l1, l2, 20000)))
        limit = np.sqrt((l1 - 1) * (l2 - 1) / (l1 * l2 - 1))
        assert abs(verify_theorem_properties(G).mean_reconstruction_residual - limit) < 0.01


def test_within_attribute_pairs_are_not_orthogonal():
    G = make_ground_truth(np.random.default_rng(0).standard_normal((3, 3, 2048)))
    rep = verify_theorem_properties(G)
    # centered bases of one attribute sum to zero, so pairwise cos -> -1/2
    assert all(rep.within_nonorthogonal)
    np.testing.assert_allclose(rep.within_abs_cos[0], 0.5, atol=0.05)


def test_perfect_ranker_composition():
    rng = np.random.default_rng(0)
    for _ in range(100):
        sizes = tuple(rng.integers(2, 4, size=2))
        bases, X, assign = perfect_ranker_instance(32, sizes, 4, rng)
        norms = np.linalg.norm(X, axis=1)
        for a in range(2):
            for k in range(sizes[a]):
                y = assign[:, a] == k
                assert roc_auc(X @ bases[a][k] / norms, y) == 1.0
        i, j = rng.integers(sizes[0]), rng.integers(sizes[1])
        comp = bases[0][i] + bases[1][j]
        y = (assign[:, 0] == i) & (assign[:, 1] == j)
        assert roc_auc(X @ comp / norms, y) == 1.0


def test_lemma_identity_random():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 64))
        z, Ri, Rj = rng.standard_normal((3, d))
        wi, wj = rng.uniform(0.01, 10, size=2)
        a, b = composed_score_weights(Ri, Rj, wi, wj)
        lhs = concept_score(z, wi * Ri + wj * Rj)
        worst = max(worst, abs(lhs - (a * concept_score(z, Ri) + b * concept_score(z, Rj))))
    assert worst <= 1e-10


def test_additive_mode_bases_dominate():
    _, G = generate(SyntheticSpec(d=512, mode="additive", interaction=0.1))
    rep = verify_theorem_properties(G)
    assert rep.mean_reconstruction_residual < 0.2


def test_perfect_base_rankers_alone_do_not_compose():
    # both samples carry c_1; the (1,1) sample is mostly noise, so e1 + e3 ranks it below (1,2)
    e = np.eye(5)
    X = np.array([0.1 * e[0] + 0.1 * e[2] + e[4], e[0] + 0.1 * e[3], e[1] + e[2], e[1] + e[3]])
    assign = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])
    bases = [e[[0, 1]], e[[2, 3]]]
    for a in range(2):
        for k in range(2):
            assert roc_auc(X @ bases[a][k] / np.linalg.norm(X, axis=1), assign[:, a] == k) == 1.0
    comp = bases[0][0] + bases[1][0]
    y = (assign[:, 0] == 0) & (assign[:, 1] == 0)
    assert roc_auc(X @ comp / np.linalg.norm(X, axis=1), y) < 1.0
