import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtme.analyzer import (ConflictReport, ConflictStats, aggregate_layer_conflicts, cosine_bins,
                           detect_conflicts, jacobi_eigh, project, select_split, spectral_split,
                           uncentered_covariance)
from dtme.errors import ContractError, NumericError, ShapeError
from dtme.model import TokenBatch


def random_psd(rng, p, rank=None):
    rank = p if rank is None else rank
    A = rng.standard_normal((p, rank))
    return A @ A.T


def brute_force_counts(grads, basis):
    """Independent double loop over positions and pairs with explicit projections."""
    K = len(grads)
    flat = [g.reshape(-1, g.shape[-1]) for g in grads]
    P_R = sum(np.outer(basis.U[:, k], basis.U[:, k]) for k in range(basis.m)) if basis.m else 0 * np.eye(basis.U.shape[0])
    P_N = np.eye(basis.U.shape[0]) - P_R
    rng_counts, null_counts = {}, {}
    for i in range(K):
        for j in range(i + 1, K):
            rc = nc = 0
            for a, b in zip(flat[i], flat[j]):
                for P, which in ((P_R, "r"), (P_N, "n")):
                    u, v = P @ a, P @ b
                    if np.linalg.norm(u) < 1e-12 or np.linalg.norm(v) < 1e-12:
                        continue
                    if float(np.dot(u, v)) <= 0.0:
                        if which == "r":
                            rc += 1
                        else:
                            nc += 1
            rng_counts[(i, j)], null_counts[(i, j)] = rc, nc
    return rng_counts, null_counts


class TestCovariance:
    def test_two_tokens(self):
        cov = uncentered_covariance(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
        np.testing.assert_array_equal(cov.matrix, np.eye(2))

    def test_zero_tokens(self):
        assert np.all(uncentered_covariance(np.zeros((3, 4, 5))).matrix == 0.0)

    def test_divides_by_samples(self):
        T = np.random.default_rng(0).standard_normal((5, 7, 3))
        cov = uncentered_covariance(T)
        expected = sum(t.T @ t for t in T) / 5
        np.testing.assert_allclose(cov.matrix, expected, atol=1e-12)
        assert cov.n == 5

    def test_accepts_token_batches(self):
        T = np.random.default_rng(1).standard_normal((4, 6, 3))
        batches = [TokenBatch(t, layer=2, sample=k) for k, t in enumerate(T)]
        cov = uncentered_covariance(batches)
        np.testing.assert_allclose(cov.matrix, uncentered_covariance(T).matrix, atol=1e-12)
        assert cov.layer == 2

    def test_empty(self):
        with pytest.raises(ContractError):
            uncentered_covariance(np.zeros((0, 4, 3)))


class TestJacobi:
    def test_diagonal(self):
        w, V = jacobi_eigh(np.diag([3.0, 1.0, 2.0]))
        assert sorted(w) == [1.0, 2.0, 3.0]

    @pytest.mark.parametrize("p", [1, 2, 3, 7, 16, 33])
    def test_matches_library_eigenvalues(self, p):
        C = random_psd(np.random.default_rng(p), p)
        w, V = jacobi_eigh(C)
        np.testing.assert_allclose(np.sort(w), np.linalg.eigvalsh(C), atol=1e-9 * np.abs(C).max())
        np.testing.assert_allclose(V @ np.diag(w) @ V.T, C, atol=1e-9 * np.abs(C).max())

    def test_degenerate_spectrum(self):
        w, V = jacobi_eigh(np.eye(4) * 2.0)
        np.testing.assert_array_equal(w, [2.0] * 4)

    def test_rejects_non_square(self):
        with pytest.raises(ShapeError):
            jacobi_eigh(np.ones((2, 3)))

    def test_rejects_nan(self):
        with pytest.raises(NumericError):
            jacobi_eigh(np.array([[1.0, np.nan], [np.nan, 1.0]]))


class TestSplit:
    def test_ratio_rule(self):
        # head >= r * tail: (100) vs 100*(1) -> m=1
        assert select_split(np.array([100.0, 1.0, 0.0]), 100.0) == 1
        assert select_split(np.array([100.0, 1.0, 0.0]), 101.0) == 2

    def test_identity_splits_one_to_one(self):
        assert spectral_split(np.eye(4), 1.0).m == 2

    def test_rank_deficient(self):
        C = np.diag([5.0, 0.0, 0.0])
        b = spectral_split(C, 1000.0)
        assert b.m == 1 and b.range_mass == 1.0

    def test_zero_matrix(self):
        assert spectral_split(np.zeros((3, 3)), 10.0).m == 1

    def test_non_psd(self):
        with pytest.raises(NumericError):
            spectral_split(np.diag([1.0, -1.0]), 10.0)

    def test_non_symmetric(self):
        with pytest.raises(NumericError):
            spectral_split(np.array([[1.0, 2.0], [0.0, 1.0]]), 10.0)

    def test_bad_ratio(self):
        with pytest.raises(ContractError):
            spectral_split(np.eye(2), 0.0)

    def test_sorted_descending(self):
        b = spectral_split(random_psd(np.random.default_rng(3), 9), 10.0)
        assert np.all(np.diff(b.eigenvalues) <= 0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), p=st.integers(1, 24), rank=st.integers(1, 24))
def test_spectral_identities(seed, p, rank):
    C = random_psd(np.random.default_rng(seed), p, min(rank, p))
    b = spectral_split(C, 10.0)
    scale = max(1.0, np.abs(C).max())
    assert np.linalg.norm(b.U @ np.diag(b.eigenvalues) @ b.U.T - C) <= 1e-8 * scale
    assert np.abs(b.U.T @ b.U - np.eye(p)).max() <= 1e-8
    PR, PN = b.range_projector, b.null_projector
    assert np.abs(PR + PN - np.eye(p)).max() <= 1e-8
    assert np.abs(PR @ PR - PR).max() <= 1e-8
    assert np.abs(PN @ PN - PN).max() <= 1e-8
    ms = [spectral_split(C, r).m for r in (1, 10, 100, 500, 1000)]
    assert ms == sorted(ms)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_projection_parts_sum_and_are_orthogonal(seed):
    rng = np.random.default_rng(seed)
    b = spectral_split(random_psd(rng, 6), 10.0)
    g = rng.standard_normal((4, 6))
    gr, gn = project(g, b)
    np.testing.assert_allclose(gr + gn, g, atol=1e-12)
    assert np.abs(np.einsum("ij,ij->i", gr, gn)).max() <= 1e-10


def test_project_shape_check():
    with pytest.raises(ShapeError):
        project(np.ones(3), spectral_split(np.eye(4), 1.0))


class TestDetect:
    def test_antiparallel_counts_in_both_spaces(self):
        b = spectral_split(np.diag([10.0, 1.0]), 5.0)
        stats = detect_conflicts([np.array([[1.0, 1.0]]), np.array([[-1.0, -1.0]])], b)
        assert stats.range_counts[(0, 1)] == 1 and stats.null_counts[(0, 1)] == 1

    def test_orthogonal_counts_as_conflict(self):
        b = spectral_split(np.diag([10.0, 1.0]), 5.0)
        stats = detect_conflicts([np.array([[1.0, 1.0]]), np.array([[1.0, -1.0]])], b)
        assert stats.range_counts[(0, 1)] == 0 and stats.null_counts[(0, 1)] == 1

    def test_zero_component_is_skipped(self):
        b = spectral_split(np.diag([10.0, 1.0]), 5.0)
        stats = detect_conflicts([np.array([[1.0, 0.0]]), np.array([[-1.0, 0.0]])], b)
        assert stats.range_counts[(0, 1)] == 1 and stats.null_counts[(0, 1)] == 0

    def test_identical_gradients_fill_top_bin(self):
        g = np.random.default_rng(0).standard_normal((5, 3))
        stats = detect_conflicts([g, g], spectral_split(np.eye(3), 1.0))
        assert stats.histogram[-1] == 5 and stats.histogram.sum() == 5

    def test_antiparallel_fill_bottom_bin(self):
        g = np.random.default_rng(0).standard_normal((5, 3))
        stats = detect_conflicts([g, -g], spectral_split(np.eye(3), 1.0))
        assert stats.histogram[0] == 5

    def test_needs_two_tasks(self):
        with pytest.raises(ContractError):
            detect_conflicts([np.ones((2, 3))], spectral_split(np.eye(3), 1.0))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            detect_conflicts([np.ones((2, 3)), np.ones((3, 3))], spectral_split(np.eye(3), 1.0))

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        p, K, N = rng.integers(2, 9), rng.integers(2, 5), rng.integers(1, 9)
        b = spectral_split(random_psd(rng, p, rng.integers(1, p + 1)), float(rng.choice([1, 10, 100])))
        grads = [rng.standard_normal((3, N, p)) for _ in range(K)]
        stats = detect_conflicts(grads, b)
        rc, nc = brute_force_counts(grads, b)
        assert stats.range_counts == rc and stats.null_counts == nc
        assert stats.examined == 3 * N


def test_cosine_bins_edges():
    assert cosine_bins(np.array([-1.0, 1.0, 0.0]), 4).tolist() == [1, 0, 1, 1]


def test_severity_and_merge():
    a = ConflictStats(2, 3, examined=4, range_counts={(0, 1): 4, (0, 2): 0, (1, 2): 2})
    b = ConflictStats(2, 3, examined=4, null_counts={(0, 1): 3, (0, 2): 3, (1, 2): 3})
    agg = aggregate_layer_conflicts([a, b])
    assert agg == {2: (6 / 24, 9 / 24)}
    with pytest.raises(ContractError):
        a.merge(ConflictStats(3, 3))
    with pytest.raises(ContractError):
        aggregate_layer_conflicts([])


def test_report_round_trip():
    rng = np.random.default_rng(5)
    bases = {d: spectral_split(random_psd(rng, 4), 10.0) for d in (1, 2)}
    stats = {d: detect_conflicts([rng.standard_normal((6, 4)) for _ in range(3)], bases[d], layer=d) for d in (1, 2)}
    report = ConflictReport(10.0, 3, list(stats.values()), bases)
    text = report.dumps()
    assert [r["m"] for r in report.records()] == [bases[1].m, bases[2].m]
    back = ConflictReport.loads(text)
    assert back.severities() == report.severities()
    bare = ConflictReport(10.0, 3, list(stats.values()))
    assert ConflictReport.loads(bare.dumps()).dumps() == bare.dumps()
