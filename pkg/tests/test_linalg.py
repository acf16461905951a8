import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qrlora.errors import ConvergenceError, DomainError
from qrlora.linalg import (
    as_matrix,
    greedy_pivot_oracle,
    inverse_permutation,
    pca_project,
    perm_matrix,
    rrqr,
    svd,
)

from conftest import random_matrix_suite


def check_factorization(w, fac):
    d, k = w.shape
    m = min(d, k)
    npt.assert_allclose(fac.q.T @ fac.q, np.eye(m), atol=1e-10)
    assert np.all(np.tril(fac.r, -1) == 0.0)
    diag = np.diag(fac.r[:, :m])
    assert np.all(diag >= 0.0)
    slack = 1e-12 * max(diag[0], 1.0) if m else 0.0
    assert np.all(diag[1:] <= diag[:-1] + slack)
    assert sorted(fac.perm) == list(range(k))
    scale = max(np.linalg.norm(w), np.finfo(float).tiny)
    assert np.linalg.norm(w[:, fac.perm] - fac.q @ fac.r) / scale <= 1e-10


class TestRrqr:
    def test_identity(self):
        fac = rrqr(np.eye(3))
        npt.assert_array_equal(fac.perm, [0, 1, 2])
        npt.assert_allclose(fac.q, np.eye(3), atol=1e-15)
        npt.assert_allclose(fac.r, np.eye(3), atol=1e-15)

    def test_orthogonal_columns_by_norm(self):
        fac = rrqr(np.array([[0.0, 2.0], [1.0, 0.0]]))
        npt.assert_array_equal(fac.perm, [1, 0])
        npt.assert_allclose(fac.q, np.eye(2), atol=1e-15)
        npt.assert_allclose(fac.r, np.array([[2.0, 0.0], [0.0, 1.0]]), atol=1e-15)

    def test_matches_oracle_on_random_suite(self):
        for w in random_matrix_suite(200):
            fac = rrqr(w)
            npt.assert_array_equal(fac.perm, greedy_pivot_oracle(w))
            check_factorization(w, fac)

    def test_perm_matrix_reconstruction(self, rng):
        w = rng.normal(size=(7, 5))
        fac = rrqr(w)
        npt.assert_allclose(w @ perm_matrix(fac.perm), fac.q @ fac.r, atol=1e-12)

    def test_permutation_round_trip(self, rng):
        w = rng.normal(size=(6, 9))
        fac = rrqr(w)
        inv = inverse_permutation(fac.perm)
        npt.assert_array_equal(fac.perm[inv], np.arange(9))
        npt.assert_array_equal(inv[fac.perm], np.arange(9))

    def test_rejects_nonfinite(self):
        with pytest.raises(DomainError):
            rrqr(np.array([[1.0, np.nan], [0.0, 1.0]]))
        with pytest.raises(DomainError):
            rrqr(np.array([[np.inf]]))

    def test_rejects_empty_and_1d(self):
        with pytest.raises(DomainError):
            rrqr(np.zeros((0, 3)))
        with pytest.raises(DomainError):
            rrqr(np.zeros(4))

    def test_zero_matrix(self):
        fac = rrqr(np.zeros((3, 4)))
        npt.assert_array_equal(fac.perm, np.arange(4))
        assert np.all(fac.r == 0.0)
        check_factorization(np.zeros((3, 4)), fac)

    def test_deterministic(self, rng):
        w = rng.normal(size=(8, 8))
        a = rrqr(w)
        b = rrqr(w)
        assert a.q.tobytes() == b.q.tobytes()
        assert a.r.tobytes() == b.r.tobytes()
        npt.assert_array_equal(a.perm, b.perm)


class TestGreedyPivotOracle:
    def test_identity_tie_break(self):
        npt.assert_array_equal(greedy_pivot_oracle(np.eye(4)), np.arange(4))

    def test_norm_comparison(self):
        npt.assert_array_equal(greedy_pivot_oracle(np.array([[0.0, 2.0], [1.0, 0.0]])), [1, 0])

    def test_orthogonal_by_norm(self):
        npt.assert_array_equal(greedy_pivot_oracle(np.diag([3.0, 2.0, 1.0])), [0, 1, 2])

    def test_duplicate_columns_pick_lowest_index_first(self):
        col = np.array([1.0, 2.0, 3.0])
        w = np.column_stack([col, col, 0.1 * col])
        order = greedy_pivot_oracle(w)
        assert order[0] == 0
        npt.assert_array_equal(sorted(order[1:]), [1, 2])


@settings(max_examples=60, deadline=None)
@given(
    d=st.integers(2, 7),
    k=st.integers(2, 7),
    seed=st.integers(0, 2**31 - 1),
)
def test_rrqr_invariants_property(d, k, seed):
    w = np.random.default_rng(seed).normal(size=(d, k))
    fac = rrqr(w)
    check_factorization(w, fac)
    npt.assert_array_equal(fac.perm, greedy_pivot_oracle(w))


class TestSvd:
    def test_diagonal(self):
        npt.assert_allclose(svd(np.diag([3.0, 1.0])).sigma, [3.0, 1.0], atol=1e-12)

    def test_zero_matrix(self):
        fac = svd(np.zeros((2, 3)))
        npt.assert_array_equal(fac.sigma, [0.0, 0.0])
        npt.assert_allclose(fac.u.T @ fac.u, np.eye(2), atol=1e-12)
        npt.assert_allclose(fac.v.T @ fac.v, np.eye(2), atol=1e-12)

    def test_matches_eigh_oracle(self, rng):
        # independent route: eigenvalues of the Gram matrix
        w = rng.normal(size=(6, 4))
        ref = np.sqrt(np.maximum(np.linalg.eigvalsh(w.T @ w)[::-1], 0.0))
        npt.assert_allclose(svd(w).sigma, ref, atol=1e-8)

    def test_reconstruction_and_orthogonality(self, rng):
        for shape in [(5, 5), (8, 3), (3, 8), (10, 6)]:
            w = rng.normal(size=shape)
            fac = svd(w)
            m = min(shape)
            npt.assert_allclose(fac.u @ np.diag(fac.sigma) @ fac.v.T, w, atol=1e-10)
            npt.assert_allclose(fac.u.T @ fac.u, np.eye(m), atol=1e-10)
            npt.assert_allclose(fac.v.T @ fac.v, np.eye(m), atol=1e-10)

    def test_rank_deficient(self, rng):
        w = rng.normal(size=(8, 3)) @ rng.normal(size=(3, 8))
        fac = svd(w)
        assert np.sum(fac.sigma > 0) == 3
        npt.assert_allclose(fac.u @ np.diag(fac.sigma) @ fac.v.T, w, atol=1e-10)
        npt.assert_allclose(fac.u.T @ fac.u, np.eye(8), atol=1e-10)

    def test_singular_values_permutation_invariant(self, rng):
        w = rng.normal(size=(6, 5))
        shuffled = w[::-1][:, [3, 1, 4, 0, 2]]
        npt.assert_allclose(svd(w).sigma, svd(shuffled).sigma, atol=1e-9)

    def test_nonconvergence_names_cap(self, rng):
        w = rng.normal(size=(5, 5))
        with pytest.raises(ConvergenceError, match="0 sweeps"):
            svd(w, max_sweeps=0)

    def test_zero_sweeps_ok_for_diagonal(self):
        npt.assert_allclose(svd(np.diag([2.0, 1.0]), max_sweeps=0).sigma, [2.0, 1.0])


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 6), k=st.integers(1, 6), seed=st.integers(0, 2**31 - 1))
def test_svd_sigma_nonincreasing_property(d, k, seed):
    w = np.random.default_rng(seed).normal(size=(d, k))
    sigma = svd(w).sigma
    assert np.all(sigma >= 0.0)
    assert np.all(np.diff(sigma) <= 0.0)


class TestPca:
    def test_identical_rows_zero_variance(self):
        res = pca_project(np.tile([[1.0, 2.0, 3.0]], (5, 1)), 2)
        npt.assert_allclose(res.explained_variance, 0.0, atol=1e-20)

    def test_one_dimensional_data(self):
        x = np.array([[1.0, 0.0], [-1.0, 0.0], [2.0, 0.0], [-2.0, 0.0]])
        res = pca_project(x, 1)
        sign = np.sign(res.components[0, 0])
        npt.assert_allclose(sign * res.components[:, 0], [1.0, 0.0], atol=1e-12)
        npt.assert_allclose(sign * res.scores[:, 0], [1.0, -1.0, 2.0, -2.0], atol=1e-12)

    def test_matches_svd_truncation_oracle(self, rng):
        x = rng.normal(size=(50, 8))
        res = pca_project(x, 3)
        centered = x - x.mean(axis=0)
        u, s, vt = np.linalg.svd(centered, full_matrices=False)
        best_rank3 = u[:, :3] @ np.diag(s[:3]) @ vt[:3]
        npt.assert_allclose(res.scores @ res.components.T, best_rank3, atol=1e-8)

    def test_explained_variance_nonincreasing(self, rng):
        res = pca_project(rng.normal(size=(30, 6)), 5)
        assert np.all(np.diff(res.explained_variance) <= 0.0)

    def test_component_range_errors(self, rng):
        x = rng.normal(size=(4, 3))
        with pytest.raises(DomainError):
            pca_project(x, 0)
        with pytest.raises(DomainError):
            pca_project(x, 4)
        with pytest.raises(DomainError):
            pca_project(x[:1], 1)


class TestAsMatrix:
    def test_copies_on_dtype_change_only(self):
        w = np.ones((2, 2))
        assert as_matrix(w) is w

    def test_rejects_bad_inputs(self):
        for bad in [np.ones((2, 0)), np.ones(3), [[1.0, np.nan]]]:
            with pytest.raises(DomainError):
                as_matrix(bad)
