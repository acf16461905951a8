import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qrlora.adapter import InitStrategy, build_dual_layer
from qrlora.diagnostics import (
    aggregate_norm_stats,
    build_report,
    column_norm_stats,
    cosine_structure,
    diagnose_layer,
    effective_rank,
    feature_delta_pca,
    grassmann_similarity,
    layer_diagnostics,
    rank_efficiency,
)
from qrlora.errors import DomainError
from qrlora.linalg import pca_project

# Frozen from the hand computation for spectrum (3, 1):
# p = (0.75, 0.25), H = -(0.75 ln 0.75 + 0.25 ln 0.25) = 0.562335, exp(H) below.
ERANK_3_1 = 1.754765


class TestEffectiveRank:
    def test_identity(self):
        assert abs(effective_rank(np.eye(7)) - 7.0) <= 1e-9

    def test_rank_one(self):
        w = np.outer([1.0, -2.0, 0.5], [3.0, 1.0])
        assert abs(effective_rank(w) - 1.0) <= 1e-9

    def test_spectrum_3_1(self):
        assert abs(effective_rank(np.diag([3.0, 1.0])) - ERANK_3_1) <= 1e-5

    def test_zero_matrix_rejected(self):
        with pytest.raises(DomainError):
            effective_rank(np.zeros((3, 3)))

    def test_orthogonal_invariance(self, rng):
        w = rng.normal(size=(6, 5))
        q1 = np.linalg.qr(rng.normal(size=(6, 6)))[0]
        q2 = np.linalg.qr(rng.normal(size=(5, 5)))[0]
        assert abs(effective_rank(q1 @ w @ q2) - effective_rank(w)) <= 1e-8

    def test_scaling_invariance(self, rng):
        w = rng.normal(size=(5, 5))
        assert abs(effective_rank(17.5 * w) - effective_rank(w)) <= 1e-9

    def test_bounded_by_rank(self, rng):
        w = rng.normal(size=(8, 3)) @ rng.normal(size=(3, 8))
        er = effective_rank(w)
        assert 1.0 - 1e-9 <= er <= 3.0 + 1e-9


class TestRankEfficiency:
    def test_reported_pairs(self):
        # frozen reference pairs: (13.60, 16) and (24.65, 32)
        assert round(rank_efficiency(13.60, 16), 3) == 0.850
        assert round(rank_efficiency(24.65, 32), 3) == 0.770

    def test_exact_budget(self):
        assert rank_efficiency(16.0, 16) == 1.0

    def test_rejects_bad_target(self):
        with pytest.raises(DomainError):
            rank_efficiency(4.0, 0)


class TestGrassmannSimilarity:
    def test_identical_subspaces(self, rng):
        a = rng.normal(size=(3, 12))
        assert abs(grassmann_similarity(a, a) - 1.0) <= 1e-9

    def test_orthogonal_one_hot_spaces(self):
        a_main = np.zeros((2, 6))
        a_main[0, 0] = a_main[1, 1] = 1.0
        a_sub = np.zeros((1, 6))
        a_sub[0, 2] = 1.0
        assert abs(grassmann_similarity(a_main, a_sub)) <= 1e-12

    def test_projector_trace_oracle(self, rng):
        a_main = rng.normal(size=(4, 16))
        a_sub = rng.normal(size=(2, 16))
        p_main = a_main.T @ np.linalg.inv(a_main @ a_main.T) @ a_main
        p_sub = a_sub.T @ np.linalg.inv(a_sub @ a_sub.T) @ a_sub
        oracle = np.trace(p_main @ p_sub) / 2
        assert abs(grassmann_similarity(a_main, a_sub) - oracle) <= 1e-8

    def test_symmetric(self, rng):
        a = rng.normal(size=(3, 10))
        b = rng.normal(size=(5, 10))
        assert abs(grassmann_similarity(a, b) - grassmann_similarity(b, a)) <= 1e-12

    def test_row_mixing_invariance(self, rng):
        a = rng.normal(size=(4, 10))
        b = rng.normal(size=(3, 10))
        t = rng.normal(size=(4, 4)) + 4.0 * np.eye(4)
        assert abs(grassmann_similarity(t @ a, b) - grassmann_similarity(a, b)) <= 1e-8

    def test_range(self, rng):
        for _ in range(10):
            phi = grassmann_similarity(rng.normal(size=(3, 8)), rng.normal(size=(2, 8)))
            assert -1e-9 <= phi <= 1.0 + 1e-9

    def test_rejects_zero_and_mismatch(self, rng):
        with pytest.raises(DomainError):
            grassmann_similarity(np.zeros((2, 4)), rng.normal(size=(2, 4)))
        with pytest.raises(DomainError):
            grassmann_similarity(rng.normal(size=(2, 4)), rng.normal(size=(2, 5)))


class TestCosineStructure:
    def test_orthonormal_rows(self):
        res = cosine_structure(np.eye(4), "rows")
        npt.assert_allclose(res.heatmap, np.eye(4), atol=1e-12)
        assert res.mean_offdiag_abs == 0.0

    def test_duplicated_rows(self, rng):
        m = np.tile(rng.normal(size=(1, 7)), (3, 1))
        res = cosine_structure(m, "rows")
        npt.assert_allclose(res.heatmap, np.ones((3, 3)), atol=1e-12)
        assert abs(res.mean_offdiag_abs - 1.0) <= 1e-12

    def test_double_loop_oracle(self, rng):
        m = rng.normal(size=(8, 32))
        res = cosine_structure(m, "rows")
        for i in range(8):
            for j in range(8):
                expect = m[i] @ m[j] / (np.linalg.norm(m[i]) * np.linalg.norm(m[j]))
                if i == j:
                    expect = 1.0
                assert abs(res.heatmap[i, j] - expect) <= 1e-10
        npt.assert_allclose(res.heatmap, res.heatmap.T, atol=1e-12)

    def test_cols_axis_matches_transpose(self, rng):
        m = rng.normal(size=(5, 4))
        npt.assert_array_equal(cosine_structure(m, "cols").heatmap,
                               cosine_structure(m.T, "rows").heatmap)

    def test_zero_vector_convention(self, rng):
        m = rng.normal(size=(3, 5))
        m[1] = 0.0
        res = cosine_structure(m, "rows")
        assert res.zero_vectors == (1,)
        assert np.all(res.heatmap[1] == 0.0)
        assert np.all(res.heatmap[:, 1] == 0.0)

    def test_positive_scaling_invariance(self, rng):
        m = rng.normal(size=(4, 6))
        scaled = m * rng.uniform(0.1, 10.0, size=(4, 1))
        npt.assert_allclose(cosine_structure(scaled, "rows").heatmap,
                            cosine_structure(m, "rows").heatmap, atol=1e-12)

    def test_needs_two_vectors(self):
        with pytest.raises(DomainError):
            cosine_structure(np.ones((1, 5)), "rows")
        with pytest.raises(DomainError):
            cosine_structure(np.ones((5, 1)), "cols")


class TestColumnNormStats:
    def test_equal_norms(self):
        stats = column_norm_stats(np.ones((3, 6)), [0, 2])
        assert stats.avg_ratio == 1.0
        assert stats.max_ratio == 1.0

    def test_selected_scaled_twice(self, rng):
        a = np.ones((4, 5))
        a[:, [1, 3]] *= 2.0
        stats = column_norm_stats(a, [1, 3])
        assert abs(stats.avg_ratio - 2.0) <= 1e-12

    def test_linear_ratio_scaling(self, rng):
        a = np.abs(rng.normal(size=(3, 8))) + 0.1
        base = column_norm_stats(a, [0, 1]).avg_ratio
        a2 = a.copy()
        a2[:, [0, 1]] *= 3.0
        assert abs(column_norm_stats(a2, [0, 1]).avg_ratio - 3.0 * base) <= 1e-12

    def test_infinite_ratio_when_complement_zero(self):
        a = np.zeros((2, 4))
        a[:, 0] = 1.0
        assert math.isinf(column_norm_stats(a, [0]).avg_ratio)

    def test_validation(self, rng):
        a = rng.normal(size=(3, 4))
        with pytest.raises(DomainError):
            column_norm_stats(a, [])
        with pytest.raises(DomainError):
            column_norm_stats(a, [0, 0])
        with pytest.raises(DomainError):
            column_norm_stats(a, [4])
        with pytest.raises(DomainError):
            column_norm_stats(a, [0, 1, 2, 3])

    def test_aggregation(self):
        a = column_norm_stats(np.ones((2, 4)), [0])
        b = np.ones((2, 4))
        b[:, 1] *= 3.0
        b_stats = column_norm_stats(b, [1])
        agg = aggregate_norm_stats([a, b_stats])
        assert abs(agg.avg_ratio - 2.0) <= 1e-12
        assert abs(agg.max_ratio - 3.0) <= 1e-12


class TestFeatureDeltaPca:
    def test_zero_delta(self, rng):
        f = rng.normal(size=(12, 5))
        npt.assert_allclose(feature_delta_pca(f, f.copy(), 2), 0.0, atol=1e-20)

    def test_rank_one_delta_explains_everything(self, rng):
        f0 = rng.normal(size=(10, 6))
        delta = np.outer(rng.normal(size=10), rng.normal(size=6))
        res = pca_project(delta, 2)
        assert res.explained_variance[0] > 0.0
        assert res.explained_variance[1] <= 1e-18 * res.explained_variance[0]
        scores = feature_delta_pca(f0, f0 + delta, 2)
        npt.assert_allclose(scores, res.scores, atol=1e-10)

    def test_compositional_oracle(self, rng):
        f0 = rng.normal(size=(15, 7))
        f1 = rng.normal(size=(15, 7))
        npt.assert_array_equal(feature_delta_pca(f0, f1, 3),
                               pca_project(f1 - f0, 3).scores)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DomainError):
            feature_delta_pca(rng.normal(size=(4, 3)), rng.normal(size=(4, 4)), 1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 100.0))
def test_effective_rank_scale_invariance_property(seed, scale):
    w = np.random.default_rng(seed).normal(size=(4, 4))
    assert abs(effective_rank(scale * w) - effective_rank(w)) <= 1e-8


class TestLayerDiagnostics:
    def test_fresh_rrqr_dual(self, rng):
        layer = build_dual_layer(rng.normal(size=(12, 10)), 3, 2,
                                 InitStrategy.RRQR_DUAL, seed=0)
        rec = diagnose_layer("layer0", layer)
        assert abs(rec.effective_rank - 5.0) <= 1e-9
        assert abs(rec.rank_efficiency - 1.0) <= 1e-9
        assert abs(rec.phi) <= 1e-12
        assert rec.mean_offdiag_cos_a == 0.0
        assert math.isinf(rec.norm_stats.avg_ratio)

    def test_fresh_kaiming_has_no_erank_or_stats(self, rng):
        layer = build_dual_layer(rng.normal(size=(8, 8)), 3, 2,
                                 InitStrategy.KAIMING_UNIFORM, seed=0)
        rec = diagnose_layer("layer0", layer)
        assert rec.effective_rank is None
        assert rec.rank_efficiency is None
        assert rec.phi is not None
        assert rec.norm_stats is None

    def test_report_ordering_and_aggregates(self, rng):
        layers = {
            f"layer{i}": build_dual_layer(rng.normal(size=(10, 10)), 3, 2,
                                          InitStrategy.RRQR_DUAL, seed=i)
            for i in range(3)
        }
        records = [diagnose_layer(name, lay) for name, lay in reversed(layers.items())]
        report = build_report(records)
        assert [r.layer_id for r in report.layers] == ["layer0", "layer1", "layer2"]
        assert abs(report.mean_effective_rank - 5.0) <= 1e-9
        assert abs(report.mean_phi) <= 1e-12
        # inf ratios at init are excluded from the finite mean
        assert math.isinf(report.norm_stats.max_ratio)

    def test_single_adapter_has_no_phi(self, rng):
        layer = build_dual_layer(rng.normal(size=(8, 8)), 3, 0,
                                 InitStrategy.RRQR_MAIN_ONLY, seed=0)
        assert diagnose_layer("x", layer).phi is None
