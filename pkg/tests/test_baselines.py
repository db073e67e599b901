"""Mahalanobis family and probes against solve-based and FD oracles."""

import numpy as np
import pytest

from alien_ue.alien import TrainConfig
from alien_ue.baselines import (
    GaussianStats,
    ProbeHead,
    RdeConfig,
    attention_batch_grads,
    attention_probe_scores,
    attention_weights,
    fit_attention_probe,
    fit_gaussian_stats,
    fit_linear_probe,
    fit_stats_arrays,
    load_gaussian_stats,
    load_probe,
    md_score,
    md_scores,
    mdm_score,
    mdm_scores,
    mdr_score,
    mdr_scores,
    probe_scores,
    rde_fit,
    save_gaussian_stats,
    save_probe,
)
from alien_ue.bundle import EmbeddingBundle, TokenSequenceBundle
from alien_ue.errors import DegenerateDataError, ValidationError
from alien_ue.metrics import roc_auc, spearman
from conftest import random_bundle


def manual_stats(class_means, covariance, bg_mean=None, bg_cov=None):
    """Build GaussianStats directly from chosen matrices."""
    cm = np.asarray(class_means, dtype=np.float64)
    cov = np.asarray(covariance, dtype=np.float64)
    bgm = cm.mean(axis=0) if bg_mean is None else np.asarray(bg_mean, dtype=np.float64)
    bgc = cov if bg_cov is None else np.asarray(bg_cov, dtype=np.float64)
    return GaussianStats(
        class_means=cm, covariance=cov, precision=np.linalg.inv(cov),
        background_mean=bgm, background_covariance=bgc,
        background_precision=np.linalg.inv(bgc), ridge=0.0,
    )


def cluster_bundle(rng, n=300, d=5, c=3, spread=3.0):
    means = spread * rng.standard_normal((c, d))
    y = rng.integers(0, c, size=n)
    x = means[y] + rng.standard_normal((n, d))
    w = rng.standard_normal((c, d)).astype(np.float32)
    return EmbeddingBundle(
        features=x.astype(np.float32), gold_labels=y.astype(np.uint32),
        head_weight=w, head_bias=np.zeros(c, dtype=np.float32), split_role="train",
    ).validate()


class TestGaussianFit:
    def test_degenerate_repeated_points_still_invertible(self):
        x = np.array([[1.0, 2.0]] * 3 + [[4.0, -1.0]] * 3)
        y = np.array([0, 0, 0, 1, 1, 1])
        stats = fit_stats_arrays(x, y, 2, ridge=1e-3)
        assert np.all(np.isfinite(stats.precision))
        # zero pooled covariance falls back to plain ridge*I
        np.testing.assert_allclose(stats.covariance, 1e-3 * np.eye(2))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        b = cluster_bundle(rng)
        perm = rng.permutation(b.n)
        s1 = fit_gaussian_stats(b)
        s2 = fit_stats_arrays(b.features.astype(np.float64)[perm], b.gold_labels[perm], b.c)
        np.testing.assert_allclose(s1.class_means, s2.class_means, rtol=1e-10)
        np.testing.assert_allclose(s1.covariance, s2.covariance, rtol=1e-9)

    def test_monte_carlo_single_class(self):
        rng = np.random.default_rng(1)
        n = 4000
        x = rng.standard_normal((n, 3))
        stats = fit_stats_arrays(x, np.zeros(n, dtype=int), 1, ridge=0.0)
        assert np.abs(stats.class_means[0]).max() < 3.0 / np.sqrt(n)
        np.testing.assert_allclose(stats.covariance, np.eye(3), atol=0.15)

    def test_small_class_rejected(self):
        x = np.zeros((3, 2))
        with pytest.raises(DegenerateDataError, match="class 1"):
            fit_stats_arrays(x, np.array([0, 0, 1]), 2)

    def test_precision_times_covariance_is_identity(self):
        rng = np.random.default_rng(2)
        stats = fit_gaussian_stats(cluster_bundle(rng))
        np.testing.assert_allclose(stats.precision @ stats.covariance, np.eye(stats.d), atol=1e-6)
        np.testing.assert_allclose(stats.covariance, stats.covariance.T, atol=1e-9)


class TestMdScores:
    def test_identity_covariance_min_distance(self):
        stats = manual_stats([[0.0, 0.0], [10.0, 0.0]], np.eye(2))
        assert md_score(stats, [3.0, 4.0]) == pytest.approx(25.0, abs=1e-10)

    def test_zero_at_centroid(self):
        rng = np.random.default_rng(3)
        stats = fit_gaussian_stats(cluster_bundle(rng))
        for mu in stats.class_means:
            assert md_score(stats, mu) == pytest.approx(0.0, abs=1e-9)

    def test_solve_oracle(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((4, 4))
        cov = a @ a.T + np.eye(4)
        stats = manual_stats(rng.standard_normal((3, 4)), cov)
        for _ in range(20):
            h = rng.standard_normal(4)
            want = min(
                float((h - mu) @ np.linalg.solve(cov, h - mu)) for mu in stats.class_means
            )
            assert md_score(stats, h) == pytest.approx(want, rel=1e-8)

    def test_nonnegative(self):
        rng = np.random.default_rng(5)
        stats = fit_gaussian_stats(cluster_bundle(rng))
        scores = md_scores(stats, rng.standard_normal((200, stats.d)) * 10)
        assert scores.min() >= 0.0
        assert mdm_scores(stats, rng.standard_normal((200, stats.d)) * 10).min() >= 0.0

    def test_affine_invariance(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((400, 4))
        y = rng.integers(0, 2, size=400)
        q = rng.standard_normal((5, 4))
        amap = rng.standard_normal((4, 4)) + 0.5 * np.eye(4)
        shift = rng.standard_normal(4)
        s1 = fit_stats_arrays(x, y, 2, ridge=0.0)
        s2 = fit_stats_arrays(x @ amap.T + shift, y, 2, ridge=0.0)
        d1 = md_scores(s1, q)
        d2 = md_scores(s2, q @ amap.T + shift)
        np.testing.assert_allclose(d2, d1, rtol=1e-6)

    def test_dimension_mismatch(self):
        stats = manual_stats([[0.0, 0.0]], np.eye(2))
        with pytest.raises(ValidationError):
            md_scores(stats, np.zeros((3, 5)))


class TestMdrMdm:
    def test_background_equal_to_class_cancels(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((500, 3))
        stats = fit_stats_arrays(x, np.zeros(500, dtype=int), 1, ridge=0.0)
        for _ in range(10):
            h = rng.standard_normal(3) * 4
            assert mdr_score(stats, h) == pytest.approx(0.0, abs=1e-9)

    def test_centroid_far_from_global_mean_is_negative(self):
        stats = manual_stats([[0.0, 0.0], [10.0, 0.0]], np.eye(2), bg_mean=[5.0, 0.0])
        assert mdr_score(stats, [10.0, 0.0]) < 0.0

    def test_termwise_oracle(self):
        rng = np.random.default_rng(8)
        stats = fit_gaussian_stats(cluster_bundle(rng))
        h = rng.standard_normal((30, stats.d))
        np.testing.assert_allclose(
            mdr_scores(stats, h), md_scores(stats, h) - mdm_scores(stats, h), rtol=1e-12
        )

    def test_mdm_zero_at_global_mean(self):
        rng = np.random.default_rng(9)
        stats = fit_gaussian_stats(cluster_bundle(rng))
        assert mdm_score(stats, stats.background_mean) == pytest.approx(0.0, abs=1e-9)

    def test_mdm_identity_covariance(self):
        stats = manual_stats([[0.0, 0.0]], np.eye(2), bg_mean=[1.0, 1.0], bg_cov=np.eye(2))
        assert mdm_score(stats, [4.0, 5.0]) == pytest.approx(9.0 + 16.0, abs=1e-10)


class TestRde:
    def test_noop_robustification_preserves_ranking(self):
        rng = np.random.default_rng(10)
        b = cluster_bundle(rng, n=400, d=5)
        scorer = rde_fit(b, RdeConfig(pca_components=5, trim_fraction=0.0), ridge=0.0)
        stats = fit_gaussian_stats(b, ridge=0.0)
        q = rng.standard_normal((100, 5)) * 3
        assert spearman(scorer.scores(q), md_scores(stats, q)) == pytest.approx(1.0, abs=1e-12)

    def test_contamination_oracle(self):
        rng = np.random.default_rng(11)
        n, d = 600, 4
        y = rng.integers(0, 2, size=n)
        x = 2.0 * np.stack([y, 1 - y], axis=1) @ np.ones((2, d)) * 0 + rng.standard_normal((n, d))
        clean_trace = np.trace(fit_stats_arrays(x, y, 2).covariance)
        x_bad = x.copy()
        bad = rng.choice(n, size=n // 20, replace=False)
        x_bad[bad] += 100.0
        w = np.zeros((2, d), dtype=np.float32)
        b = EmbeddingBundle(features=x_bad.astype(np.float32), gold_labels=y.astype(np.uint32),
                            head_weight=w, head_bias=np.zeros(2, dtype=np.float32),
                            split_role="train").validate()
        untrimmed_trace = np.trace(fit_gaussian_stats(b).covariance)
        scorer = rde_fit(b, RdeConfig(pca_components=d, trim_fraction=0.1))
        trimmed_trace = np.trace(scorer.stats.covariance)
        assert untrimmed_trace > 10.0 * clean_trace
        assert trimmed_trace < 2.0 * clean_trace

    def test_deterministic(self):
        rng = np.random.default_rng(12)
        b = cluster_bundle(rng, n=300)
        s1 = rde_fit(b, RdeConfig(pca_components=3))
        s2 = rde_fit(b, RdeConfig(pca_components=3))
        q = np.random.default_rng(1).standard_normal((20, 5))
        np.testing.assert_array_equal(s1.scores(q), s2.scores(q))

    def test_component_bounds(self):
        rng = np.random.default_rng(13)
        b = cluster_bundle(rng, n=100, d=4)
        with pytest.raises(ValidationError, match="pca_components"):
            rde_fit(b, RdeConfig(pca_components=9))
        with pytest.raises(ValidationError, match="n >= 2"):
            rde_fit(cluster_bundle(rng, n=6, d=4), RdeConfig(pca_components=4))


class TestLinearProbe:
    def test_separable_toy_converges(self):
        # Two well-separated blobs along a random direction: 20 epochs at
        # lr 1e-3 must drive the training BCE below 0.05.
        rng = np.random.default_rng(14)
        n, d = 2000, 6
        direction = rng.standard_normal(d)
        direction /= np.linalg.norm(direction)
        sign = rng.integers(0, 2, size=n) * 2 - 1
        x = np.outer(sign * 8.0, direction) + rng.standard_normal((n, d))
        e = (sign > 0).astype(np.float64)
        probe = fit_linear_probe(x, e, TrainConfig(seed=0, learning_rate=1e-3))
        assert probe.history[-1] < 0.05

    def test_null_signal_auc_near_half(self):
        rng = np.random.default_rng(15)
        aucs = []
        for seed in range(20):
            x = rng.standard_normal((300, 4))
            e = rng.integers(0, 2, size=300).astype(np.float64)
            x_h = rng.standard_normal((300, 4))
            e_h = rng.integers(0, 2, size=300).astype(np.float64)
            probe = fit_linear_probe(x, e, TrainConfig(seed=seed, learning_rate=1e-3, epochs=5))
            aucs.append(roc_auc(probe_scores(probe, x_h), e_h))
        assert 0.45 <= float(np.mean(aucs)) <= 0.55

    def test_deterministic(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal((100, 3))
        e = rng.integers(0, 2, size=100).astype(np.float64)
        p1 = fit_linear_probe(x, e, TrainConfig(seed=4))
        p2 = fit_linear_probe(x, e, TrainConfig(seed=4))
        assert np.array_equal(p1.weight, p2.weight) and p1.bias == p2.bias

    def test_scores_in_open_unit_interval(self):
        rng = np.random.default_rng(17)
        x = rng.standard_normal((50, 3))
        e = rng.integers(0, 2, size=50).astype(np.float64)
        probe = fit_linear_probe(x, e, TrainConfig(seed=0, epochs=2))
        s = probe_scores(probe, x * 100)
        assert np.all(s > 0.0) and np.all(s < 1.0)

    def test_single_class_rejected(self):
        with pytest.raises(DegenerateDataError):
            fit_linear_probe(np.zeros((10, 2)), np.zeros(10), TrainConfig(seed=0))


def length_one_seq_bundle(x, labels, logits):
    n, d = x.shape
    return TokenSequenceBundle(
        features=x.astype(np.float32), lengths=np.ones(n, dtype=np.uint32),
        gold_labels=labels, head_weight=np.zeros((2, d), dtype=np.float32),
        head_bias=np.zeros(2, dtype=np.float32), logits=logits, split_role="train",
    ).validate()


class TestAttentionProbe:
    def test_length_one_equals_linear_probe(self):
        rng = np.random.default_rng(18)
        n, d = 120, 4
        x = rng.standard_normal((n, d))
        e = rng.integers(0, 2, size=n).astype(np.float64)
        seq = length_one_seq_bundle(x, e.astype(np.uint32), None)
        cfg = TrainConfig(seed=3, epochs=4)
        linear = fit_linear_probe(x, e, cfg)
        attn = fit_attention_probe(seq, e, cfg)
        # Identical trajectories up to gradient-summation order (BLAS matvec
        # vs per-sequence loop); the query never receives gradient at L=1.
        np.testing.assert_allclose(attn.weight, linear.weight, rtol=0, atol=1e-8)
        assert attn.bias == pytest.approx(linear.bias, abs=1e-8)
        assert np.array_equal(attn.query, np.zeros(d))

    def test_zero_query_uniform_weights(self):
        rng = np.random.default_rng(19)
        probe = ProbeHead(weight=rng.standard_normal(3), bias=0.0, query=np.zeros(3))
        alphas = attention_weights(probe, rng.standard_normal((7, 3)))
        np.testing.assert_allclose(alphas, 1.0 / 7.0, atol=1e-12)
        assert abs(alphas.sum() - 1.0) < 1e-12

    def test_attention_weights_normalized(self):
        rng = np.random.default_rng(20)
        probe = ProbeHead(weight=rng.standard_normal(3), bias=0.0,
                          query=rng.standard_normal(3))
        for length in (1, 2, 9):
            alphas = attention_weights(probe, rng.standard_normal((length, 3)))
            assert alphas.min() >= 0.0
            assert abs(alphas.sum() - 1.0) < 1e-12

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(21)
        d = 4
        seqs = [rng.standard_normal((rng.integers(1, 6), d)) for _ in range(12)]
        e = rng.integers(0, 2, size=12).astype(np.float64)
        w = rng.standard_normal(d)
        b = float(rng.standard_normal())
        q = rng.standard_normal(d)
        _, dw, db, dq = attention_batch_grads(seqs, e, w, b, q)
        h = 1e-5

        def loss(wv, bv, qv):
            return attention_batch_grads(seqs, e, wv, bv, qv)[0]

        for j in range(d):
            qp, qm = q.copy(), q.copy()
            qp[j] += h
            qm[j] -= h
            fd = (loss(w, b, qp) - loss(w, b, qm)) / (2 * h)
            assert fd == pytest.approx(dq[j], rel=1e-4, abs=1e-9)
            wp, wm = w.copy(), w.copy()
            wp[j] += h
            wm[j] -= h
            fd = (loss(wp, b, q) - loss(wm, b, q)) / (2 * h)
            assert fd == pytest.approx(dw[j], rel=1e-4, abs=1e-9)
        fd = (loss(w, b + h, q) - loss(w, b - h, q)) / (2 * h)
        assert fd == pytest.approx(db, rel=1e-4, abs=1e-9)

    def test_scores_shape_and_range(self):
        rng = np.random.default_rng(22)
        lengths = np.array([2, 5, 1, 3], dtype=np.uint32)
        feats = rng.standard_normal((int(lengths.sum()), 3)).astype(np.float32)
        seq = TokenSequenceBundle(
            features=feats, lengths=lengths,
            gold_labels=np.array([0, 1, 1, 0], dtype=np.uint32),
            head_weight=np.zeros((2, 3), dtype=np.float32),
            head_bias=np.zeros(2, dtype=np.float32), split_role="test",
        ).validate()
        probe = fit_attention_probe(seq, np.array([1, 0, 1, 0.0]),
                                    TrainConfig(seed=0, epochs=2))
        s = attention_probe_scores(probe, seq)
        assert s.shape == (4,)
        assert np.all((s > 0) & (s < 1))


class TestSerialization:
    def test_probe_round_trip(self, tmp_path):
        rng = np.random.default_rng(23)
        probe = ProbeHead(weight=rng.standard_normal(5), bias=0.25,
                          query=rng.standard_normal(5), depth_tag="mid")
        save_probe(probe, tmp_path / "p")
        back = load_probe(tmp_path / "p")
        assert back.kind == "attention_pooling"
        assert back.depth_tag == "mid"
        np.testing.assert_allclose(back.weight, probe.weight, atol=1e-6)
        np.testing.assert_allclose(back.query, probe.query, atol=1e-6)

    def test_stats_round_trip(self, tmp_path):
        rng = np.random.default_rng(24)
        stats = fit_gaussian_stats(cluster_bundle(rng))
        save_gaussian_stats(stats, tmp_path / "s")
        back = load_gaussian_stats(tmp_path / "s")
        q = rng.standard_normal((10, stats.d))
        np.testing.assert_allclose(md_scores(back, q), md_scores(stats, q), rtol=1e-4)
