import math

import numpy as np
import pytest

from writerid.encoding import (
    EmptyDocumentError,
    EncoderParams,
    encode_fisher,
    encode_supervector,
    encode_vlad,
    map_adapt_means,
    posteriors,
    supervector,
)
from writerid.gmm import GmmModel, KmeansModel
from writerid.retrieval import cosine_distance


def random_gmm(rng, k, d):
    w = rng.uniform(0.5, 2.0, size=k)
    return GmmModel(
        weights=w / w.sum(),
        means=rng.normal(scale=2.0, size=(k, d)),
        variances=rng.uniform(0.4, 3.0, size=(k, d)),
    )


def naive_posteriors(gmm, x, top_c=None, renormalize=True):
    """Direct-space density ratios plus explicit truncation loops."""
    t, d = x.shape
    k = gmm.n_components
    gamma = np.zeros((t, k))
    for ti in range(t):
        dens = np.zeros(k)
        for ki in range(k):
            quad = np.sum((x[ti] - gmm.means[ki]) ** 2 / gmm.variances[ki])
            norm = np.prod(2 * np.pi * gmm.variances[ki]) ** -0.5
            dens[ki] = gmm.weights[ki] * norm * math.exp(-0.5 * quad)
        gamma[ti] = dens / dens.sum()
        if top_c is not None and top_c < k:
            order = sorted(range(k), key=lambda j: (-gamma[ti, j], j))
            keep = set(order[:top_c])
            for j in range(k):
                if j not in keep:
                    gamma[ti, j] = 0.0
            if renormalize:
                gamma[ti] /= gamma[ti].sum()
    return gamma


def naive_map_adapt(gmm, x, gamma, tau):
    k, d = gmm.means.shape
    adapted = np.zeros((k, d))
    for ki in range(k):
        nk = sum(gamma[ti, ki] for ti in range(len(x)))
        if nk == 0:
            adapted[ki] = gmm.means[ki]
            continue
        mu_hat = np.zeros(d)
        for ti in range(len(x)):
            mu_hat += gamma[ti, ki] * x[ti]
        mu_hat /= nk
        alpha = nk / (nk + tau) if tau > 0 else 1.0
        adapted[ki] = alpha * mu_hat + (1 - alpha) * gmm.means[ki]
    return adapted


def naive_kl_supervector(gmm, adapted):
    out = []
    for ki in range(gmm.n_components):
        for di in range(gmm.dim):
            out.append(
                math.sqrt(gmm.weights[ki])
                * adapted[ki, di]
                / math.sqrt(gmm.variances[ki, di])
            )
    return np.array(out)


def naive_ssr_l2(v, power=0.5):
    out = np.array([math.copysign(abs(x) ** power, x) for x in v])
    n = np.linalg.norm(out)
    return out / n if n > 0 else out


def naive_vlad(centers, x):
    k, d = centers.shape
    blocks = np.zeros((k, d))
    for row in x:
        dists = [np.sum((row - centers[j]) ** 2) for j in range(k)]
        j = int(np.argmin(dists))
        blocks[j] += row - centers[j]
    return naive_ssr_l2(blocks.reshape(-1))


def naive_fisher(gmm, x):
    t = len(x)
    k, d = gmm.means.shape
    gamma = naive_posteriors(gmm, x, top_c=None)
    g_mu = np.zeros((k, d))
    g_var = np.zeros((k, d))
    for ki in range(k):
        std = np.sqrt(gmm.variances[ki])
        for ti in range(t):
            u = (x[ti] - gmm.means[ki]) / std
            g_mu[ki] += gamma[ti, ki] * u
            g_var[ki] += gamma[ti, ki] * (u**2 - 1)
        g_mu[ki] /= t * math.sqrt(gmm.weights[ki])
        g_var[ki] /= t * math.sqrt(2 * gmm.weights[ki])
    return naive_ssr_l2(np.concatenate([g_mu.reshape(-1), g_var.reshape(-1)]))


class TestPosteriors:
    def test_symmetric_point_splits_evenly(self):
        gmm = GmmModel(
            weights=np.array([0.5, 0.5]),
            means=np.array([[0.0], [2.0]]),
            variances=np.ones((2, 1)),
        )
        gamma = posteriors(gmm, np.array([[1.0]]))
        np.testing.assert_allclose(gamma, [[0.5, 0.5]], atol=1e-12)

    def test_point_on_mean_with_far_competitor(self):
        gmm = GmmModel(
            weights=np.array([0.5, 0.5]),
            means=np.array([[0.0], [10.0]]),
            variances=np.ones((2, 1)),
        )
        gamma = posteriors(gmm, np.array([[0.0]]))
        assert gamma[0, 0] > 1 - 1e-9

    def test_truncation_and_renormalization(self):
        rng = np.random.default_rng(0)
        gmm = random_gmm(rng, k=100, d=4)
        x = rng.normal(scale=2.0, size=(50, 4))
        gamma = posteriors(gmm, x, top_c=10, renormalize=True)
        assert ((gamma > 0).sum(axis=1) <= 10).all()
        np.testing.assert_allclose(gamma.sum(axis=1), 1.0, atol=1e-9)
        bare = posteriors(gmm, x, top_c=10, renormalize=False)
        assert (bare.sum(axis=1) <= 1 + 1e-9).all()

    def test_untruncated_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        gmm = random_gmm(rng, k=7, d=3)
        x = rng.normal(size=(30, 3))
        gamma = posteriors(gmm, x, top_c=None)
        np.testing.assert_allclose(gamma.sum(axis=1), 1.0, atol=1e-9)

    def test_tie_keeps_lower_component_index(self):
        # two identical components: the posterior ties at 0.5 exactly
        gmm = GmmModel(
            weights=np.array([0.5, 0.5]),
            means=np.zeros((2, 1)),
            variances=np.ones((2, 1)),
        )
        gamma = posteriors(gmm, np.array([[0.3]]), top_c=1, renormalize=True)
        np.testing.assert_allclose(gamma, [[1.0, 0.0]], atol=1e-12)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(2)
        gmm = random_gmm(rng, k=6, d=3)
        x = rng.normal(size=(25, 3))
        for top_c, renorm in ((None, True), (3, True), (3, False)):
            got = posteriors(gmm, x, top_c=top_c, renormalize=renorm)
            want = naive_posteriors(gmm, x, top_c=top_c, renormalize=renorm)
            np.testing.assert_allclose(got, want, atol=1e-10)


class TestMapAdaptation:
    def test_alpha_half_when_count_equals_tau(self):
        gmm = GmmModel(
            weights=np.array([1.0]),
            means=np.array([[2.0, 2.0]]),
            variances=np.ones((1, 2)),
        )
        # 68 descriptors, hard-assigned: n_k = 68 = tau
        x = np.full((68, 2), 6.0)
        gamma = np.ones((68, 1))
        adapted = map_adapt_means(gmm, x, gamma, tau=68.0)
        np.testing.assert_allclose(adapted, [[4.0, 4.0]], atol=1e-12)

    def test_zero_count_keeps_background_mean(self):
        gmm = GmmModel(
            weights=np.array([0.5, 0.5]),
            means=np.array([[0.0], [7.0]]),
            variances=np.ones((2, 1)),
        )
        x = np.array([[0.1], [0.2]])
        gamma = np.array([[1.0, 0.0], [1.0, 0.0]])
        adapted = map_adapt_means(gmm, x, gamma, tau=10.0)
        assert adapted[1, 0] == 7.0

    def test_tau_zero_gives_sample_mean(self):
        # 3-point instance, hand-computed: mean of (1, 2, 6) = 3
        gmm = GmmModel(
            weights=np.array([1.0]),
            means=np.array([[100.0]]),
            variances=np.ones((1, 1)),
        )
        x = np.array([[1.0], [2.0], [6.0]])
        gamma = np.ones((3, 1))
        adapted = map_adapt_means(gmm, x, gamma, tau=0.0)
        np.testing.assert_allclose(adapted, [[3.0]], atol=1e-12)

    def test_convex_combination_and_tau_limit(self):
        rng = np.random.default_rng(3)
        gmm = random_gmm(rng, k=5, d=4)
        x = rng.normal(size=(60, 4))
        gamma = posteriors(gmm, x, top_c=None)
        nk = gamma.sum(axis=0)
        mu_hat = (gamma.T @ x) / nk[:, None]
        adapted = map_adapt_means(gmm, x, gamma, tau=68.0)
        alpha = nk / (nk + 68.0)
        assert ((alpha >= 0) & (alpha < 1)).all()
        # adapted mean lies on the segment [background, document mean]
        np.testing.assert_allclose(
            adapted, alpha[:, None] * mu_hat + (1 - alpha[:, None]) * gmm.means, atol=1e-10
        )
        far = map_adapt_means(gmm, x, gamma, tau=1e12)
        assert np.abs(far - gmm.means).max() < 1e-6

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(4)
        gmm = random_gmm(rng, k=4, d=3)
        x = rng.normal(size=(30, 3))
        gamma = posteriors(gmm, x, top_c=2)
        np.testing.assert_allclose(
            map_adapt_means(gmm, x, gamma, tau=17.0),
            naive_map_adapt(gmm, x, gamma, tau=17.0),
            atol=1e-10,
        )


class TestSupervector:
    def test_kl_identity_case(self):
        gmm = GmmModel(
            weights=np.array([1.0]),
            means=np.zeros((1, 3)),
            variances=np.ones((1, 3)),
        )
        adapted = np.array([[1.5, -2.0, 0.25]])
        gd = supervector(adapted, gmm, EncoderParams(normalization="kl"))
        np.testing.assert_allclose(gd.vector, adapted.ravel(), atol=1e-9)

    def test_kl_hand_case(self):
        # sqrt(w) / sqrt(var) * mu = sqrt(0.25) * 4^(-1/2) * 8 = 2
        gmm = GmmModel(
            weights=np.array([0.25, 0.75]),
            means=np.zeros((2, 1)),
            variances=np.array([[4.0], [1.0]]),
        )
        adapted = np.array([[8.0], [0.0]])
        gd = supervector(adapted, gmm, EncoderParams(normalization="kl"))
        np.testing.assert_allclose(gd.vector, [2.0, 0.0], atol=1e-9)

    def test_ssr_hand_case(self):
        gmm = GmmModel(
            weights=np.array([1.0]),
            means=np.zeros((1, 2)),
            variances=np.ones((1, 2)),
        )
        adapted = np.array([[4.0, -9.0]])
        gd = supervector(adapted, gmm, EncoderParams(normalization="ssr_l2"))
        np.testing.assert_allclose(gd.vector, np.array([2.0, -3.0]) / np.sqrt(13), atol=1e-12)

    def test_length_is_k_times_d(self):
        rng = np.random.default_rng(5)
        gmm = random_gmm(rng, k=100, d=64)
        adapted = rng.normal(size=(100, 64))
        gd = supervector(adapted, gmm)
        assert gd.vector.shape == (6400,)

    def test_kl_preserves_cosine_ranking_for_uniform_gmm(self):
        # equal weights and equal variances make the KL scaling a single
        # positive scalar, so cosine distances match plain concatenation
        rng = np.random.default_rng(6)
        k, d = 5, 3
        gmm = GmmModel(
            weights=np.full(k, 1 / k),
            means=rng.normal(size=(k, d)),
            variances=np.full((k, d), 1.7),
        )
        adapted = [rng.normal(size=(k, d)) for _ in range(4)]
        kl = [supervector(a, gmm, EncoderParams(normalization="kl")).vector for a in adapted]
        plain = [a.reshape(-1) for a in adapted]
        for i in range(4):
            for j in range(4):
                assert cosine_distance(kl[i], kl[j]) == pytest.approx(
                    cosine_distance(plain[i], plain[j]), abs=1e-9
                )

    def test_full_encoding_matches_naive_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            k = int(rng.integers(2, 9))
            d = int(rng.integers(2, 17))
            t = int(rng.integers(5, 201))
            gmm = random_gmm(rng, k, d)
            x = rng.normal(size=(t, d))
            params = EncoderParams(tau=68.0, top_c=min(10, k), normalization="kl")
            got = encode_supervector(gmm, x, params).vector
            gamma = naive_posteriors(gmm, x, top_c=min(10, k), renormalize=True)
            adapted = naive_map_adapt(gmm, x, gamma, tau=68.0)
            np.testing.assert_allclose(got, naive_kl_supervector(gmm, adapted), atol=1e-8)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(8)
        gmm = random_gmm(rng, k=6, d=5)
        x = rng.normal(size=(80, 5))
        base = encode_supervector(gmm, x).vector
        shuffled = encode_supervector(gmm, x[rng.permutation(80)]).vector
        np.testing.assert_allclose(base, shuffled, atol=1e-9)

    def test_empty_document_flagged(self):
        gmm = random_gmm(np.random.default_rng(9), k=3, d=2)
        with pytest.raises(EmptyDocumentError):
            encode_supervector(gmm, np.empty((0, 2)))


class TestVlad:
    def test_descriptor_on_center_contributes_zero(self):
        centers = np.array([[0.0, 0.0], [5.0, 5.0]])
        gd = encode_vlad(KmeansModel(centers=centers), np.array([[0.0, 0.0]]))
        np.testing.assert_array_equal(gd.vector, 0.0)

    def test_symmetric_pair_cancels(self):
        centers = np.array([[0.0, 0.0], [9.0, 9.0]])
        x = np.array([[1.0, 0.0], [-1.0, 0.0]])
        gd = encode_vlad(KmeansModel(centers=centers), x)
        np.testing.assert_allclose(gd.vector, 0.0, atol=1e-12)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(5):
            k = int(rng.integers(2, 9))
            d = int(rng.integers(2, 17))
            t = int(rng.integers(4, 201))
            centers = rng.normal(size=(k, d))
            x = rng.normal(size=(t, d))
            got = encode_vlad(KmeansModel(centers=centers), x).vector
            np.testing.assert_allclose(got, naive_vlad(centers, x), atol=1e-8)

    def test_assignment_tie_lower_index(self):
        centers = np.array([[1.0, 0.0], [-1.0, 0.0]])
        gd = encode_vlad(KmeansModel(centers=centers), np.array([[0.0, 0.0]]))
        # equidistant: assigned to center 0, residual (-1, 0) normalized
        np.testing.assert_allclose(gd.vector, [-1.0, 0.0, 0.0, 0.0], atol=1e-12)

    def test_empty_document_flagged(self):
        with pytest.raises(EmptyDocumentError):
            encode_vlad(KmeansModel(centers=np.zeros((2, 2))), np.empty((0, 2)))


class TestFisher:
    def test_descriptors_on_mean_of_single_component(self):
        # one component, 1-D: mean block 0; variance block
        # T * gamma * (-1) / (T sqrt(2 w)) = -1/sqrt(2), then SSR+L2 -> -1
        gmm = GmmModel(
            weights=np.array([1.0]),
            means=np.array([[3.0]]),
            variances=np.array([[2.0]]),
        )
        x = np.full((7, 1), 3.0)
        gd = encode_fisher(gmm, x)
        np.testing.assert_allclose(gd.vector, [0.0, -1.0], atol=1e-12)

    def test_output_length(self):
        rng = np.random.default_rng(11)
        gmm = random_gmm(rng, k=4, d=6)
        gd = encode_fisher(gmm, rng.normal(size=(20, 6)))
        assert gd.vector.shape == (2 * 4 * 6,)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            k = int(rng.integers(2, 9))
            d = int(rng.integers(2, 17))
            t = int(rng.integers(4, 201))
            gmm = random_gmm(rng, k, d)
            x = rng.normal(size=(t, d))
            got = encode_fisher(gmm, x).vector
            np.testing.assert_allclose(got, naive_fisher(gmm, x), atol=1e-8)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(13)
        gmm = random_gmm(rng, k=5, d=4)
        x = rng.normal(size=(60, 4))
        a = encode_fisher(gmm, x).vector
        b = encode_fisher(gmm, x[rng.permutation(60)]).vector
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_empty_document_flagged(self):
        with pytest.raises(EmptyDocumentError):
            encode_fisher(random_gmm(np.random.default_rng(14), 2, 2), np.empty((0, 2)))


def test_encoder_params_validation():
    with pytest.raises(ValueError):
        EncoderParams(tau=-1.0)
    with pytest.raises(ValueError):
        EncoderParams(top_c=0)
    with pytest.raises(ValueError):
        EncoderParams(normalization="l1")
