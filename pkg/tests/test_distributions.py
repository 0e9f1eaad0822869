import math

import numpy as np
import pytest
from scipy import stats

from mixvi import tensor_ad as ad
from mixvi.distributions import (
    BernoulliLikelihood,
    CategoricalLikelihood,
    DiagonalGaussian,
    FullCovGaussian,
    Mixture,
    StandardNormal,
    TrainableMixturePrior,
    ancestral_expectation,
    mixture_sample_ancestral,
    mixture_sample_batch,
    rng_stream,
    sample_reparameterized,
    stratified_expectation,
    tril_from_raw,
)
from mixvi.tensor_ad import Tape, Variable

from conftest import assert_grad_close, numeric_grad


def two_comp(mu=1.0, sd=1.0, weights=(0.5, 0.5)):
    logits = np.log(np.asarray(weights))
    return Mixture(logits, DiagonalGaussian([[-mu], [mu]], np.full((2, 1), math.log(sd))))


def test_standard_normal_log_prob_at_origin():
    assert StandardNormal(2).log_prob(np.zeros(2)).value == pytest.approx(-math.log(2 * math.pi), abs=1e-14)


def test_zero_scale_limit_returns_mean():
    g = DiagonalGaussian([1.5, -2.0], [-80.0, -80.0])
    z = sample_reparameterized(g, np.random.default_rng(0))
    np.testing.assert_allclose(z.value, [1.5, -2.0], atol=1e-30)


def test_sample_moments():
    g = DiagonalGaussian([0.0], [0.0])
    z = sample_reparameterized(g, np.random.default_rng(1), (100_000,)).value[:, 0]
    assert abs(z.mean()) < 3 / math.sqrt(1e5)
    assert abs(z.var() - 1.0) < 0.05


def test_reparameterized_gradient_wrt_mean_is_identity():
    mean = Variable([0.3, -0.7], requires_grad=True)
    g = DiagonalGaussian(mean, [0.1, 0.2])
    with Tape() as tape:
        z = sample_reparameterized(g, np.random.default_rng(2))
        grads = tape.backward(z[0], [mean])
    np.testing.assert_array_equal(grads[mean], [1.0, 0.0])


def test_mc_gradient_of_mean_matches_one():
    mean = Variable([0.4], requires_grad=True)
    g = DiagonalGaussian(mean, [0.0])
    per_sample = []
    rng = np.random.default_rng(3)
    for _ in range(200):
        with Tape() as tape:
            z = sample_reparameterized(g, rng, (8,))
            per_sample.append(tape.backward(ad.mean(z), [mean])[mean][0])
    per_sample = np.array(per_sample)
    se = per_sample.std(ddof=1) / math.sqrt(len(per_sample)) + 1e-12
    assert abs(per_sample.mean() - 1.0) <= 3 * se + 1e-12


def test_full_cov_log_prob_matches_dense_oracle(rng):
    A = rng.normal(size=(3, 3))
    cov = A @ A.T + 0.5 * np.eye(3)
    L = np.linalg.cholesky(cov)
    mu = rng.normal(size=3)
    z = rng.normal(size=(5, 3))
    g = FullCovGaussian(mu, L)
    diff = z - mu
    dense = -0.5 * np.einsum("ni,ij,nj->n", diff, np.linalg.inv(cov), diff)
    dense -= 0.5 * math.log(np.linalg.det(cov)) + 1.5 * math.log(2 * math.pi)
    np.testing.assert_allclose(g.log_prob(z).value, dense, atol=1e-10)
    np.testing.assert_allclose(g.log_prob(z).value, stats.multivariate_normal(mu, cov).logpdf(z), atol=1e-10)


def test_tril_from_raw_positive_diagonal(rng):
    raw = rng.normal(size=(4, 6)) * 3
    L = tril_from_raw(Variable(raw), 3).value
    assert np.all(np.diagonal(L, axis1=-2, axis2=-1) > 0)
    assert np.all(np.triu(L, 1) == 0)


def test_full_cov_sample_covariance(rng):
    L = np.array([[1.0, 0.0], [0.8, 0.5]])
    g = FullCovGaussian(np.zeros(2), L)
    z = sample_reparameterized(g, rng, (100_000,)).value
    np.testing.assert_allclose(np.cov(z.T), L @ L.T, atol=0.02)


def test_degenerate_mixture_equals_component():
    comps = DiagonalGaussian([[0.3, -1.0], [2.0, 2.0]], [[0.1, -0.2], [0.0, 0.0]])
    m = Mixture([0.0, -np.inf], comps)
    z = np.array([[0.1, 0.2], [1.0, -1.0]])
    single = DiagonalGaussian([0.3, -1.0], [0.1, -0.2]).log_prob(z).value
    np.testing.assert_allclose(m.log_prob(z, sample_axes=1).value, single, atol=1e-14)


def test_mixture_log_prob_is_logsumexp_over_components(rng):
    means = rng.normal(size=(3, 2))
    ls = rng.normal(scale=0.3, size=(3, 2))
    logits = rng.normal(size=3)
    m = Mixture(logits, DiagonalGaussian(means, ls))
    z = rng.normal(size=(7, 2))
    comp = np.stack([DiagonalGaussian(means[k], ls[k]).log_prob(z).value for k in range(3)], axis=-1)
    la = logits - np.log(np.exp(logits).sum())
    ref = np.log(np.exp(la + comp).sum(-1))
    np.testing.assert_allclose(m.log_prob(z, sample_axes=1).value, ref, atol=1e-12)
    np.testing.assert_allclose(m.composed_log_prob(z, sample_axes=1).value, ref, atol=1e-12)


def test_fused_mixture_density_gradients_match_composed(rng):
    B, K, T, d = 3, 2, 4, 2
    leaves = [
        Variable(rng.normal(size=(B, K, T, d)), requires_grad=True),
        Variable(rng.normal(size=(B, K)), requires_grad=True),
        Variable(rng.normal(size=(B, K, d)), requires_grad=True),
        Variable(rng.normal(scale=0.3, size=(B, K, d)), requires_grad=True),
    ]
    z, logits, mean, ls = leaves

    def run(method):
        with Tape() as tape:
            m = Mixture(logits, DiagonalGaussian(mean, ls))
            out = ad.sum(getattr(m, method)(z, sample_axes=2))
            g = tape.backward(out, leaves)
        return out.value, [g[v] for v in leaves]

    v1, g1 = run("log_prob")
    v2, g2 = run("composed_log_prob")
    assert v1 == pytest.approx(v2, abs=1e-10)
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_stratified_expectation_of_constant_is_one(rng):
    m = two_comp(weights=(0.2, 0.8))
    val = stratified_expectation(m, lambda z: ad.sum(z * 0.0, axis=-1) + 1.0, 7, rng)
    assert val.value == pytest.approx(1.0, abs=1e-15)


def test_stratified_first_and_second_moments():
    m = two_comp()
    rng = np.random.default_rng(5)
    first = stratified_expectation(m, lambda z: z[..., 0], 20_000, rng).value
    second = stratified_expectation(m, lambda z: ad.square(z[..., 0]), 20_000, rng).value
    # per-component sd 1: first moment SE ~ 1/sqrt(4e4), second moment SE ~ sqrt(6/4e4)
    assert abs(first) < 4 * math.sqrt(1 / 40_000)
    assert abs(second - 2.0) < 4 * math.sqrt(6 / 40_000)


def test_stratified_expectation_is_differentiable():
    logits = Variable([0.2, -0.1], requires_grad=True)
    mean = Variable([[-1.0], [1.0]], requires_grad=True)
    m = Mixture(logits, DiagonalGaussian(mean, np.zeros((2, 1))))
    with Tape() as tape:
        val = stratified_expectation(m, lambda z: z[..., 0], 5, np.random.default_rng(0))
        g = tape.backward(val, [logits, mean])
    # d/dmu_k of sum_k a_k mean_t(mu_k + eps) = a_k
    np.testing.assert_allclose(g[mean][:, 0], m.weights(), atol=1e-14)
    assert np.all(g[logits] != 0)


def test_sample_batch_shapes():
    comps = DiagonalGaussian(np.zeros((3, 2)), np.zeros((3, 2)))
    s = mixture_sample_batch(Mixture(np.zeros(3), comps), 5, np.random.default_rng(0))
    assert s.z.shape == (3, 5, 2)
    assert s.log_q.shape == (3, 5)
    assert s.log_alpha.shape == (3,)


def test_single_component_block_matches_ancestral_draws():
    comps = DiagonalGaussian([[0.5, -0.5]], [[0.1, 0.2]])
    m = Mixture([0.0], comps)
    s = mixture_sample_batch(m, 6, rng_stream(9, 1))
    z, log_q, idx = mixture_sample_ancestral(m, 6, rng_stream(9, 1))
    assert s.z.value[0].tobytes() == z.value.tobytes()
    assert s.log_q.value[0].tobytes() == log_q.value.tobytes()
    assert np.all(idx == 0)


def test_resampled_stratified_draws_match_ancestral_distribution():
    m = two_comp(mu=2.0, sd=0.7, weights=(0.3, 0.7))
    rng = np.random.default_rng(11)
    n = 10_000
    s = mixture_sample_batch(m, n, rng)
    pool = s.z.value[..., 0].ravel()
    w = np.repeat(m.weights(), n) / n
    resampled = pool[rng.choice(pool.size, size=n, p=w / w.sum())]
    z, _, _ = mixture_sample_ancestral(m, n, rng)
    assert stats.ks_2samp(resampled, z.value[:, 0]).pvalue > 0.01


def test_stratification_identity_within_four_standard_errors():
    m = two_comp(mu=1.5, sd=0.8, weights=(0.35, 0.65))
    f = lambda z: ad.square(z[..., 0]) + z[..., 0]  # noqa: E731
    rng = np.random.default_rng(12)
    T = 5000  # K * T = 10^4
    s = mixture_sample_batch(m, T, rng)
    vals = f(s.z).value
    alpha = m.weights()
    strat = float((alpha * vals.mean(-1)).sum())
    strat_se = math.sqrt(float((alpha**2 * vals.var(-1, ddof=1) / T).sum()))
    z, _, _ = mixture_sample_ancestral(m, 2 * T, rng)
    anc_vals = f(z).value
    anc = float(anc_vals.mean())
    anc_se = float(anc_vals.std(ddof=1) / math.sqrt(anc_vals.size))
    assert abs(strat - anc) <= 4 * math.sqrt(strat_se**2 + anc_se**2)


def test_stratified_variance_below_ancestral_on_separated_mixture():
    m = two_comp(mu=5.0, sd=1.0)
    f = lambda z: z[..., 0]  # noqa: E731
    strat, anc = [], []
    for r in range(500):
        strat.append(float(stratified_expectation(m, f, 10, rng_stream(13, r)).value))
        anc.append(float(ancestral_expectation(m, f, 20, rng_stream(14, r)).value))
    assert np.var(strat, ddof=1) <= np.var(anc, ddof=1)


def test_ancestral_index_frequencies():
    m = two_comp(weights=(0.25, 0.75))
    _, _, idx = mixture_sample_ancestral(m, 40_000, np.random.default_rng(4))
    assert abs(idx.mean() - 0.75) < 4 * math.sqrt(0.75 * 0.25 / 40_000)


def test_stl_density_is_detached_but_samples_are_not():
    logits = Variable([0.3, -0.3], requires_grad=True)
    mean = Variable([[-1.0], [1.0]], requires_grad=True)
    ls = Variable(np.zeros((2, 1)), requires_grad=True)
    m = Mixture(logits, DiagonalGaussian(mean, ls))
    eps = np.random.default_rng(0).standard_normal((2, 3, 1))
    with Tape() as tape:
        plain = mixture_sample_batch(m, 3, eps=eps)
        g_plain = tape.backward(ad.sum(plain.log_q), [mean])[mean]
    with Tape() as tape:
        stl = mixture_sample_batch(m, 3, eps=eps, stl=True)
        g_stl = tape.backward(ad.sum(stl.log_q), [mean, logits])
    assert plain.log_q.value.tobytes() == stl.log_q.value.tobytes()
    # with stl the density still moves through z but not through the parameters directly
    assert not np.allclose(g_plain, g_stl[mean])
    np.testing.assert_array_equal(g_stl[logits], [0.0, 0.0])


def test_trainable_prior_initial_state_is_standard_normal(rng):
    p = TrainableMixturePrior(3, 2)
    z = rng.normal(size=(4, 5, 2))
    np.testing.assert_allclose(p.log_prob(z).value, StandardNormal(2).log_prob(z).value, atol=1e-12)
    assert p.sample((10, 4), rng).shape == (10, 4, 2)


def test_trainable_prior_gradients(rng):
    p = TrainableMixturePrior(2, 2)
    p.logits.value[:] = [0.3, -0.2]
    p.means.value[:] = rng.normal(size=(2, 2))
    z = rng.normal(size=(6, 2))
    with Tape() as tape:
        g = tape.backward(ad.sum(p.log_prob(z)), p.parameters())
    for leaf in p.parameters():

        def f(v, leaf=leaf):
            old = leaf.value.copy()
            leaf.value[...] = v
            out = float(ad.sum(p.log_prob(z)).value)
            leaf.value[...] = old
            return out

        assert_grad_close(g[leaf], numeric_grad(f, leaf.value.copy()))


def test_categorical_likelihood():
    c = CategoricalLikelihood(np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(c.probs().sum(-1), 1.0, atol=1e-15)
    lp = c.log_prob(np.array([2, 1])).value
    np.testing.assert_allclose(lp, [3 - np.log(np.exp([1, 2, 3]).sum()), -math.log(3)], atol=1e-14)


def test_bernoulli_likelihood():
    logits = np.array([[-2.0, 0.0, 3.0]])
    b = BernoulliLikelihood(logits)
    x = np.array([[0.0, 1.0, 1.0]])
    p = 1 / (1 + np.exp(-logits))
    ref = np.sum(x * np.log(p) + (1 - x) * np.log(1 - p))
    assert b.log_prob(x).value[0] == pytest.approx(ref, abs=1e-12)
    assert np.all((b.probs() > 0) & (b.probs() < 1))
