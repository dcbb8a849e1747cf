import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from idf import priors
from idf.priors import DLogisticParams, MixtureParams, quantize_pmf, quantize_single


def pmf_direct(z, mu, s):
    """Reference pmf: plain CDF difference, no log-space tricks."""
    return expit((z + 0.5 - mu) / s) - expit((z - 0.5 - mu) / s)


def test_logpmf_matches_direct_cdf_difference():
    z = np.arange(-20, 21)
    for mu, s in [(0.0, 1.0), (3.3, 0.7), (-5.0, 4.0)]:
        lp = priors.dlogistic_logpmf(z, DLogisticParams(mu, s))
        np.testing.assert_allclose(np.exp(lp), pmf_direct(z, mu, s), rtol=1e-10, atol=1e-15)


def test_pmf_example_value():
    # mu = 0, s = 1: sigma(0.5) - sigma(-0.5) = tanh(0.25)
    lp = priors.dlogistic_logpmf(0, DLogisticParams(0.0, 1.0))
    assert np.exp(lp) == pytest.approx(np.tanh(0.25), rel=1e-14)


@pytest.mark.parametrize("s", [0.1, 0.5, 1.0, 3.0, 10.0])
@pytest.mark.parametrize("mu", [0.0, 0.37, -2.5])
def test_pmf_telescopes_to_one(mu, s):
    z = np.arange(-10_000, 10_001)
    total = np.exp(priors.dlogistic_logpmf(z, DLogisticParams(np.full(z.shape, mu), np.full(z.shape, s)))).sum()
    assert total >= 1 - 1e-9
    assert total <= 1 + 1e-9


def test_k1_mixture_equals_single_component_bitwise():
    rng = np.random.default_rng(0)
    z = rng.integers(-50, 50, size=(3, 5))
    mu = rng.normal(size=(3, 5)) * 10
    s = np.exp(rng.normal(size=(3, 5)))
    single = priors.logpmf(z, DLogisticParams(mu, s))
    mix = priors.logpmf(z, MixtureParams.from_weights(np.ones((1, 3, 5)), mu[None], s[None]))
    assert np.array_equal(single, mix)


def test_mixture_matches_weighted_sum():
    pi = np.array([0.2, 0.8])
    mu = np.array([-3.0, 4.0])
    s = np.array([1.0, 2.0])
    z = np.arange(-30, 31)
    ref = sum(pi[k] * pmf_direct(z, mu[k], s[k]) for k in range(2))
    p = MixtureParams.from_weights(pi[:, None], mu[:, None], s[:, None])
    np.testing.assert_allclose(np.exp(priors.logpmf(z, p)), ref, rtol=1e-12, atol=1e-15)


def kl_nats(p, q):
    p = np.asarray(p)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


@pytest.mark.parametrize("s", [0.5, 1.0, 2.0, 5.0, 10.0])
@pytest.mark.parametrize("mu", [0.0, 0.5, 13.3, -7.7])
def test_quantized_pmf_kl_small(mu, s):
    q = quantize_single(DLogisticParams(mu, s), precision=16)
    assert q.freq.sum() == 1 << 16
    assert q.freq.min() >= 1
    z = np.arange(q.lo, q.hi + 1)
    p = pmf_direct(z.astype(float), mu, s)
    p[0] += expit((q.lo - 0.5 - mu) / s)          # edge bins take the tails
    p[-1] += 1 - expit((q.hi + 0.5 - mu) / s)
    assert kl_nats(p, q.freq / q.m) <= 1e-3


def test_window_policy():
    q = quantize_single(DLogisticParams(10.4, 0.5))
    assert (q.lo, q.hi) == (10 - 16, 10 + 16)
    q = quantize_single(DLogisticParams(-2.5, 3.0), precision=24)
    assert (q.lo, q.hi) == (-3 - 48, -3 + 48)  # round half away, W = 16 * 3
    # at 16 bits the reach is capped at ln(2**16) ~ 11.09 scales
    q = quantize_single(DLogisticParams(-2.5, 3.0), precision=16)
    assert (q.lo, q.hi) == (-3 - 34, -3 + 34)


def test_near_deterministic_pmf():
    q = quantize_single(DLogisticParams(5.0, 1e-3))
    n = len(q.freq)
    assert q.spec(5) == (n // 2, (1 << 16) - (n - 1))
    assert all(q.spec(z)[1] == 1 for z in range(q.lo, q.hi + 1) if z != 5)


def test_mixture_window_covers_every_component():
    p = MixtureParams.from_weights(np.array([[0.5], [0.5]]), np.array([[0.0], [200.0]]),
                                   np.array([[1.0], [1.0]]))
    t = quantize_pmf(p)
    assert t.in_window([0])[0] and t.in_window([200])[0]
    assert t.lo[0] < -10 and t.lo[0] + t.width[0] - 1 > 210
    start, freq = t.lookup(np.array([200]))
    assert freq[0] > 1000


def test_precision_bounds_and_pathological_scale():
    with pytest.raises(ValueError):
        quantize_single(DLogisticParams(0.0, 1.0), precision=7)
    with pytest.raises(ValueError):
        quantize_single(DLogisticParams(0.0, 1.0), precision=25)
    with pytest.raises(ValueError, match="latent bound"):
        quantize_single(DLogisticParams(0.0, 1e5), precision=24)
    with pytest.raises(ValueError, match="denominator"):
        quantize_single(DLogisticParams(0.0, 100.0), precision=10)
    with pytest.raises(ValueError):
        quantize_single(DLogisticParams(0.0, np.inf))


def test_table_lookup_and_cum():
    rng = np.random.default_rng(0)
    p = DLogisticParams(rng.normal(size=7) * 30, np.exp(rng.normal(size=7)))
    t = quantize_pmf(p, precision=12)
    assert np.all(t.cum[np.arange(7), t.width] == 1 << 12)
    for i in range(7):
        row = t.row(i)
        z = np.array([row.lo + 3])
        z_all = np.full(7, 0)
        z_all[i] = z[0]
        mask = np.arange(7) == i
        assert t.in_window(z_all)[i]
        start, freq = t.lookup(np.where(mask, z_all, t.lo))
        assert (start[i], freq[i]) == row.spec(int(z[0]))
    with pytest.raises(ValueError):
        t.lookup(t.lo - 1)


def test_quantization_is_deterministic():
    rng = np.random.default_rng(1)
    p = MixtureParams.from_logits(rng.normal(size=(3, 20)), rng.normal(size=(3, 20)) * 50,
                                  np.exp(rng.normal(size=(3, 20))))
    a, b = quantize_pmf(p), quantize_pmf(p)
    assert np.array_equal(a.freq, b.freq) and np.array_equal(a.lo, b.lo)


@settings(max_examples=60, deadline=None)
@given(mu=st.floats(-1e4, 1e4), log_s=st.floats(np.log(1e-3), np.log(200.0)),
       precision=st.integers(12, 24))
def test_quantized_pmf_invariants(mu, log_s, precision):
    q = quantize_single(DLogisticParams(mu, np.exp(log_s)), precision)
    assert q.freq.sum() == 1 << precision
    assert q.freq.min() >= 1


def test_sample_matches_pmf_chi_square():
    rng = np.random.default_rng(0)
    mu, s = 2.3, 1.7
    n = 200_000
    x = priors.sample(DLogisticParams(mu, s), rng, size=n)
    z = np.arange(-8, 13)
    p = pmf_direct(z.astype(float), mu, s)
    obs = np.array([(x == v).sum() for v in z])
    exp = n * p
    chi2 = float(np.sum((obs - exp) ** 2 / exp))
    # 21 bins: 99.9% quantile of chi2(20) is about 45.3
    assert chi2 < 45.3


def test_mixture_sample_mean():
    rng = np.random.default_rng(1)
    p = MixtureParams.from_weights(np.array([0.25, 0.75])[:, None].repeat(50_000, 1),
                                   np.array([-10.0, 20.0])[:, None].repeat(50_000, 1),
                                   np.ones((2, 50_000)))
    x = priors.sample(p, rng)
    assert x.shape == (50_000,)
    # mean of a discretized symmetric logistic is mu
    assert abs(x.mean() - (0.25 * -10 + 0.75 * 20)) < 0.3


def test_conditioner_initial_prior_is_broad():
    cond = priors.Conditioner(2, 2, depth=1, channels=4, rng=np.random.default_rng(0))
    p = cond.params(np.zeros((1, 2, 2, 2), dtype=np.int64))
    assert np.allclose(p.mu, 128.0)
    assert np.allclose(p.s, priors.S0_COND + priors.S_MIN)


def test_top_prior_init_spreads_components():
    top = priors.TopPrior((2, 2, 2), k=4)
    p = top.params()
    assert p.mu.shape == (4, 2, 2, 2)
    np.testing.assert_allclose(p.mu[:, 0, 0, 0], [32, 96, 160, 224])
    np.testing.assert_allclose(p.pi, 0.25)
