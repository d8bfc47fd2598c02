import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from oracles import PRIOR_COV, PRIOR_MEAN, chain_law
from spinrev import kernels
from spinrev.diffusion import (
    GaussianScore,
    GmmScore,
    KdeScore,
    Normalizer,
    build_schedule,
    ddpm_update,
    forward_noise,
    reverse_step,
    sample,
    score_from_dict,
    scott_factor,
    spinmap_bank,
)
from spinrev.errors import ValidationError
from spinrev.reverse import tweedie_z0

SCHED = build_schedule()


# schedule

def test_schedule_defaults():
    assert SCHED.T == 1000
    assert SCHED.betas[0] == 1e-4 and SCHED.betas[-1] == 0.02
    assert SCHED.alpha_bar(1000) < 1e-4


def test_schedule_identities():
    assert np.all(SCHED.alphas == 1.0 - SCHED.betas)
    assert np.all(np.diff(SCHED.betas) > 0)
    assert np.all(np.diff(SCHED.alpha_bars) < 0)
    ab = SCHED.alpha_bars
    assert np.allclose(ab[1:], ab[:-1] * SCHED.alphas[1:], rtol=1e-14, atol=0)
    prev = np.concatenate([[1.0], ab[:-1]])
    assert np.allclose(SCHED.sigmas ** 2, (1 - prev) / (1 - ab) * SCHED.betas, rtol=1e-12, atol=0)


def test_two_step_schedule():
    s = build_schedule(2, 0.1, 0.3)
    assert s.alpha_bar(2) == (1 - s.betas[0]) * (1 - s.betas[1])


def test_first_sigma_zero():
    assert SCHED.sigmas[0] == 0.0


def test_schedule_tables_read_only():
    with pytest.raises(ValueError):
        SCHED.betas[0] = 0.5


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.02, 0.01), (10, 0.1, 1.0)])
def test_schedule_validation(args):
    with pytest.raises(ValidationError):
        build_schedule(*args)


def test_timesteps():
    ts = SCHED.timesteps(200)
    assert len(ts) == 200 and ts[0] == 1000 and ts[-1] == 5
    assert SCHED.timesteps(1000) == list(range(1000, 0, -1))
    with pytest.raises(ValidationError):
        SCHED.timesteps(0)
    with pytest.raises(ValidationError):
        SCHED.timesteps(1001)


def test_unit_stride_coefficients_are_table_entries():
    assert SCHED.step_coefficients(500, 499) == (SCHED.alphas[499], SCHED.sigmas[499])


def test_strided_coefficients_compose():
    alpha, sigma = SCHED.step_coefficients(500, 495)
    assert alpha == pytest.approx(np.prod(SCHED.alphas[495:500]), rel=1e-12)
    ab_t, ab_p = SCHED.alpha_bar(500), SCHED.alpha_bar(495)
    assert sigma ** 2 == pytest.approx((1 - ab_p) / (1 - ab_t) * (1 - ab_t / ab_p), rel=1e-12)


# normaliser

def test_normalizer_round_trip(normalizer):
    rng = np.random.default_rng(0)
    phys = rng.uniform([0, 0, 0], [1.2, 3000, 500], (100, 3))
    back = normalizer.denormalize(normalizer.normalize(phys))
    assert np.max(np.abs(back - phys) / np.maximum(np.abs(phys), 1)) < 1e-12
    z = normalizer.normalize(phys)
    assert z.min() >= -1 and z.max() <= 1


def test_normalizer_clamps_with_warning(normalizer, caplog):
    with caplog.at_level("WARNING"):
        z = normalizer.normalize(np.array([[1.5, 100.0, 600.0]]))
    assert "clamping 2" in caplog.text
    assert z[0, 0] == 1.0 and z[0, 2] == 1.0


@given(st.floats(0, 3000), st.floats(0, 3000))
def test_normalizer_monotone(a, b):
    n = Normalizer()
    za = n.normalize(np.array([0.5, a, 100.0]))[1]
    zb = n.normalize(np.array([0.5, b, 100.0]))[1]
    if a < b:
        assert za <= zb


def test_normalizer_bad_range():
    with pytest.raises(ValidationError):
        Normalizer(hi=(1.0, 0.0, 1.0))


# forward noise

def test_forward_noise_small_t_keeps_z0():
    z0 = np.random.default_rng(1).uniform(-1, 1, (16, 16, 3))
    zt = forward_noise(z0, 1, 0, SCHED)
    assert np.max(np.abs(zt - z0)) < 0.05


def test_forward_noise_terminal_is_standard_normal():
    z0 = np.full((100, 100, 1), 0.7)
    zt = forward_noise(z0, 1000, 3, SCHED)
    assert abs(zt.mean()) < 0.05 and 0.9 < zt.var() < 1.1


def test_forward_noise_reproducible():
    z0 = np.zeros((4, 4, 3))
    assert np.array_equal(forward_noise(z0, 300, 7, SCHED), forward_noise(z0, 300, 7, SCHED))
    with pytest.raises(ValidationError):
        forward_noise(z0, 0, 7, SCHED)


# reverse step and sampler

class _Zero:
    def score(self, z, ab):
        return np.zeros_like(z)


def test_zero_score_no_noise_is_rescaling():
    z = np.random.default_rng(2).standard_normal((5, 3))
    assert np.allclose(reverse_step(z, 1, _Zero(), 0, SCHED), z / math.sqrt(SCHED.alphas[0]), rtol=1e-15)
    assert np.allclose(ddpm_update(z, np.zeros_like(z), 0.9, 0.0, None), z / math.sqrt(0.9), rtol=1e-15)


def test_reverse_step_reproducible():
    g = GaussianScore(PRIOR_MEAN, PRIOR_COV)
    z = np.random.default_rng(3).standard_normal((6, 3))
    assert np.array_equal(reverse_step(z, 400, g, 11, SCHED), reverse_step(z, 400, g, 11, SCHED))
    with pytest.raises(ValidationError):
        reverse_step(z, 10, g, 0, SCHED, t_prev=10)


def test_standard_normal_target_full_chain():
    out = sample(GaussianScore(np.zeros(3), np.eye(3)), (10000,), 1000, 5)
    assert np.all(np.abs(out.mean(axis=0)) < 0.05)
    assert np.all((out.var(axis=0) > 0.9) & (out.var(axis=0) < 1.1))


def test_full_chain_equals_step_by_step():
    g = GaussianScore(PRIOR_MEAN, PRIOR_COV)
    sched = build_schedule(20)
    out = sample(g, (7,), 20, 9, sched)
    rng = np.random.default_rng(9)
    z = rng.standard_normal((7, 3))
    for t in range(20, 0, -1):
        z = reverse_step(z, t, g, rng, sched)
    assert np.array_equal(out, z)


def test_anisotropic_sampler_matches_exact_chain_law():
    # the strided chain is affine for a Gaussian prior, so its output law is known exactly
    m, s = chain_law(PRIOR_MEAN, PRIOR_COV, SCHED, 200)
    out = sample(GaussianScore(PRIOR_MEAN, PRIOR_COV), (20000,), 200, 13)
    se = np.sqrt(np.diag(s) / len(out))
    assert np.all(np.abs(out.mean(axis=0) - m) < 4 * se)
    emp = np.cov(out.T)
    assert np.linalg.norm(emp - s) / np.linalg.norm(s) < 0.03


def test_gmm_recovers_mode_weights():
    g = GmmScore([0.3, 0.7], [[-0.6, -0.6, -0.6], [0.6, 0.6, 0.6]], [np.eye(3) * 0.01] * 2)
    out = sample(g, (4000,), 200, 17)
    left = np.mean(out.mean(axis=1) < 0)
    assert abs(left - 0.3) < 0.1
    assert np.allclose(out[out.mean(axis=1) > 0].mean(axis=0), 0.6, atol=0.05)


# score models

def test_gaussian_diffused_score_closed_form():
    g = GaussianScore(PRIOR_MEAN, PRIOR_COV)
    z = np.random.default_rng(4).standard_normal((10, 3))
    for ab in (1.0, 0.7, 0.05):
        cov_t = ab * PRIOR_COV + (1 - ab) * np.eye(3)
        expect = -(z - math.sqrt(ab) * PRIOR_MEAN) @ np.linalg.inv(cov_t).T
        assert np.allclose(g.score(z, ab), expect, rtol=1e-12, atol=1e-14)


def test_gaussian_score_matches_log_density_gradient():
    g = GaussianScore(PRIOR_MEAN, PRIOR_COV)
    ab = 0.4
    mvn = stats.multivariate_normal(math.sqrt(ab) * PRIOR_MEAN, ab * PRIOR_COV + (1 - ab) * np.eye(3))
    z = np.array([0.3, -0.2, 0.5])
    h = 1e-5
    fd = np.array([(mvn.logpdf(z + h * e) - mvn.logpdf(z - h * e)) / (2 * h) for e in np.eye(3)])
    assert np.allclose(g.score(z, ab), fd, rtol=1e-7)


def test_gmm_single_component_equals_gaussian():
    g = GaussianScore(PRIOR_MEAN, PRIOR_COV)
    m = GmmScore([1.0], [PRIOR_MEAN], [PRIOR_COV])
    z = np.random.default_rng(5).standard_normal((8, 3))
    assert np.allclose(m.score(z, 0.3), g.score(z, 0.3), rtol=1e-12)


def test_gmm_validation():
    with pytest.raises(ValidationError):
        GmmScore([0.5, -0.5], [[0, 0, 0], [1, 1, 1]], [np.eye(3)] * 2)


@pytest.mark.parametrize("model", ["gaussian", "gmm", "kde"])
def test_tweedie_jacobian_matches_finite_differences(model):
    rng = np.random.default_rng(6)
    if model == "gaussian":
        m = GaussianScore(PRIOR_MEAN, PRIOR_COV)
    elif model == "gmm":
        m = GmmScore([0.4, 0.6], [[-0.3, 0.1, 0.2], [0.4, -0.2, 0.0]], [PRIOR_COV * 0.2, np.eye(3) * 0.05])
    else:
        m = KdeScore(rng.normal(size=(50, 3)) * 0.3, bandwidth=0.2)
    z = rng.standard_normal((4, 3)) * 0.5
    ab = 0.6
    jac = m.tweedie_jacobian(z, ab)
    h = 1e-6
    for c in range(3):
        dz = np.zeros(3)
        dz[c] = h
        fd = (m.tweedie(z + dz, ab) - m.tweedie(z - dz, ab)) / (2 * h)
        assert np.allclose(jac[..., :, c], fd, rtol=1e-5, atol=1e-7)


def test_score_and_jacobian_consistent():
    m = KdeScore(np.random.default_rng(7).normal(size=(40, 3)) * 0.3, bandwidth=0.1)
    z = np.random.default_rng(8).standard_normal((3, 2, 3))
    s, j = m.score_and_jacobian(z, 0.5)
    assert np.allclose(s, m.score(z, 0.5), rtol=1e-13, atol=1e-15)
    assert j.shape == (3, 2, 3, 3)


def test_kde_score_matches_scipy_density_gradient():
    rng = np.random.default_rng(9)
    bank = rng.multivariate_normal(PRIOR_MEAN, PRIOR_COV, size=300)
    kde = KdeScore(bank)
    ref = stats.gaussian_kde(bank.T)  # Scott's rule with the same covariance convention
    assert np.allclose(kde.kernel_cov, ref.covariance, rtol=1e-9, atol=1e-11)
    z = rng.standard_normal(3) * 0.4
    h = 1e-5
    fd = np.array([(ref.logpdf(z + h * e)[0] - ref.logpdf(z - h * e)[0]) / (2 * h) for e in np.eye(3)])
    assert np.allclose(kde.score(z, 1.0), fd, rtol=1e-6)


def test_kde_dedupe_preserves_score():
    rng = np.random.default_rng(10)
    base = rng.normal(size=(20, 3))
    bank = np.concatenate([base, base[:5], base[:5]])
    a = KdeScore(bank, bandwidth=0.3)
    b = KdeScore(bank, bandwidth=0.3, dedupe=False)
    z = rng.standard_normal((6, 3))
    assert len(a.bank) == 20 and len(b.bank) == 30
    assert np.allclose(a.score(z, 0.8), b.score(z, 0.8), rtol=1e-12)
    assert a.to_dict()["n_bank"] == 30


def test_kde_validation():
    with pytest.raises(ValidationError):
        KdeScore(np.zeros((1, 3)))
    with pytest.raises(ValidationError):
        KdeScore(np.zeros((4, 3)), bandwidth="silverman")
    with pytest.raises(ValidationError):
        KdeScore(np.zeros((4, 3)), bandwidth=-1.0)


def _kde_vs_gaussian(t, n=10000, seed=11):
    rng = np.random.default_rng(seed)
    bank = rng.multivariate_normal(PRIOR_MEAN, PRIOR_COV, size=n)
    kde, g = KdeScore(bank), GaussianScore(PRIOR_MEAN, PRIOR_COV)
    ab = SCHED.alpha_bar(t)
    q = math.sqrt(ab) * rng.multivariate_normal(PRIOR_MEAN, PRIOR_COV, size=2000)
    q = q + math.sqrt(1 - ab) * rng.standard_normal(q.shape)
    a, b = kde.score(q, ab), g.score(q, ab)
    return float(np.median(np.linalg.norm(a - b, axis=1) / np.linalg.norm(b, axis=1)))


@pytest.mark.xfail(strict=True, reason="Scott-rule KDE smoothing bias and tail variance give about 25% "
                                       "median score error at t=0 with 1e4 samples")
def test_kde_converges_to_gaussian_score_at_t0():
    assert _kde_vs_gaussian(0) < 0.10


@pytest.mark.parametrize("t", [100, 300])
def test_kde_converges_to_gaussian_score_once_diffused(t):
    assert _kde_vs_gaussian(t) < 0.10


@pytest.mark.parametrize("t", [10, 50, 100])
def test_tweedie_recovers_z0_in_expectation(t):
    # z0 drawn from the prior: the posterior mean is unbiased for it on average
    rng = np.random.default_rng(12)
    g = GaussianScore(PRIOR_MEAN, PRIOR_COV)
    z0 = rng.multivariate_normal(PRIOR_MEAN, PRIOR_COV, size=1000)
    zt = forward_noise(z0, t, rng, SCHED)
    est = tweedie_z0(zt, t, g, SCHED)
    assert np.all(np.abs((est - z0).mean(axis=0)) < 0.02)


@pytest.mark.parametrize("name", sorted(kernels.backends()))
def test_kde_kernel_backends_agree(name):
    rng = np.random.default_rng(13)
    zq, centers = rng.standard_normal((50, 3)), rng.standard_normal((30, 3))
    logw = np.log(np.full(30, 1 / 30))
    m0, s0 = kernels.kde_posterior(zq, centers, logw, True, impl=kernels.backends()["numpy"])
    m1, s1 = kernels.kde_posterior(zq, centers, logw, True, impl=kernels.backends()[name])
    assert np.allclose(m0, m1, rtol=1e-12, atol=1e-14) and np.allclose(s0, s1, rtol=1e-12, atol=1e-14)


def test_spinmap_bank_stratified(phantom32, normalizer):
    bank = spinmap_bank(phantom32, normalizer, 16, np.random.default_rng(0))
    assert bank.shape == (64, 3)
    phys = normalizer.denormalize(bank)
    assert set(np.round(phys[:, 1]).astype(int)) == {1, 1550, 950, 260}


def test_score_from_dict():
    g = score_from_dict(GaussianScore(PRIOR_MEAN, PRIOR_COV).to_dict())
    assert np.allclose(g.score(np.zeros(3), 0.5), GaussianScore(PRIOR_MEAN, PRIOR_COV).score(np.zeros(3), 0.5))
    m = GmmScore([0.5, 0.5], [[0, 0, 0], [1, 1, 1]], [np.eye(3)] * 2)
    assert np.allclose(score_from_dict(m.to_dict()).score(np.ones(3), 0.3), m.score(np.ones(3), 0.3))
    with pytest.raises(ValidationError):
        score_from_dict({"kind": "kde", "bandwidth": 0.1})
    with pytest.raises(ValidationError):
        score_from_dict({"kind": "unet"})


def test_scott_factor():
    assert scott_factor(10000) == pytest.approx(10000 ** (-1 / 7), rel=1e-15)
