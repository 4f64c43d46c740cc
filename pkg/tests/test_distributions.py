import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from ervae.distributions import (
    BetaParams,
    DiagGaussianParams,
    UniformUnitBox,
    beta_log_pdf,
    beta_params_from_raw,
    beta_sample_reparam,
    gaussian_log_pdf_diag,
    kl_beta_uniform,
    kl_gaussian_standard,
)
from ervae.nn import Tensor
from ervae.special import betainc_grad, betaincinv


def _z(a, b, u):
    return beta_sample_reparam(BetaParams(np.array([a]), np.array([b])), np.array([u])).data[0]


def test_inverse_cdf_exact_cases():
    assert _z(1.0, 1.0, 0.73) == pytest.approx(0.73, abs=1e-12)
    assert _z(2.0, 2.0, 0.5) == pytest.approx(0.5, abs=1e-12)


def test_inverse_cdf_matches_bisection_oracle():
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if stats.beta.cdf(mid, 2, 5) < 0.5 else (lo, mid)
    assert _z(2.0, 5.0, 0.5) == pytest.approx(0.5 * (lo + hi), abs=1e-10)


@pytest.mark.parametrize("u", [0.0, 1.0])
def test_inverse_cdf_rejects_endpoints(u):
    with pytest.raises(ValueError):
        _z(2.0, 2.0, u)


@given(st.floats(0.5, 50.0), st.floats(0.5, 50.0), st.floats(1e-6, 1 - 1e-6))
@settings(max_examples=100, deadline=None)
def test_inverse_cdf_round_trip(a, b, u):
    z = betaincinv(np.array([u]), np.array([a]), np.array([b]))
    assert stats.beta.cdf(z[0], a, b) == pytest.approx(u, abs=1e-9)


def test_reparam_samples_pass_ks():
    rng = np.random.default_rng(0)
    for a, b in [(2.0, 5.0), (0.5, 0.5), (20.0, 3.0)]:
        z = beta_sample_reparam(BetaParams(np.array([a]), np.array([b])), rng.uniform(size=(5000, 1))).data
        assert stats.kstest(z[:, 0], stats.beta(a, b).cdf).pvalue > 0.01


def test_reparam_gradient_matches_finite_differences():
    u = np.array([0.1, 0.5, 0.9, 0.999])
    a0, b0 = np.array([0.7, 2.0, 5.0, 30.0]), np.array([3.0, 2.0, 1.2, 0.8])
    a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
    beta_sample_reparam(BetaParams(a, b), u).sum().backward()
    h = 1e-6
    fd_a = (betaincinv(u, a0 + h, b0) - betaincinv(u, a0 - h, b0)) / (2 * h)
    fd_b = (betaincinv(u, a0, b0 + h) - betaincinv(u, a0, b0 - h)) / (2 * h)
    assert np.allclose(a.grad, fd_a, rtol=1e-5)
    assert np.allclose(b.grad, fd_b, rtol=1e-5)


def test_betainc_grad_matches_scipy():
    from scipy.special import betainc

    x, a, b = np.array([0.2, 0.7, 0.95]), np.array([0.8, 3.0, 40.0]), np.array([2.5, 1.0, 6.0])
    f, fa, fb = betainc_grad(x, a, b)
    h = 1e-6
    assert np.allclose(f, betainc(a, b, x), atol=1e-13)
    assert np.allclose(fa, (betainc(a + h, b, x) - betainc(a - h, b, x)) / (2 * h), rtol=1e-6)
    assert np.allclose(fb, (betainc(a, b + h, x) - betainc(a, b - h, x)) / (2 * h), rtol=1e-6)


def test_beta_log_pdf_values():
    p = BetaParams(np.array([1.0]), np.array([1.0]))
    assert beta_log_pdf(p, np.array([[0.3], [0.9]])) == pytest.approx([0.0, 0.0])
    q = BetaParams(np.array([2.0]), np.array([2.0]))
    assert beta_log_pdf(q, np.array([0.5])) == pytest.approx(np.log(1.5), abs=1e-12)
    with pytest.raises(ValueError):
        beta_log_pdf(q, np.array([1.0]))


@pytest.mark.parametrize("a, b", [(2.0, 2.0), (0.7, 3.0), (5.0, 1.0)])
def test_beta_log_pdf_integrates_to_one(a, b):
    p = BetaParams(np.array([a]), np.array([b]))
    total, _ = integrate.quad(lambda z: np.exp(beta_log_pdf(p, np.array([z]))), 0, 1, epsabs=1e-12, limit=200)
    assert total == pytest.approx(1.0, abs=1e-8)


def test_kl_beta_uniform_values():
    assert float(kl_beta_uniform(BetaParams(np.array([1.0]), np.array([1.0]))).data) == pytest.approx(0.0, abs=1e-14)
    oracle, _ = integrate.quad(lambda z: stats.beta.pdf(z, 2, 2) * stats.beta.logpdf(z, 2, 2), 0, 1)
    kl = float(kl_beta_uniform(BetaParams(np.array([2.0]), np.array([2.0]))).data)
    assert kl == pytest.approx(oracle, abs=1e-10)
    assert kl == pytest.approx(np.log(6) - 5 / 3, abs=1e-12)


@pytest.mark.parametrize("a, b", [(3.0, 0.6), (0.5, 0.5), (12.0, 7.0)])
def test_kl_beta_uniform_matches_monte_carlo(a, b):
    z = stats.beta(a, b).rvs(size=10**6, random_state=np.random.default_rng(1))
    terms = stats.beta.logpdf(z, a, b)
    kl = float(kl_beta_uniform(BetaParams(np.array([a]), np.array([b]))).data)
    assert kl >= 0
    assert abs(terms.mean() - kl) < 3 * terms.std() / np.sqrt(len(z))


def test_kl_beta_uniform_gradient():
    a, b = Tensor(np.array([2.5, 0.4]), requires_grad=True), Tensor(np.array([1.5, 0.9]), requires_grad=True)
    kl_beta_uniform(BetaParams(a, b)).backward()
    h = 1e-6

    def k(x, y):
        return float(kl_beta_uniform(BetaParams(x, y)).data)

    a0, b0 = a.data.copy(), b.data.copy()
    for i in range(2):
        e = np.eye(2)[i] * h
        assert a.grad[i] == pytest.approx((k(a0 + e, b0) - k(a0 - e, b0)) / (2 * h), rel=1e-6)
        assert b.grad[i] == pytest.approx((k(a0, b0 + e) - k(a0, b0 - e)) / (2 * h), rel=1e-6)


def test_softplus_floor_parameterization():
    p = beta_params_from_raw(np.array([-50.0, 0.0]), np.array([3.0, -3.0]))
    assert p.alpha.data[0] == pytest.approx(0.01)
    assert p.alpha.data[1] == pytest.approx(np.log(2) + 0.01)
    assert np.all(p.beta.data > 0.01)
    e = beta_params_from_raw(np.array([0.0]), np.array([1.0]), link="exp")
    assert e.alpha.data[0] == pytest.approx(1.01)
    assert e.beta.data[0] == pytest.approx(np.e + 0.01)
    with pytest.raises(ValueError):
        beta_params_from_raw(np.zeros(1), np.zeros(1), link="square")
    with pytest.raises(ValueError):
        BetaParams(np.array([0.0]), np.array([1.0]))


def test_uniform_box():
    box = UniformUnitBox(2)
    assert np.array_equal(box.log_pdf(np.array([[0.2, 0.9], [1.2, 0.5]])), [0.0, -np.inf])
    s = box.sample(1000, np.random.default_rng(0))
    assert s.shape == (1000, 2) and s.min() >= 0 and s.max() <= 1


def test_gaussian_log_pdf():
    std = DiagGaussianParams(np.zeros(1), np.zeros(1))
    assert gaussian_log_pdf_diag(std, np.zeros(1)).item() == pytest.approx(-0.918938533, abs=1e-9)
    rng = np.random.default_rng(2)
    mean, log_std, x = rng.normal(size=100), rng.normal(size=100) * 0.3, rng.normal(size=100)
    full = gaussian_log_pdf_diag(DiagGaussianParams(mean, log_std), x).item()
    parts = sum(gaussian_log_pdf_diag(DiagGaussianParams(mean[i:i + 1], log_std[i:i + 1]), x[i:i + 1]).item()
                for i in range(100))
    assert full == pytest.approx(parts, abs=1e-10)
    with pytest.raises(ValueError):
        gaussian_log_pdf_diag(DiagGaussianParams(np.zeros(3), np.zeros(3)), np.zeros(4))


def test_gaussian_log_pdf_maximal_at_mean():
    mean = np.array([0.3, -1.2])
    x = Tensor(mean.copy(), requires_grad=True)
    gaussian_log_pdf_diag(DiagGaussianParams(mean, np.array([0.1, -0.4])), x).backward()
    assert np.allclose(x.grad, 0.0)


def test_kl_gaussian_standard():
    assert kl_gaussian_standard(DiagGaussianParams(np.zeros(1), np.zeros(1))).item() == 0.0
    assert kl_gaussian_standard(DiagGaussianParams(np.ones(1), np.zeros(1))).item() == pytest.approx(0.5)


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=4), st.floats(-2, 2))
@settings(max_examples=100, deadline=None)
def test_kl_gaussian_non_negative(mean, log_std):
    m = np.array(mean)
    val = kl_gaussian_standard(DiagGaussianParams(m, np.full(len(m), log_std))).item()
    assert val >= -1e-12
