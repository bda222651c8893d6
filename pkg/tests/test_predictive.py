import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from vshgp.core import LatentPrediction
from vshgp.linalg import NumericalError
from vshgp.predictive import (
    gaussian_log_density,
    log_predictive_density,
    log_predictive_density_gaussian,
    predict_y,
)


def latent(mu_f, var_f, mu_g, var_g):
    return LatentPrediction(*(np.atleast_1d(np.asarray(a, dtype=float)) for a in (mu_f, var_f, mu_g, var_g)))


def random_latent(seed, n=6):
    rng = np.random.default_rng(seed)
    return latent(rng.normal(size=n), rng.uniform(0.01, 1, n), rng.normal(-1.5, 1, n), rng.uniform(0.01, 0.5, n))


def test_predict_y_direct_formula():
    mu, var = predict_y(latent(1.5, 0.2, -2.0, 0.1))
    assert mu[0] == 1.5
    assert var[0] == pytest.approx(0.2 + np.exp(-1.95), rel=1e-15)


def test_predict_y_zero_g_variance():
    mu, var = predict_y(latent([0.3, -1.0], [0.4, 0.05], [0.2, -3.0], [0.0, 0.0]))
    np.testing.assert_allclose(var, [0.4 + np.exp(0.2), 0.05 + np.exp(-3.0)], rtol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_predict_y_matches_quadrature_moments(seed):
    lat = random_latent(seed)
    t, w = np.polynomial.hermite.hermgauss(64)
    w = w / np.sqrt(np.pi)
    mu, var = predict_y(lat)
    for i in range(len(lat)):
        g = lat.mu_g[i] + np.sqrt(2 * lat.var_g[i]) * t
        # second moment of the mixture minus the squared mean
        m1 = np.sum(w * lat.mu_f[i])
        m2 = np.sum(w * (lat.var_f[i] + np.exp(g) + lat.mu_f[i] ** 2))
        assert mu[i] == pytest.approx(m1, rel=1e-10)
        assert var[i] == pytest.approx(m2 - m1 ** 2, rel=1e-10)


def test_overflow_guard():
    with pytest.raises(NumericalError):
        predict_y(latent(0.0, 1.0, 699.0, 4.0))
    with pytest.raises(NumericalError):
        log_predictive_density(latent(0.0, 1.0, 699.0, 4.0), 0.0)


@pytest.mark.parametrize("nodes", [1, 3, 20])
def test_density_degenerate_mixture(nodes):
    lat = latent([0.2, 1.0], [0.3, 0.1], [-1.0, 0.5], [0.0, 0.0])
    y = np.array([0.0, 2.5])
    got = log_predictive_density(lat, y, nodes)
    want = norm.logpdf(y, lat.mu_f, np.sqrt(lat.var_f + np.exp(lat.mu_g)))
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_density_node_convergence(seed):
    lat = random_latent(seed)
    y = lat.mu_f + np.random.default_rng(seed + 10).normal(size=len(lat))
    a = log_predictive_density(lat, y, 20)
    b = log_predictive_density(lat, y, 64)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-8)


def test_density_matches_adaptive_integral():
    lat = latent(0.4, 0.2, -1.0, 0.3)
    y = 1.1

    def integrand(g):
        return norm.pdf(y, 0.4, np.sqrt(np.exp(g) + 0.2)) * norm.pdf(g, -1.0, np.sqrt(0.3))

    val, _ = integrate.quad(integrand, -12, 10, epsabs=1e-14, epsrel=1e-12)
    assert log_predictive_density(lat, y, 64)[0] == pytest.approx(np.log(val), abs=1e-10)


def test_density_sharp_mode_positive():
    lat = latent(0.7, 1e-6, -14.0, 1e-6)
    assert log_predictive_density(lat, 0.7)[0] > 0


def test_density_scalar_inputs():
    lat = LatentPrediction(0.1, 0.2, -1.0, 0.1)
    out = log_predictive_density(lat, 0.3)
    assert np.ndim(out) == 0


def test_gaussian_variant():
    lat = random_latent(4)
    y = np.zeros(len(lat))
    mu, var = predict_y(lat)
    np.testing.assert_allclose(log_predictive_density_gaussian(lat, y), norm.logpdf(y, mu, np.sqrt(var)), rtol=1e-13)
    assert gaussian_log_density(0.0, 0.0, 1.0) == pytest.approx(-0.5 * np.log(2 * np.pi))


def test_nodes_validation():
    with pytest.raises(ValueError):
        log_predictive_density(random_latent(0), np.zeros(6), 0)
