"""Predictive moments and log density of y* under the log-normal noise model."""

import numpy as np
from scipy.special import logsumexp

from .linalg import NumericalError

DEFAULT_NODES = 20
OVERFLOW_LIMIT = 700.0


def _noise_exponent(mu_g, var_g):
    expo = np.asarray(mu_g, dtype=float) + 0.5 * np.asarray(var_g, dtype=float)
    if np.any(expo > OVERFLOW_LIMIT):
        raise NumericalError("divergent noise model: mu_g + var_g/2 exceeds 700",
                             {"max_exponent": float(np.max(expo))})
    return expo


def predict_y(latent):
    """Mean and variance of y* given latent moments (mu_f, var_f, mu_g, var_g)."""
    expo = _noise_exponent(latent.mu_g, latent.var_g)
    mu = np.array(latent.mu_f, dtype=float, copy=True)
    var = np.asarray(latent.var_f) + np.exp(expo)
    return mu, var


def log_predictive_density(latent, ystar, nodes=DEFAULT_NODES):
    """log q(y*) by Gauss-Hermite quadrature over g*.

    q(y*) = int N(y* | mu_f, exp(g) + var_f) N(g | mu_g, var_g) dg.
    Works elementwise on arrays of test points.
    """
    if nodes < 1:
        raise ValueError("need at least one quadrature node")
    mu_f = np.atleast_1d(np.asarray(latent.mu_f, dtype=float))
    var_f = np.atleast_1d(np.asarray(latent.var_f, dtype=float))
    mu_g = np.atleast_1d(np.asarray(latent.mu_g, dtype=float))
    var_g = np.atleast_1d(np.asarray(latent.var_g, dtype=float))
    ystar = np.atleast_1d(np.asarray(ystar, dtype=float))
    _noise_exponent(mu_g, var_g)
    t, w = np.polynomial.hermite.hermgauss(nodes)
    # g = mu_g + sqrt(2 var_g) t, weights w / sqrt(pi)
    g = mu_g[:, None] + np.sqrt(2.0 * var_g)[:, None] * t[None, :]
    if np.max(g) > OVERFLOW_LIMIT:
        raise NumericalError("divergent noise model at quadrature node", {"max_node": float(np.max(g))})
    v = np.exp(g) + var_f[:, None]
    resid = (ystar - mu_f)[:, None]
    logn = -0.5 * (np.log(2.0 * np.pi * v) + resid ** 2 / v)
    out = logsumexp(logn, axis=1, b=(w / np.sqrt(np.pi))[None, :])
    return out if np.ndim(latent.mu_f) else out[0]


def gaussian_log_density(y, mean, var):
    y, mean, var = (np.asarray(a, dtype=float) for a in (y, mean, var))
    return -0.5 * (np.log(2.0 * np.pi * var) + (y - mean) ** 2 / var)


def log_predictive_density_gaussian(latent, ystar):
    """Moment-matched Gaussian alternative to the quadrature density."""
    mu, var = predict_y(latent)
    return gaussian_log_density(ystar, mu, var)
