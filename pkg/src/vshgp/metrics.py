"""Standardized accuracy metrics."""

import numpy as np

from .predictive import gaussian_log_density


def smse(y_true, mu_pred):
    """Mean squared error divided by the variance of the targets."""
    y_true = np.asarray(y_true, dtype=float).ravel()
    mu_pred = np.asarray(mu_pred, dtype=float).ravel()
    if y_true.shape != mu_pred.shape:
        raise ValueError(f"length mismatch: {y_true.size} targets, {mu_pred.size} predictions")
    if y_true.size < 2:
        raise ValueError("SMSE needs at least two points")
    var = np.var(y_true)
    if var == 0:
        raise ValueError("targets have zero variance")
    return float(np.mean((y_true - mu_pred) ** 2) / var)


def msll(y_true, log_pred_density, train_mean, train_var):
    """Mean standardized log loss against a Gaussian fit to the training targets.

    Negative values mean the model beats the trivial N(train_mean, train_var).
    """
    if train_var <= 0:
        raise ValueError("train_var must be positive")
    y_true = np.asarray(y_true, dtype=float).ravel()
    lpd = np.asarray(log_pred_density, dtype=float).ravel()
    if not np.all(np.isfinite(lpd)):
        raise ValueError("non-finite predictive log density")
    trivial = gaussian_log_density(y_true, train_mean, train_var)
    return float(np.mean(-lpd + trivial))
