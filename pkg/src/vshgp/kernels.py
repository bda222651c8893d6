"""Squared-exponential ARD kernel with log-domain parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class KernelDimensionError(ValueError):
    """Raised when input dimensions disagree with each other or the lengthscales."""


@dataclass
class KernelParams:
    """SE-ARD parameters stored in the log domain.

    ``log_variance`` is log of the signal variance and ``log_lengthscales`` holds
    one entry per input dimension.
    """

    log_variance: float
    log_lengthscales: np.ndarray

    def __post_init__(self):
        self.log_variance = float(self.log_variance)
        self.log_lengthscales = np.atleast_1d(np.asarray(self.log_lengthscales, dtype=float)).copy()

    @classmethod
    def from_natural(cls, variance, lengthscales):
        variance = float(variance)
        lengthscales = np.atleast_1d(np.asarray(lengthscales, dtype=float))
        if variance <= 0 or np.any(lengthscales <= 0):
            raise ValueError("signal variance and lengthscales must be positive")
        return cls(np.log(variance), np.log(lengthscales))

    @property
    def variance(self):
        return float(np.exp(self.log_variance))

    @property
    def lengthscales(self):
        return np.exp(self.log_lengthscales)

    @property
    def dim(self):
        return self.log_lengthscales.size

    @property
    def size(self):
        return self.dim + 1

    def to_vector(self):
        return np.concatenate(([self.log_variance], self.log_lengthscales))

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=float)
        return cls(vec[0], vec[1:])

    def copy(self):
        return KernelParams(self.log_variance, self.log_lengthscales.copy())


def _check(A, B, params):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    d = params.dim
    if A.shape[1] != d or B.shape[1] != d:
        raise KernelDimensionError(
            f"input dimensions {A.shape[1]} and {B.shape[1]} do not match "
            f"{d} lengthscales"
        )
    return A, B


def kernel_eval(x, x2, params: KernelParams) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape or x.size != params.dim:
        raise KernelDimensionError(
            f"point sizes {x.size} and {x2.size} do not match {params.dim} lengthscales"
        )
    # symmetric term by term, so kernel_eval(a, b) == kernel_eval(b, a) bitwise
    r2 = 0.0
    for xi, yi, li in zip(x, x2, params.lengthscales):
        r2 += (xi - yi) ** 2 / li ** 2
    return params.variance * np.exp(-0.5 * r2)


def scaled_sqdist(A, B, params):
    """Lengthscale-scaled squared distances, accumulated one dimension at a time."""
    A, B = _check(A, B, params)
    ell = params.lengthscales
    r2 = np.zeros((A.shape[0], B.shape[0]))
    for k in range(params.dim):
        diff = A[:, k, None] - B[None, :, k]
        r2 += diff * diff / ell[k] ** 2
    return r2


def kernel_matrix(A, B, params: KernelParams) -> np.ndarray:
    return params.variance * np.exp(-0.5 * scaled_sqdist(A, B, params))


def kernel_diag(A, params: KernelParams) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[1] != params.dim:
        raise KernelDimensionError(f"input dimension {A.shape[1]} does not match {params.dim} lengthscales")
    return np.full(A.shape[0], params.variance)


def kernel_param_grads(A, B, params: KernelParams, K=None) -> np.ndarray:
    """Derivatives of K(A, B) w.r.t. (log variance, log lengthscales).

    Returns an array of shape ``(1 + d, p, q)``.
    """
    A, B = _check(A, B, params)
    if K is None:
        K = kernel_matrix(A, B, params)
    ell = params.lengthscales
    out = np.empty((params.size,) + K.shape)
    out[0] = K
    for k in range(params.dim):
        diff = A[:, k, None] - B[None, :, k]
        out[k + 1] = K * diff * diff / ell[k] ** 2
    return out


def kernel_input_grads(A, B, params: KernelParams, which="A", K=None) -> np.ndarray:
    """Packed derivatives of K(A, B) w.r.t. the coordinates of one side.

    Entry ``[k, i, j]`` is dK_ij / dA_ik when ``which == "A"`` (the only
    nonzero row of dK/dA_ik is row i), or dK_ij / dB_jk when ``which == "B"``.
    Contracting with an adjoint matrix therefore gives the gradient for every
    point along dimension k in one pass.
    """
    if which not in ("A", "B"):
        raise ValueError("which must be 'A' or 'B'")
    A, B = _check(A, B, params)
    if K is None:
        K = kernel_matrix(A, B, params)
    ell = params.lengthscales
    sign = -1.0 if which == "A" else 1.0
    out = np.empty((params.dim,) + K.shape)
    for k in range(params.dim):
        diff = A[:, k, None] - B[None, :, k]
        out[k] = sign * K * diff / ell[k] ** 2
    return out


def accumulate_input_grad(packed, adjoint, which="A"):
    """Contract packed input derivatives with an adjoint of K.

    Returns the gradient w.r.t. the selected side's coordinates, shaped
    ``(p, d)`` for ``which="A"`` or ``(q, d)`` for ``which="B"``.
    """
    axis = 2 if which == "A" else 1
    return np.sum(packed * adjoint[None], axis=axis).T
