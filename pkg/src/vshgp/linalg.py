import numpy as np
from scipy import linalg


class NumericalError(RuntimeError):
    """A factorization or evaluation that cannot be repaired."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


MAX_JITTER_LEVEL = 8


def chol_jitter(K, max_level=MAX_JITTER_LEVEL):
    """Lower Cholesky factor of a symmetric matrix with escalating jitter.

    Tries jitter 0 first, then ``1e-10 * tr(K)/p * 10**k`` for k = 0..max_level.
    Returns ``(L, jitter)`` where ``L @ L.T == K + jitter * I``.
    """
    K = np.asarray(K, dtype=float)
    K = 0.5 * (K + K.T)
    p = K.shape[0]
    if p == 0:
        return np.zeros((0, 0)), 0.0
    base = 1e-10 * np.trace(K) / p
    jitters = [0.0] + [base * 10.0 ** k for k in range(max_level + 1)]
    eye = np.eye(p)
    for jitter in jitters:
        if jitter < 0 or not np.isfinite(jitter):
            break
        L, info = linalg.lapack.dpotrf(K + jitter * eye, lower=1, clean=1)
        if info == 0:
            return L, jitter
    try:
        eigs = np.linalg.eigvalsh(K)
        diag = {"min_eig": float(eigs[0]), "max_eig": float(eigs[-1]),
                "cond": float(abs(eigs[-1] / eigs[0])) if eigs[0] != 0 else np.inf}
    except np.linalg.LinAlgError:
        diag = {}
    diag["max_jitter"] = jitters[-1]
    diag["size"] = p
    raise NumericalError("Cholesky failed at maximum jitter", diag)


def chol_solve(L, B):
    return linalg.cho_solve((L, True), B, check_finite=False)


def tri_solve(L, B, trans=False):
    return linalg.solve_triangular(L, B, lower=True, trans=1 if trans else 0, check_finite=False)


def chol_inverse(L):
    return chol_solve(L, np.eye(L.shape[0]))


def logdet_chol(L):
    return 2.0 * np.sum(np.log(np.diag(L)))
