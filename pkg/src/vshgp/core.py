"""Deterministic variational sparse heteroscedastic GP (collapsed bound).

The latent function f and the log noise variance g each get an independent
SE-ARD GP prior with their own inducing inputs (``Xm`` for f, ``Xu`` for g).
q(f_m) is integrated out analytically; q(g_u) is parameterized by a positive
diagonal ``Lambda`` whose log is ``lambda_log``.

Every product with the n x n marginal covariance ``Q^f_nn + R_g`` goes through
the Woodbury identity, so an evaluation costs O(n m^2 + n u^2).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .kernels import (
    KernelParams,
    accumulate_input_grad,
    kernel_diag,
    kernel_input_grads,
    kernel_matrix,
    kernel_param_grads,
)
from .linalg import NumericalError, chol_inverse, chol_jitter, logdet_chol, tri_solve

LOG2PI = np.log(2.0 * np.pi)

PARAM_BLOCKS = ("lambda", "kf", "kg", "mu0", "Xm", "Xu")

# Relative diagonal term on K_mm and K_uu. It is part of the model (its
# derivative is exact), and it bounds their condition number so that the
# K^-1 ... K^-1 products in the gradients keep their accuracy.
DEFAULT_NUGGET = 1e-6


def inducing_kernel(Z, kparams, nugget=DEFAULT_NUGGET):
    """K(Z, Z) + nugget * sigma^2 * I."""
    K = kernel_matrix(Z, Z, kparams)
    K[np.diag_indices_from(K)] += nugget * kparams.variance
    return K


@dataclass
class VshgpModel:
    X: np.ndarray
    y: np.ndarray
    kf: KernelParams
    kg: KernelParams
    mu0: float
    Xm: np.ndarray
    Xu: np.ndarray
    lambda_log: np.ndarray
    nugget: float = DEFAULT_NUGGET

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.Xm = np.atleast_2d(np.asarray(self.Xm, dtype=float))
        self.Xu = np.atleast_2d(np.asarray(self.Xu, dtype=float))
        self.lambda_log = np.asarray(self.lambda_log, dtype=float).ravel()
        self.mu0 = float(self.mu0)
        if not self.nugget >= 0:
            raise ValueError("nugget must be non-negative")
        n, d = self.X.shape
        if self.y.size != n or self.lambda_log.size != n:
            raise ValueError(f"X has {n} rows but y has {self.y.size} and lambda_log {self.lambda_log.size}")
        if self.Xm.shape[1] != d or self.Xu.shape[1] != d:
            raise ValueError("inducing inputs must have the same number of columns as X")
        if self.Xm.shape[0] > n or self.Xu.shape[0] > n:
            raise ValueError("inducing set larger than the training set")
        if self.kf.dim != d or self.kg.dim != d:
            raise ValueError("kernel lengthscales do not match input dimension")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    @property
    def m(self):
        return self.Xm.shape[0]

    @property
    def u(self):
        return self.Xu.shape[0]

    def copy(self):
        return replace(self, X=self.X.copy(), y=self.y.copy(), kf=self.kf.copy(), kg=self.kg.copy(),
                       Xm=self.Xm.copy(), Xu=self.Xu.copy(), lambda_log=self.lambda_log.copy())

    # parameter vector plumbing for the optimizers
    def block_sizes(self):
        return {"lambda": self.n, "kf": self.kf.size, "kg": self.kg.size, "mu0": 1,
                "Xm": self.Xm.size, "Xu": self.Xu.size}

    def get_params(self, blocks=PARAM_BLOCKS):
        parts = {"lambda": self.lambda_log, "kf": self.kf.to_vector(), "kg": self.kg.to_vector(),
                 "mu0": np.array([self.mu0]), "Xm": self.Xm.ravel(), "Xu": self.Xu.ravel()}
        return np.concatenate([parts[b] for b in blocks])

    def set_params(self, vec, blocks=PARAM_BLOCKS):
        sizes = self.block_sizes()
        pos = 0
        for b in blocks:
            chunk = np.asarray(vec[pos:pos + sizes[b]], dtype=float)
            pos += sizes[b]
            if b == "lambda":
                self.lambda_log = chunk.copy()
            elif b == "kf":
                self.kf = KernelParams.from_vector(chunk)
            elif b == "kg":
                self.kg = KernelParams.from_vector(chunk)
            elif b == "mu0":
                self.mu0 = float(chunk[0])
            elif b == "Xm":
                self.Xm = chunk.reshape(self.Xm.shape).copy()
            elif b == "Xu":
                self.Xu = chunk.reshape(self.Xu.shape).copy()
        if pos != len(vec):
            raise ValueError(f"parameter vector has {len(vec)} entries, blocks need {pos}")
        return self


def kmeans_centroids(X, k, rng):
    """Centroids from a short Lloyd run; used to place inducing inputs."""
    from .distributed import lloyd

    _, centroids = lloyd(X, k, rng)
    return centroids


def init_model(X, y, m, u, seed=0, lengthscale=1.0, signal_variance=1.0, Xm=None, Xu=None):
    """Default initialization: lambda = 0.5, mu0 = log(var(y)/2), inducing at k-means centroids."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, d = X.shape
    rng = np.random.default_rng(seed)
    if Xm is None:
        Xm = kmeans_centroids(X, min(m, n), rng)
    if Xu is None:
        Xu = kmeans_centroids(X, min(u, n), rng)
    var_y = float(np.var(y)) if n > 1 else 1.0
    mu0 = np.log(max(var_y, 1e-12) / 2.0)
    kf = KernelParams.from_natural(signal_variance, np.full(d, lengthscale))
    kg = KernelParams.from_natural(signal_variance, np.full(d, lengthscale))
    return VshgpModel(X, y, kf, kg, mu0, Xm, Xu, np.full(n, np.log(0.5)))


@dataclass
class ElboWorkspace:
    # g side
    Kuu: np.ndarray
    Lu: np.ndarray
    Knu: np.ndarray
    Au: np.ndarray            # Lu^-1 K_un
    Q_g_diag: np.ndarray
    lam: np.ndarray           # diag(Lambda_nn)
    LBg: np.ndarray           # chol(I + Au Lambda Au^T); K_Lambda = Lu (.) Lu^T
    Ug: np.ndarray            # rows give K_nu K_Lambda^-1 K_un = Ug Ug^T
    gamma_u: np.ndarray
    mu_u: np.ndarray
    Sigma_u: np.ndarray
    mu_g: np.ndarray
    Sigma_g_diag: np.ndarray
    kl: float
    # f side
    R_g_diag: np.ndarray
    Kmm: np.ndarray
    Lm: np.ndarray
    Knm: np.ndarray
    Af: np.ndarray            # Lm^-1 K_mn
    Q_f_diag: np.ndarray
    LBf: np.ndarray           # chol(I + Af R^-1 Af^T); K_R = Lm (.) Lm^T
    cf: np.ndarray            # LBf^-1 Af R^-1 y
    beta_n: np.ndarray
    Sigma_y_inv_diag: np.ndarray
    Lambda_a_diag: np.ndarray
    Lambda_b_diag: np.ndarray
    log_term: float
    jitter: dict = field(default_factory=dict)

    @property
    def Lambda_ab_diag(self):
        return self.Lambda_a_diag + self.Lambda_b_diag

    @property
    def Omega_f(self):
        return tri_solve(self.Lm, self.Af, trans=True).T

    @property
    def Omega_g(self):
        return tri_solve(self.Lu, self.Au, trans=True).T

    @property
    def K_R(self):
        B = self.LBf @ self.LBf.T
        return self.Lm @ B @ self.Lm.T

    @property
    def K_Lambda(self):
        B = self.LBg @ self.LBg.T
        return self.Lu @ B @ self.Lu.T


def _g_side(model):
    kg = model.kg
    Kuu = inducing_kernel(model.Xu, kg, model.nugget)
    Lu, jit_u = chol_jitter(Kuu)
    Kuu = Kuu + jit_u * np.eye(model.u)
    Knu = kernel_matrix(model.X, model.Xu, kg)
    Au = tri_solve(Lu, Knu.T)
    qg = np.sum(Au * Au, axis=0)
    lam = np.exp(model.lambda_log)
    a = lam - 0.5
    Bg = np.eye(model.u) + (Au * lam) @ Au.T
    LBg, _ = chol_jitter(Bg)
    Aua = Au @ a
    gamma_u = tri_solve(Lu, Aua, trans=True)
    mu_u = Lu @ Aua + model.mu0
    mu_g = Au.T @ Aua + model.mu0
    Ug = tri_solve(LBg, Au).T
    Sigma_g = kernel_diag(model.X, kg) - qg + np.sum(Ug * Ug, axis=1)
    LBinv = tri_solve(LBg, np.eye(model.u))
    Sigma_u = Lu @ (LBinv.T @ LBinv) @ Lu.T
    Sigma_u = 0.5 * (Sigma_u + Sigma_u.T)
    kl = 0.5 * (np.sum(LBinv * LBinv) + Aua @ Aua - model.u + logdet_chol(LBg))
    return dict(Kuu=Kuu, Lu=Lu, Knu=Knu, Au=Au, Q_g_diag=qg, lam=lam, LBg=LBg, Ug=Ug,
                gamma_u=gamma_u, mu_u=mu_u, Sigma_u=Sigma_u, mu_g=mu_g, Sigma_g_diag=Sigma_g,
                kl=kl), jit_u


def _f_side(model, mu_g, Sigma_g):
    n = model.n
    y = model.y
    expo = mu_g - 0.5 * Sigma_g
    if np.max(expo) > 700:
        raise NumericalError("noise model diverged: exp overflow in R_g", {"max_exponent": float(np.max(expo))})
    r = np.exp(expo)
    kf = model.kf
    Kmm = inducing_kernel(model.Xm, kf, model.nugget)
    Lm, jit_m = chol_jitter(Kmm)
    Kmm = Kmm + jit_m * np.eye(model.m)
    Knm = kernel_matrix(model.X, model.Xm, kf)
    A = tri_solve(Lm, Knm.T)
    qf = np.sum(A * A, axis=0)
    Ar = A / np.sqrt(r)
    LB, _ = chol_jitter(np.eye(model.m) + Ar @ Ar.T)
    b = A @ (y / r)
    c = tri_solve(LB, b)
    logdet = logdet_chol(LB) + np.sum(np.log(r))
    quad = np.sum(y * y / r) - c @ c
    log_term = -0.5 * (n * LOG2PI + logdet + quad)
    beta = y / r - (A.T @ tri_solve(LB, c, trans=True)) / r
    C = tri_solve(LB, A)
    Sy_inv_diag = (1.0 - np.sum(C * C, axis=0) / r) / r
    kdf = kernel_diag(model.X, kf)
    lam_a = (beta * beta - Sy_inv_diag) * r
    lam_b = (kdf - qf) / r
    return dict(R_g_diag=r, Kmm=Kmm, Lm=Lm, Knm=Knm, Af=A, Q_f_diag=qf, LBf=LB, cf=c, beta_n=beta,
                Sigma_y_inv_diag=Sy_inv_diag, Lambda_a_diag=lam_a, Lambda_b_diag=lam_b,
                log_term=log_term), jit_m


def build_workspace(model: VshgpModel) -> ElboWorkspace:
    g, jit_u = _g_side(model)
    f, jit_m = _f_side(model, g["mu_g"], g["Sigma_g_diag"])
    return ElboWorkspace(**g, **f, jitter={"Kuu": jit_u, "Kmm": jit_m})


@dataclass
class ElboTerms:
    """Collapsed bound and its additive pieces (penalties already signed)."""

    total: float
    log_term: float
    trace_g: float
    trace_f: float
    kl: float

    def __float__(self):
        return float(self.total)


def _terms(log_term, Sigma_g, kdf, qf, r, kl):
    trace_g = -0.25 * np.sum(Sigma_g)
    trace_f = -0.5 * np.sum((kdf - qf) / r)
    total = log_term + trace_g + trace_f - kl
    return ElboTerms(total, log_term, trace_g, trace_f, -kl)


def elbo(model: VshgpModel, ws: ElboWorkspace | None = None) -> ElboTerms:
    if ws is None:
        ws = build_workspace(model)
    kdf = kernel_diag(model.X, model.kf)
    return _terms(ws.log_term, ws.Sigma_g_diag, kdf, ws.Q_f_diag, ws.R_g_diag, ws.kl)


def gauss_kl(mean_diff, S, K):
    """KL(N(mu, S) || N(mu_prior, K)) with ``mean_diff = mu - mu_prior``."""
    LK, _ = chol_jitter(K)
    LS, _ = chol_jitter(S)
    M = tri_solve(LK, LS)
    alpha = tri_solve(LK, mean_diff)
    return 0.5 * (np.sum(M * M) + alpha @ alpha - K.shape[0] + logdet_chol(LK) - logdet_chol(LS))


def elbo_given_qg(model: VshgpModel, mu_u, Sigma_u) -> ElboTerms:
    """The collapsed bound for an arbitrary Gaussian q(g_u) = N(mu_u, Sigma_u)."""
    kg = model.kg
    Kuu = inducing_kernel(model.Xu, kg, model.nugget)
    Lu, jit = chol_jitter(Kuu)
    Kuu = Kuu + jit * np.eye(model.u)
    Knu = kernel_matrix(model.X, model.Xu, kg)
    Omega = tri_solve(Lu, tri_solve(Lu, Knu.T), trans=True).T
    mu_g = Omega @ (mu_u - model.mu0) + model.mu0
    Sigma_g = (kernel_diag(model.X, kg) - np.sum(Omega * Knu, axis=1)
               + np.sum((Omega @ Sigma_u) * Omega, axis=1))
    kl = gauss_kl(mu_u - model.mu0, Sigma_u, Kuu)
    f, _ = _f_side(model, mu_g, Sigma_g)
    kdf = kernel_diag(model.X, model.kf)
    return _terms(f["log_term"], Sigma_g, kdf, f["Q_f_diag"], f["R_g_diag"], kl)


def lambda_reconstruction(ws: ElboWorkspace):
    """0.5 (Lambda^a + Lambda^b + I): the stationary Lambda implied by the current state."""
    return 0.5 * (ws.Lambda_a_diag + ws.Lambda_b_diag + 1.0)


@dataclass
class ElboGrads:
    lambda_log: np.ndarray
    kf: np.ndarray
    kg: np.ndarray
    mu0: float
    Xm: np.ndarray
    Xu: np.ndarray

    def to_vector(self, blocks=PARAM_BLOCKS):
        parts = {"lambda": self.lambda_log, "kf": self.kf, "kg": self.kg,
                 "mu0": np.array([self.mu0]), "Xm": self.Xm.ravel(), "Xu": self.Xu.ravel()}
        return np.concatenate([parts[b] for b in blocks])


def _hadamard_square_matvec(U, v):
    """(B o B) v for B = U U^T without forming B."""
    W = U.T @ (U * v[:, None])
    return np.sum((U @ W) * U, axis=1)


def _kernel_block_grads(kparams, X, Z, Kn, kd_adj, Kn_adj, Kzz_adj, nugget=DEFAULT_NUGGET):
    """Chain adjoints of K(X, Z), K(Z, Z) and diag K(X, X) to kernel and Z gradients."""
    Kzz_raw = kernel_matrix(Z, Z, kparams)
    dKn = kernel_param_grads(X, Z, kparams, K=Kn)
    dKzz = kernel_param_grads(Z, Z, kparams, K=Kzz_raw)
    theta = np.einsum("kij,ij->k", dKn, Kn_adj) + np.einsum("kij,ij->k", dKzz, Kzz_adj)
    # diag K(X, X) = sigma^2: only the log-variance entry moves it
    theta[0] += (np.sum(kd_adj) + nugget * np.trace(Kzz_adj)) * kparams.variance
    gZ = accumulate_input_grad(kernel_input_grads(X, Z, kparams, "B", K=Kn), Kn_adj, "B")
    gZ += accumulate_input_grad(kernel_input_grads(Z, Z, kparams, "A", K=Kzz_raw), Kzz_adj + Kzz_adj.T, "A")
    return theta, gZ


def f_adjoints(model, ws):
    """Adjoints of the bound w.r.t. K^f_nm, K^f_mm and diag K^f_nn."""
    r = ws.R_g_diag
    m = model.m
    Lm_inv = tri_solve(ws.Lm, np.eye(m))
    LB_inv = tri_solve(ws.LBf, np.eye(m))
    B_inv = LB_inv.T @ LB_inv
    Omega = ws.Af.T @ Lm_inv
    Ob = Omega.T @ ws.beta_n
    # G = 0.5 (beta beta^T - Sigma_y^-1 + R^-1) is the adjoint of Q^f_nn
    G_Omega = 0.5 * (np.outer(ws.beta_n, Ob) + (ws.Af.T / r[:, None]) @ ((np.eye(m) - B_inv) @ Lm_inv))
    Knm_adj = 2.0 * G_Omega
    Kmm_adj = -Omega.T @ G_Omega
    kd_adj = -0.5 / r
    return Knm_adj, 0.5 * (Kmm_adj + Kmm_adj.T), kd_adj


def g_adjoints(model, ws):
    """Adjoints of the bound w.r.t. K^g_nu, K^g_uu and diag K^g_nn."""
    u = model.u
    lam = ws.lam
    a = lam - 0.5
    lab = ws.Lambda_ab_diag
    g_mu = 0.5 * lab
    g_s = -0.25 * (lab + 1.0)
    Kn = ws.Knu
    Kinv = chol_inverse(ws.Lu)
    Lu_inv = tri_solve(ws.Lu, np.eye(u))
    LB_inv = tri_solve(ws.LBg, np.eye(u))
    KLinv = Lu_inv.T @ (LB_inv.T @ LB_inv) @ Lu_inv
    c = ws.gamma_u
    e = Kinv @ (Kn.T @ g_mu)
    P = Kn @ Kinv
    PL = Kn @ KLinv
    W = -PL.T @ (PL * g_s[:, None])
    Z = -0.5 * (KLinv - KLinv @ ws.Kuu @ KLinv)
    S = W + Z
    Kn_adj = (np.outer(g_mu, c) + np.outer(a, e) - 2.0 * P * g_s[:, None] + 2.0 * PL * g_s[:, None]
              - np.outer(a, c) + 2.0 * (Kn * lam[:, None]) @ S)
    K_adj = -np.outer(e, c) + P.T @ (P * g_s[:, None]) + S - 0.5 * (KLinv - np.outer(c, c) - Kinv)
    return Kn_adj, 0.5 * (K_adj + K_adj.T), g_s


def elbo_grads(model: VshgpModel, ws: ElboWorkspace | None = None) -> ElboGrads:
    if ws is None:
        ws = build_workspace(model)
    lam = ws.lam
    lab = ws.Lambda_ab_diag
    Au = ws.Au
    Qg_lab = Au.T @ (Au @ lab)
    A_vec = _hadamard_square_matvec(ws.Ug, 0.25 * lab + 0.25 - 0.5 * lam)
    d_lam = 0.5 * Qg_lab + A_vec - (ws.mu_g - model.mu0)
    g_lambda = lam * d_lam
    g_mu0 = 0.5 * np.sum(lab)

    Knm_adj, Kmm_adj, kdf_adj = f_adjoints(model, ws)
    g_kf, g_Xm = _kernel_block_grads(model.kf, model.X, model.Xm, ws.Knm,
                                     kdf_adj, Knm_adj, Kmm_adj, model.nugget)
    Knu_adj, Kuu_adj, kdg_adj = g_adjoints(model, ws)
    g_kg, g_Xu = _kernel_block_grads(model.kg, model.X, model.Xu, ws.Knu,
                                     kdg_adj, Knu_adj, Kuu_adj, model.nugget)
    return ElboGrads(g_lambda, g_kf, g_kg, float(g_mu0), g_Xm, g_Xu)


def posterior_fm(model: VshgpModel, ws: ElboWorkspace | None = None):
    """Optimal q(f_m) = N(mu, Sigma) given the current q(g_u)."""
    if ws is None:
        ws = build_workspace(model)
    LB_inv = tri_solve(ws.LBf, np.eye(model.m))
    B_inv = LB_inv.T @ LB_inv
    mu = ws.Lm @ tri_solve(ws.LBf, ws.cf, trans=True)
    Sigma = ws.Lm @ B_inv @ ws.Lm.T
    return mu, 0.5 * (Sigma + Sigma.T)


@dataclass
class LatentPrediction:
    mu_f: np.ndarray
    var_f: np.ndarray
    mu_g: np.ndarray
    var_g: np.ndarray

    def __len__(self):
        return self.mu_f.size


def predict_latent(model: VshgpModel, Xstar, ws: ElboWorkspace | None = None) -> LatentPrediction:
    if ws is None:
        ws = build_workspace(model)
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    if Xstar.shape[1] != model.d:
        raise ValueError(f"test inputs have {Xstar.shape[1]} columns, model expects {model.d}")
    Ksm = kernel_matrix(Xstar, model.Xm, model.kf)
    Vm = tri_solve(ws.Lm, Ksm.T)
    Wm = tri_solve(ws.LBf, Vm)
    mu_f = Wm.T @ ws.cf
    var_f = kernel_diag(Xstar, model.kf) - np.sum(Vm * Vm, axis=0) + np.sum(Wm * Wm, axis=0)

    Ksu = kernel_matrix(Xstar, model.Xu, model.kg)
    Vu = tri_solve(ws.Lu, Ksu.T)
    Wu = tri_solve(ws.LBg, Vu)
    mu_g = Ksu @ ws.gamma_u + model.mu0
    var_g = kernel_diag(Xstar, model.kg) - np.sum(Vu * Vu, axis=0) + np.sum(Wu * Wu, axis=0)
    tiny = 1e-300
    return LatentPrediction(mu_f, np.maximum(var_f, tiny), mu_g, np.maximum(var_g, tiny))


def predict(model: VshgpModel, Xstar, ws=None):
    """Latent prediction plus the combined mean and variance of y*."""
    from .predictive import predict_y

    latent = predict_latent(model, Xstar, ws)
    mu, var = predict_y(latent)
    return latent, mu, var


def objective(model: VshgpModel, blocks=PARAM_BLOCKS):
    """Closure returning (F_V, gradient) for a parameter vector over ``blocks``.

    Evaluations are done on a private copy; ``model`` itself is not touched.
    """
    work = model.copy()

    def fun(vec):
        work.set_params(vec, blocks)
        ws = build_workspace(work)
        return elbo(work, ws).total, elbo_grads(work, ws).to_vector(blocks)

    return fun


def train_vshgp(model: VshgpModel, budget=100, variational_budget=0, c1=1e-4, c2=0.9):
    """CGD training. An optional first stage moves only lambda_log.

    Returns ``(trained_copy, trace)`` where trace lists F_V after every
    accepted line search across both stages.
    """
    from .optim import cgd_maximize

    model = model.copy()
    trace = []
    stages = [(("lambda",), variational_budget), (PARAM_BLOCKS, budget)]
    for blocks, n_search in stages:
        if n_search <= 0:
            continue
        res = cgd_maximize(objective(model, blocks), model.get_params(blocks), n_search, c1, c2)
        model.set_params(res.x, blocks)
        trace.extend(res.trace if not trace else res.trace[1:])
    return model, trace
