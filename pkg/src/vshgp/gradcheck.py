"""Central finite-difference checks for every analytic gradient block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PARAM_BLOCKS, elbo, elbo_grads, init_model
from .stochastic import (
    HYPER_BLOCKS,
    ExplicitVariational,
    elbo_factorized,
    euclidean_grads_q,
    hyper_grads,
)

Q_BLOCKS = ("mu_m", "Sigma_m", "mu_u", "Sigma_u")


@dataclass
class CheckResult:
    suite: str
    block: str
    seed: int
    rel_error: float
    passed: bool

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.suite:<8} {self.block:<8} seed={self.seed:<3d} rel_err={self.rel_error:.2e}"


def rel_error(analytic, numeric):
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)


def fd_gradient(fun, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2.0 * h)
    return g


def random_instance(seed, n=10, m=3, u=3, d=2):
    """Small model away from its initialization, so no gradient vanishes by symmetry."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = np.sin(X[:, 0]) + 0.3 * rng.normal(size=n)
    model = init_model(X, y, m, u, seed=seed, lengthscale=1.5)
    model.lambda_log = np.log(0.5) + 0.5 * rng.normal(size=n)
    model.kf = type(model.kf).from_vector(model.kf.to_vector() + 0.2 * rng.normal(size=1 + d))
    model.kg = type(model.kg).from_vector(model.kg.to_vector() + 0.2 * rng.normal(size=1 + d))
    model.mu0 += 0.3 * rng.normal()
    model.Xm = model.Xm + 0.1 * rng.normal(size=model.Xm.shape)
    model.Xu = model.Xu + 0.1 * rng.normal(size=model.Xu.shape)
    return model, rng


def random_q(model, rng):
    q = ExplicitVariational.prior(model)
    A = 0.3 * rng.normal(size=(model.m, model.m))
    B = 0.3 * rng.normal(size=(model.u, model.u))
    return ExplicitVariational.from_moments(0.5 * rng.normal(size=model.m), q.Sigma_m + A @ A.T,
                                            q.mu_u + 0.3 * rng.normal(size=model.u), q.Sigma_u + B @ B.T)


def check_vshgp(seed, tol=1e-4, grads_fn=elbo_grads):
    model, _ = random_instance(seed)
    analytic = grads_fn(model)
    out = []
    for block in PARAM_BLOCKS:
        x0 = model.get_params((block,))

        def f(x, block=block):
            return elbo(model.copy().set_params(x, (block,))).total

        err = rel_error(analytic.to_vector((block,)), fd_gradient(f, x0))
        out.append(CheckResult("vshgp", block, seed, err, err <= tol))
    return out


def _q_fun(model, q, block, batch):
    attr = {"mu_m": "mu_m", "mu_u": "mu_u"}.get(block)
    if attr:
        def f(x):
            qq = q.copy()
            setattr(qq, attr, x)
            return elbo_factorized(model, qq, batch)
        return f, getattr(q, attr).copy()
    Sig = q.Sigma_m if block == "Sigma_m" else q.Sigma_u
    k = Sig.shape[0]
    iu = np.triu_indices(k)

    def f(x):
        S = np.zeros((k, k))
        S[iu] = x
        S = S + np.triu(S, 1).T
        qq = q.copy()
        L = np.linalg.cholesky(S)
        if block == "Sigma_m":
            qq.L_m = L
        else:
            qq.L_u = L
        return elbo_factorized(model, qq, batch)
    return f, Sig[iu]


def check_svshgp(seed, tol=1e-4, q_grads_fn=euclidean_grads_q, hyper_grads_fn=hyper_grads):
    model, rng = random_instance(seed)
    q = random_q(model, rng)
    batch = np.sort(rng.choice(model.n, size=model.n // 2, replace=False))
    full = np.arange(model.n)
    out = []
    gq = q_grads_fn(model, q, full)
    for block, g in zip(Q_BLOCKS, gq):
        f, x0 = _q_fun(model, q, block, full)
        num = fd_gradient(f, x0)
        if block.startswith("Sigma"):
            # a symmetric perturbation of entry (i, j), i != j, moves both G_ij and G_ji
            iu = np.triu_indices(g.shape[0])
            g = np.where(iu[0] == iu[1], 1.0, 2.0) * g[iu]
        err = rel_error(g, num)
        out.append(CheckResult("svshgp", block, seed, err, err <= tol))
    gh = hyper_grads_fn(model, q, batch)
    for block in HYPER_BLOCKS:
        x0 = model.get_params((block,))

        def f(x, block=block):
            return elbo_factorized(model.copy().set_params(x, (block,)), q, batch)

        err = rel_error(gh.to_vector((block,)), fd_gradient(f, x0))
        out.append(CheckResult("svshgp", block, seed, err, err <= tol))
    return out


def run_checks(seeds=range(20), tol=1e-4, **fns):
    """All suites over ``seeds``. Keyword arguments replace the analytic gradient
    functions (``grads_fn``, ``q_grads_fn``, ``hyper_grads_fn``)."""
    results = []
    for s in seeds:
        results += check_vshgp(s, tol, **{k: v for k, v in fns.items() if k == "grads_fn"})
        results += check_svshgp(s, tol, **{k: v for k, v in fns.items() if k != "grads_fn"})
    return results
