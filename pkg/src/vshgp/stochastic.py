"""Stochastic VSHGP: explicit Gaussians q(f_m), q(g_u) and a mini-batch bound.

The uncollapsed bound factorizes over data points,

    F = sum_i E_q[log p(y_i | f_i, g_i)] - KL[q(f_m) || p(f_m)] - KL[q(g_u) || p(g_u)],

so the data term is estimated without bias from a batch B scaled by n/|B|.
Both variational Gaussians are updated with natural-gradient steps; kernel
parameters, mu0 and inducing inputs take Adam steps on the same estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import time

import numpy as np
from scipy.linalg import cho_solve

from .core import (
    DEFAULT_NUGGET,
    LOG2PI,
    LatentPrediction,
    VshgpModel,
    _kernel_block_grads,
    posterior_fm,
    build_workspace,
    inducing_kernel,
)
from .kernels import kernel_diag, kernel_matrix
from .linalg import NumericalError, chol_jitter, logdet_chol, tri_solve
from .optim import AdamState, adam_step, gamma_schedule

HYPER_BLOCKS = ("kf", "kg", "mu0", "Xm", "Xu")


@dataclass
class ExplicitVariational:
    """q(f_m) = N(mu_m, L_m L_m^T), q(g_u) = N(mu_u, L_u L_u^T)."""

    mu_m: np.ndarray
    L_m: np.ndarray
    mu_u: np.ndarray
    L_u: np.ndarray

    def __post_init__(self):
        for name in ("L_m", "L_u"):
            L = np.asarray(getattr(self, name), dtype=float)
            if L.ndim != 2 or L.shape[0] != L.shape[1] or np.any(np.diag(L) <= 0):
                raise ValueError(f"{name} must be a lower Cholesky factor with positive diagonal")
            setattr(self, name, np.tril(L))
        self.mu_m = np.asarray(self.mu_m, dtype=float).ravel()
        self.mu_u = np.asarray(self.mu_u, dtype=float).ravel()

    @property
    def Sigma_m(self):
        return self.L_m @ self.L_m.T

    @property
    def Sigma_u(self):
        return self.L_u @ self.L_u.T

    def copy(self):
        return ExplicitVariational(self.mu_m.copy(), self.L_m.copy(), self.mu_u.copy(), self.L_u.copy())

    @classmethod
    def from_moments(cls, mu_m, Sigma_m, mu_u, Sigma_u):
        return cls(mu_m, _chol(Sigma_m), mu_u, _chol(Sigma_u))

    @classmethod
    def prior(cls, model: VshgpModel):
        """Prior match: both KL terms start at zero."""
        Kmm = inducing_kernel(model.Xm, model.kf, model.nugget)
        Kuu = inducing_kernel(model.Xu, model.kg, model.nugget)
        return cls(np.zeros(model.m), chol_jitter(Kmm)[0], np.full(model.u, model.mu0), chol_jitter(Kuu)[0])

    @classmethod
    def from_collapsed(cls, model: VshgpModel):
        """q(g_u) from the model's Lambda and the matching optimal q(f_m)."""
        ws = build_workspace(model)
        mu_m, Sigma_m = posterior_fm(model, ws)
        return cls.from_moments(mu_m, Sigma_m, ws.mu_u, ws.Sigma_u)


def _chol(S):
    S = 0.5 * (S + S.T)
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise NumericalError("covariance is not positive definite",
                             {"min_eig": float(np.linalg.eigvalsh(S)[0])}) from None


@dataclass
class NaturalParams:
    theta1: np.ndarray
    Theta2: np.ndarray
    psi1: np.ndarray
    Psi2: np.ndarray

    @classmethod
    def from_moments(cls, mu, Sigma):
        L = _chol(Sigma)
        P = cho_solve((L, True), np.eye(mu.size))
        return cls(P @ mu, -0.5 * P, mu.copy(), np.outer(mu, mu) + Sigma)


@dataclass
class QGrads:
    mu_m: np.ndarray
    Sigma_m: np.ndarray
    mu_u: np.ndarray
    Sigma_u: np.ndarray

    def __iter__(self):
        return iter((self.mu_m, self.Sigma_m, self.mu_u, self.Sigma_u))


@dataclass
class HyperGrads:
    kf: np.ndarray
    kg: np.ndarray
    mu0: float
    Xm: np.ndarray
    Xu: np.ndarray

    def to_vector(self, blocks=HYPER_BLOCKS):
        parts = {"kf": self.kf, "kg": self.kg, "mu0": np.array([self.mu0]),
                 "Xm": self.Xm.ravel(), "Xu": self.Xu.ravel()}
        return np.concatenate([parts[b] for b in blocks])


def _check_batch(model, batch):
    batch = np.asarray(batch, dtype=int).ravel()
    if batch.size == 0:
        raise ValueError("batch must be non-empty")
    if batch.min() < 0 or batch.max() >= model.n:
        raise ValueError(f"batch indices must lie in [0, {model.n})")
    return batch


class _Projection:
    """Marginals of a sparse projection q(h_B) with q(h_Z) = N(mu, S):

    mean_i = [K_BZ K^-1 (mu - offset)]_i + offset,
    var_i  = k_ii - [K_BZ K^-1 K_ZB]_ii + [K_BZ K^-1 S K^-1 K_ZB]_ii.
    """

    def __init__(self, kparams, XB, Z, mu, L_S, offset=0.0, nugget=DEFAULT_NUGGET):
        self.K = inducing_kernel(Z, kparams, nugget)
        self.LK, jit = chol_jitter(self.K)
        self.K = self.K + jit * np.eye(Z.shape[0])
        self.jitter = jit
        self.Kn = kernel_matrix(XB, Z, kparams)
        self.kd = kernel_diag(XB, kparams)
        self.Omega = cho_solve((self.LK, True), self.Kn.T).T
        self.v = mu - offset
        self.alpha = cho_solve((self.LK, True), self.v)
        self.L_S = L_S
        OL = self.Omega @ L_S
        self.mean = self.Omega @ self.v + offset
        self.var = self.kd - np.sum(self.Omega * self.Kn, axis=1) + np.sum(OL * OL, axis=1)

    def kl(self):
        M = tri_solve(self.LK, self.L_S)
        a = tri_solve(self.LK, self.v)
        return 0.5 * (np.sum(M * M) + a @ a - self.K.shape[0] + logdet_chol(self.LK) - logdet_chol(self.L_S))

    def moment_grads(self, mean_adj, var_adj):
        """dF/dmu and dF/dS of sum(mean_adj * mean + var_adj * var) - KL."""
        Kinv = cho_solve((self.LK, True), np.eye(self.K.shape[0]))
        Sinv = cho_solve((self.L_S, True), np.eye(self.K.shape[0]))
        g_mu = self.Omega.T @ mean_adj - self.alpha
        g_S = self.Omega.T @ (self.Omega * var_adj[:, None]) - 0.5 * (Kinv - Sinv)
        return g_mu, 0.5 * (g_S + g_S.T)

    def kernel_adjoints(self, mean_adj, var_adj):
        """Adjoints on (K_BZ, K_ZZ, diag k) of the same objective, q held fixed."""
        n_z = self.K.shape[0]
        Kinv = cho_solve((self.LK, True), np.eye(n_z))
        S = self.L_S @ self.L_S.T
        KSK = Kinv @ S @ Kinv
        # mean term
        eps = Kinv @ (self.Kn.T @ mean_adj)
        Kn_adj = np.outer(mean_adj, self.alpha)
        K_adj = -np.outer(eps, self.alpha)
        # variance term, M = K^-1 S K^-1 - K^-1
        M = KSK - Kinv
        Kn_adj += 2.0 * (self.Kn * var_adj[:, None]) @ M
        Mbar = self.Kn.T @ (self.Kn * var_adj[:, None])
        KMK = Kinv @ Mbar @ Kinv
        K_adj += -KMK @ S @ Kinv - KSK @ Mbar @ Kinv + KMK
        # -KL
        K_adj -= 0.5 * (-KSK - np.outer(self.alpha, self.alpha) + Kinv)
        return Kn_adj, 0.5 * (K_adj + K_adj.T), var_adj, eps


@dataclass
class _Eval:
    value: float
    data_term: float
    kl_f: float
    kl_g: float
    pf: _Projection
    pg: _Projection
    a_mf: np.ndarray
    a_vf: np.ndarray
    a_mg: np.ndarray
    a_vg: np.ndarray
    batch: np.ndarray


def _evaluate(model: VshgpModel, q: ExplicitVariational, batch):
    batch = _check_batch(model, batch)
    XB, yB = model.X[batch], model.y[batch]
    scale = model.n / batch.size
    pf = _Projection(model.kf, XB, model.Xm, q.mu_m, q.L_m, nugget=model.nugget)
    pg = _Projection(model.kg, XB, model.Xu, q.mu_u, q.L_u, offset=model.mu0, nugget=model.nugget)
    expo = pg.mean - 0.5 * pg.var
    if np.max(expo) > 700:
        raise NumericalError("noise model diverged: exp overflow in R_g", {"max_exponent": float(np.max(expo))})
    r = np.exp(expo)
    e = (yB - pf.mean) ** 2 + pf.var
    data = scale * np.sum(-0.5 * LOG2PI - 0.5 * pg.mean - 0.5 * e / r)
    kl_f, kl_g = pf.kl(), pg.kl()
    return _Eval(data - kl_f - kl_g, data, kl_f, kl_g, pf, pg,
                 scale * (yB - pf.mean) / r, -0.5 * scale / r,
                 scale * (-0.5 + 0.5 * e / r), -0.25 * scale * e / r, batch)


def elbo_factorized(model: VshgpModel, q: ExplicitVariational, batch=None) -> float:
    """Unbiased estimate of the uncollapsed bound from the rows in ``batch`` (all rows if None)."""
    if batch is None:
        batch = np.arange(model.n)
    return float(_evaluate(model, q, batch).value)


def euclidean_grads_q(model: VshgpModel, q: ExplicitVariational, batch=None, ev=None) -> QGrads:
    """(dF/dmu_m, dF/dSigma_m, dF/dmu_u, dF/dSigma_u) of the batch estimate."""
    if ev is None:
        ev = _evaluate(model, q, np.arange(model.n) if batch is None else batch)
    gm, gS = ev.pf.moment_grads(ev.a_mf, ev.a_vf)
    gu, gU = ev.pg.moment_grads(ev.a_mg, ev.a_vg)
    return QGrads(gm, gS, gu, gU)


def hyper_grads(model: VshgpModel, q: ExplicitVariational, batch=None, ev=None) -> HyperGrads:
    """Gradients of the batch estimate w.r.t. kernels, mu0 and inducing inputs with q fixed."""
    if ev is None:
        ev = _evaluate(model, q, np.arange(model.n) if batch is None else batch)
    XB = model.X[ev.batch]
    Kn_adj, K_adj, kd_adj, _ = ev.pf.kernel_adjoints(ev.a_mf, ev.a_vf)
    g_kf, g_Xm = _kernel_block_grads(model.kf, XB, model.Xm, ev.pf.Kn, kd_adj, Kn_adj, K_adj, model.nugget)
    Kn_adj, K_adj, kd_adj, _ = ev.pg.kernel_adjoints(ev.a_mg, ev.a_vg)
    g_kg, g_Xu = _kernel_block_grads(model.kg, XB, model.Xu, ev.pg.Kn, kd_adj, Kn_adj, K_adj, model.nugget)
    # mu0 enters the g mean as (1 - Omega 1) mu0 and the g-side KL through mu_u - mu0
    g_mu0 = ev.a_mg @ (1.0 - ev.pg.Omega.sum(axis=1)) + ev.pg.alpha.sum()
    return HyperGrads(g_kf, g_kg, float(g_mu0), g_Xm, g_Xu)


def _natural_block(mu, L, g_mu, g_S, gamma):
    n = mu.size
    P = cho_solve((L, True), np.eye(n))
    theta1 = P @ mu + gamma * (g_mu - 2.0 * g_S @ mu)
    Theta2 = -0.5 * P + gamma * g_S
    prec = -2.0 * 0.5 * (Theta2 + Theta2.T)
    Lp = np.linalg.cholesky(prec)          # raises LinAlgError if the step is infeasible
    Lp_inv = tri_solve(Lp, np.eye(n))
    Sigma = Lp_inv.T @ Lp_inv
    L_new = np.linalg.cholesky(0.5 * (Sigma + Sigma.T))
    return Sigma @ theta1, L_new


def natural_step(q: ExplicitVariational, grads: QGrads, gamma, blocks=("f", "g"), max_halvings=10):
    """Natural-gradient ascent step on the chosen variational blocks.

    An infeasible step (covariance not positive definite) is retried with
    gamma halved, at most ``max_halvings`` times per block.
    """
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    out = q.copy()
    spec = {"f": ("mu_m", "L_m", grads.mu_m, grads.Sigma_m), "g": ("mu_u", "L_u", grads.mu_u, grads.Sigma_u)}
    for b in blocks:
        mu_name, L_name, g_mu, g_S = spec[b]
        step = gamma
        for attempt in range(max_halvings + 1):
            try:
                mu, L = _natural_block(getattr(q, mu_name), getattr(q, L_name), g_mu, g_S, step)
                if np.all(np.isfinite(mu)) and np.all(np.isfinite(L)):
                    break
            except np.linalg.LinAlgError:
                pass
            step *= 0.5
        else:
            raise NumericalError(f"natural step on the {b}-block infeasible after {max_halvings} halvings",
                                 {"block": b, "gamma": gamma})
        setattr(out, mu_name, mu)
        setattr(out, L_name, L)
    return out


# -------------------------------------------------------------------- training

@dataclass
class SvshgpConfig:
    batch_size: int = 50
    iterations: int = 1000
    gamma_initial: float = 1e-4
    gamma_final: float = 0.1
    ramp_iterations: int = 5
    adam_step: float = 0.01
    seed: int = 0
    method: str = "ngd+adam"        # or "adam": Adam on everything, q through Cholesky factors
    ngd_blocks: tuple = ("f", "g")
    train_hypers: bool = True
    eval_every: int = 0             # full-batch F every k iterations (0: never)
    guard_window: int = 100

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.method not in ("ngd+adam", "adam"):
            raise ValueError(f"unknown method {self.method!r}")


class EpochSampler:
    """Batches drawn uniformly without replacement within each epoch."""

    def __init__(self, n, batch_size, rng):
        self.n = n
        self.size = min(batch_size, n)
        self.rng = rng
        self._perm = np.zeros(0, dtype=int)

    def next(self):
        if self._perm.size < self.size:
            self._perm = np.concatenate([self._perm, self.rng.permutation(self.n)])
        b, self._perm = self._perm[:self.size], self._perm[self.size:]
        return np.sort(b)


@dataclass
class SvshgpModel:
    model: VshgpModel
    q: ExplicitVariational

    def copy(self):
        return SvshgpModel(self.model.copy(), self.q.copy())


@dataclass
class SvshgpResult:
    state: SvshgpModel
    trace: list = field(default_factory=list)            # (iteration, stochastic F, wall time)
    full_trace: list = field(default_factory=list)       # (iteration, full-batch F)


def _hyper_vector(model):
    return model.get_params(HYPER_BLOCKS)


def _q_vector(q):
    il_m, il_u = np.tril_indices(q.mu_m.size), np.tril_indices(q.mu_u.size)
    return np.concatenate([q.mu_m, q.L_m[il_m], q.mu_u, q.L_u[il_u]])


def _q_from_vector(vec, m, u):
    il_m, il_u = np.tril_indices(m), np.tril_indices(u)
    pos = 0
    out = []
    for size, il in ((m, il_m), (u, il_u)):
        mu = vec[pos:pos + size]
        pos += size
        L = np.zeros((size, size))
        L[il] = vec[pos:pos + il[0].size]
        pos += il[0].size
        # keep the factor's diagonal positive; the sign is irrelevant for L L^T
        sgn = np.where(np.diag(L) < 0, -1.0, 1.0)
        out += [mu, L * sgn[None, :]]
    return ExplicitVariational(*out)


def _q_chol_grads(q, g: QGrads):
    il_m, il_u = np.tril_indices(q.mu_m.size), np.tril_indices(q.mu_u.size)
    dLm = 2.0 * g.Sigma_m @ q.L_m
    dLu = 2.0 * g.Sigma_u @ q.L_u
    return np.concatenate([g.mu_m, dLm[il_m], g.mu_u, dLu[il_u]])


def _guard(values, window):
    if len(values) < 2 * window:
        return None
    arr = np.asarray(values)
    recent = arr[-window:]
    q75, q25 = np.percentile(recent, [75, 25])
    iqr = q75 - q25
    means = np.convolve(arr, np.ones(window) / window, mode="valid")
    drop = means.max() - means[-1]
    if iqr > 0 and drop > 10.0 * iqr:
        return {"running_mean": float(means[-1]), "best_running_mean": float(means.max()), "iqr": float(iqr)}
    return None


def train_svshgp(model: VshgpModel, config: SvshgpConfig | None = None, q: ExplicitVariational | None = None,
                 callback=None) -> SvshgpResult:
    """Alternate natural steps on q with Adam steps on the hyperparameters."""
    config = config or SvshgpConfig()
    model = model.copy()
    q = ExplicitVariational.prior(model) if q is None else q.copy()
    state = SvshgpModel(model, q)
    result = SvshgpResult(state)
    if config.iterations == 0:
        return result
    sampler = EpochSampler(model.n, config.batch_size, np.random.default_rng(config.seed))
    hyper_state = AdamState.zeros(_hyper_vector(model).size)
    q_state = AdamState.zeros(_q_vector(q).size)
    values = []
    t0 = time.perf_counter()
    full = np.arange(model.n)
    for it in range(config.iterations):
        batch = sampler.next()
        try:
            if config.method == "ngd+adam":
                ev = _evaluate(model, q, batch)
                gamma = gamma_schedule(it, config.gamma_initial, config.gamma_final, config.ramp_iterations)
                q = natural_step(q, euclidean_grads_q(model, q, ev=ev), gamma, config.ngd_blocks)
                ev = _evaluate(model, q, batch)
            else:
                ev = _evaluate(model, q, batch)
                gq = _q_chol_grads(q, euclidean_grads_q(model, q, ev=ev))
                qv, q_state = adam_step(q_state, _q_vector(q), gq, config.adam_step)
                q_new = _q_from_vector(qv, model.m, model.u)
            if config.train_hypers:
                g = hyper_grads(model, q, ev=ev).to_vector(HYPER_BLOCKS)
                hv, hyper_state = adam_step(hyper_state, _hyper_vector(model), g, config.adam_step)
                model.set_params(hv, HYPER_BLOCKS)
            if config.method == "adam":
                q = q_new
        except (NumericalError, np.linalg.LinAlgError) as exc:
            raise NumericalError(f"svshgp iteration {it}: {exc}", getattr(exc, "diagnostics", {})) from exc
        values.append(float(ev.value))
        result.trace.append((it, float(ev.value), time.perf_counter() - t0))
        if not np.isfinite(ev.value):
            raise NumericalError(f"svshgp iteration {it}: non-finite bound", {"iteration": it})
        bad = _guard(values, config.guard_window)
        if bad:
            raise NumericalError(f"svshgp diverged at iteration {it}", dict(bad, iteration=it))
        if config.eval_every and (it + 1) % config.eval_every == 0:
            result.full_trace.append((it + 1, elbo_factorized(model, q, full)))
        if callback is not None:
            callback(it, model, q)
    result.state = SvshgpModel(model, q)
    return result


def predict_latent_svshgp(state: SvshgpModel, Xstar) -> LatentPrediction:
    model, q = state.model, state.q
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    if Xstar.shape[1] != model.d:
        raise ValueError(f"test inputs have {Xstar.shape[1]} columns, model expects {model.d}")
    pf = _Projection(model.kf, Xstar, model.Xm, q.mu_m, q.L_m, nugget=model.nugget)
    pg = _Projection(model.kg, Xstar, model.Xu, q.mu_u, q.L_u, offset=model.mu0, nugget=model.nugget)
    tiny = 1e-300
    return LatentPrediction(pf.mean, np.maximum(pf.var, tiny), pg.mean, np.maximum(pg.var, tiny))
