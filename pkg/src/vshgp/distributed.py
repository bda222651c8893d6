"""Distributed VSHGP: disjoint k-means experts with shared kernels, RBCM aggregation.

Kernel parameters and mu0 are global; each expert owns its shard's lambda
and its own inducing inputs. The training objective is the sum of the
experts' collapsed bounds. Expert evaluations run on a thread pool and are
reduced in expert-index order, so results do not depend on the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .core import (
    DEFAULT_NUGGET,
    LatentPrediction,
    VshgpModel,
    build_workspace,
    elbo,
    elbo_grads,
    init_model,
    predict_latent,
)
from .kernels import KernelParams
from .linalg import NumericalError
from .optim import cgd_maximize

SHARED_BLOCKS = ("kf", "kg", "mu0")
LOCAL_BLOCKS = ("lambda", "Xm", "Xu")


def default_workers():
    env = os.environ.get("VSHGP_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# ---------------------------------------------------------------- partitioning

def _kmeanspp(X, k, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def _assign(X, centroids):
    d2 = np.sum((X[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    return np.argmin(d2, axis=1)


def lloyd(X, k, rng, max_iter=100):
    """Lloyd's algorithm from k-means++ seeding; stops at an assignment fixpoint."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"cannot form {k} clusters from {n} points")
    centroids = _kmeanspp(X, k, rng)
    labels = _assign(X, centroids)
    for _ in range(max_iter):
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = X[members].mean(axis=0)
            else:
                # re-seed an empty cluster at the point farthest from its centroid
                far = np.argmax(np.sum((X - centroids[labels]) ** 2, axis=1))
                centroids[j] = X[far]
        new = _assign(X, centroids)
        if np.array_equal(new, labels):
            break
        labels = new
    return labels, centroids


@dataclass
class Partition:
    assignments: np.ndarray
    centroids: np.ndarray
    requested: int = 0

    @property
    def n_experts(self):
        return self.centroids.shape[0]

    def members(self, i):
        return np.flatnonzero(self.assignments == i)

    def sizes(self):
        return np.bincount(self.assignments, minlength=self.n_experts)


def kmeans_partition(X, M, seed=0, min_size=1, max_iter=100):
    """Disjoint k-means partition; clusters smaller than ``min_size`` are merged
    into the cluster with the nearest centroid until none remain."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    if M < 1 or M > n:
        raise ValueError(f"number of experts must be in [1, {n}], got {M}")
    labels, centroids = lloyd(X, M, np.random.default_rng(seed), max_iter)
    labels = labels.copy()
    centroids = centroids.copy()
    while centroids.shape[0] > 1:
        sizes = np.bincount(labels, minlength=centroids.shape[0])
        small = np.flatnonzero(sizes < min_size)
        if small.size == 0:
            break
        j = small[np.argmin(sizes[small])]
        dist = np.sum((centroids - centroids[j]) ** 2, axis=1)
        dist[j] = np.inf
        target = int(np.argmin(dist))
        labels[labels == j] = target
        keep = np.arange(centroids.shape[0]) != j
        remap = np.cumsum(keep) - 1
        labels = remap[labels]
        centroids = centroids[keep]
        members = labels == remap[target]
        centroids[remap[target]] = X[members].mean(axis=0)
    return Partition(labels, centroids, M)


# --------------------------------------------------------------------- model

@dataclass
class ExpertModel:
    index: np.ndarray         # rows of the full training set owned by this expert
    X: np.ndarray
    y: np.ndarray
    Xm: np.ndarray
    Xu: np.ndarray
    lambda_log: np.ndarray

    def copy(self):
        return ExpertModel(self.index.copy(), self.X, self.y, self.Xm.copy(), self.Xu.copy(),
                           self.lambda_log.copy())


@dataclass
class DvshgpModel:
    kf: KernelParams
    kg: KernelParams
    mu0: float
    experts: list
    partition: Partition = None
    manifest: dict = field(default_factory=dict)
    nugget: float = DEFAULT_NUGGET

    @property
    def M(self):
        return len(self.experts)

    @property
    def d(self):
        return self.kf.dim

    def expert_model(self, i) -> VshgpModel:
        e = self.experts[i]
        return VshgpModel(e.X, e.y, self.kf, self.kg, self.mu0, e.Xm, e.Xu, e.lambda_log, self.nugget)

    def copy(self):
        return DvshgpModel(self.kf.copy(), self.kg.copy(), self.mu0, [e.copy() for e in self.experts],
                           self.partition, dict(self.manifest), self.nugget)

    def get_params(self, shared=SHARED_BLOCKS, local=LOCAL_BLOCKS):
        parts = []
        if "kf" in shared:
            parts.append(self.kf.to_vector())
        if "kg" in shared:
            parts.append(self.kg.to_vector())
        if "mu0" in shared:
            parts.append([self.mu0])
        for e in self.experts:
            for b in local:
                parts.append({"lambda": e.lambda_log, "Xm": e.Xm.ravel(), "Xu": e.Xu.ravel()}[b])
        return np.concatenate([np.asarray(p, dtype=float) for p in parts]) if parts else np.zeros(0)

    def set_params(self, vec, shared=SHARED_BLOCKS, local=LOCAL_BLOCKS):
        pos = 0

        def take(k):
            nonlocal pos
            out = np.asarray(vec[pos:pos + k], dtype=float).copy()
            pos += k
            return out

        if "kf" in shared:
            self.kf = KernelParams.from_vector(take(self.kf.size))
        if "kg" in shared:
            self.kg = KernelParams.from_vector(take(self.kg.size))
        if "mu0" in shared:
            self.mu0 = float(take(1)[0])
        for e in self.experts:
            for b in local:
                if b == "lambda":
                    e.lambda_log = take(e.lambda_log.size)
                elif b == "Xm":
                    e.Xm = take(e.Xm.size).reshape(e.Xm.shape)
                elif b == "Xu":
                    e.Xu = take(e.Xu.size).reshape(e.Xu.shape)
        if pos != len(vec):
            raise ValueError(f"parameter vector has {len(vec)} entries, expected {pos}")
        return self


def default_sizes(n, M, m0=None, u0=None, cap=300):
    n0 = max(1, n // M)
    default = max(1, min(n0 // 2, cap))
    return n0, m0 or default, u0 or default


def init_dvshgp(X, y, M, m0=None, u0=None, seed=0, lengthscale=1.0, signal_variance=1.0):
    """Partition (X, y) with k-means and initialize one VSHGP expert per cluster."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n = X.shape[0]
    n0, m0, u0 = default_sizes(n, M, m0, u0)
    ss = np.random.SeedSequence(seed)
    part_seed, *expert_seeds = ss.generate_state(1 + M)
    part = kmeans_partition(X, M, int(part_seed), min_size=max(m0, u0))
    shared = init_model(X[:1], y[:1], 1, 1, lengthscale=lengthscale, signal_variance=signal_variance,
                        Xm=X[:1], Xu=X[:1])
    var_y = float(np.var(y)) if n > 1 else 1.0
    experts = []
    for i in range(part.n_experts):
        idx = part.members(i)
        local = init_model(X[idx], y[idx], min(m0, idx.size), min(u0, idx.size), seed=int(expert_seeds[i % M]),
                           lengthscale=lengthscale, signal_variance=signal_variance)
        experts.append(ExpertModel(idx, X[idx], y[idx], local.Xm, local.Xu, local.lambda_log))
    manifest = {"M": M, "n0": n0, "m0": m0, "u0": u0, "effective_M": part.n_experts}
    return DvshgpModel(shared.kf, shared.kg, np.log(max(var_y, 1e-12) / 2.0), experts, part, manifest)


# ------------------------------------------------------------- evaluation

@contextmanager
def _pool(workers):
    # BLAS pinned to one thread so results are bitwise independent of `workers`
    with threadpool_limits(limits=1):
        if workers <= 1:
            yield map
        else:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                yield ex.map


class ExpertError(NumericalError):
    def __init__(self, index, cause):
        super().__init__(f"expert {index}: {cause}", getattr(cause, "diagnostics", {}))
        self.index = index


def _expert_eval(args):
    i, vm, with_grads = args
    try:
        ws = build_workspace(vm)
        terms = elbo(vm, ws)
        if not np.isfinite(terms.total):
            raise NumericalError("non-finite bound", {"value": float(terms.total)})
        grads = elbo_grads(vm, ws) if with_grads else None
    except (NumericalError, np.linalg.LinAlgError) as exc:
        raise ExpertError(i, exc) from exc
    return terms, grads


def _evaluate(model, with_grads, mapper):
    jobs = [(i, model.expert_model(i), with_grads) for i in range(model.M)]
    return list(mapper(_expert_eval, jobs))


@dataclass
class DecomposedElbo:
    total: float
    per_expert: list


def decomposed_elbo(model: DvshgpModel, workers=1) -> DecomposedElbo:
    with _pool(workers) as mapper:
        results = _evaluate(model, False, mapper)
    per = [t.total for t, _ in results]
    total = 0.0
    for v in per:
        total += v
    return DecomposedElbo(total, per)


@dataclass
class DecomposedGrads:
    kf: np.ndarray
    kg: np.ndarray
    mu0: float
    local: list               # ElboGrads per expert (shared entries unused)

    def to_vector(self, shared=SHARED_BLOCKS, local=LOCAL_BLOCKS):
        parts = []
        if "kf" in shared:
            parts.append(self.kf)
        if "kg" in shared:
            parts.append(self.kg)
        if "mu0" in shared:
            parts.append([self.mu0])
        for g in self.local:
            for b in local:
                parts.append({"lambda": g.lambda_log, "Xm": g.Xm.ravel(), "Xu": g.Xu.ravel()}[b])
        return np.concatenate([np.asarray(p, dtype=float) for p in parts]) if parts else np.zeros(0)


def _reduce(results):
    total = 0.0
    kf = np.zeros_like(results[0][1].kf)
    kg = np.zeros_like(results[0][1].kg)
    mu0 = 0.0
    for terms, g in results:
        total += terms.total
        kf = kf + g.kf
        kg = kg + g.kg
        mu0 += g.mu0
    return total, DecomposedGrads(kf, kg, mu0, [g for _, g in results])


def decomposed_grads(model: DvshgpModel, workers=1) -> DecomposedGrads:
    with _pool(workers) as mapper:
        results = _evaluate(model, True, mapper)
    return _reduce(results)[1]


@dataclass
class DvshgpConfig:
    variational_budget: int = 30
    joint_budget: int = 70
    workers: int = 1
    c1: float = 1e-4
    c2: float = 0.9


def train_dvshgp(model: DvshgpModel, config: DvshgpConfig | None = None):
    """Two-stage CGD: lambdas alone, then every block jointly.

    Returns ``(trained_copy, trace)``; trace entries are ``(stage, total_elbo)``
    for the start of each stage and every accepted step.
    """
    config = config or DvshgpConfig()
    model = model.copy()
    trace = []
    stages = [(1, (), ("lambda",), config.variational_budget),
              (2, SHARED_BLOCKS, LOCAL_BLOCKS, config.joint_budget)]
    with _pool(config.workers) as mapper:
        for stage, shared, local, budget in stages:
            if budget <= 0:
                continue
            work = model.copy()

            def fun(vec, shared=shared, local=local, work=work):
                work.set_params(vec, shared, local)
                total, grads = _reduce(_evaluate(work, True, mapper))
                return total, grads.to_vector(shared, local)

            try:
                res = cgd_maximize(fun, model.get_params(shared, local), budget, config.c1, config.c2)
            except NumericalError as exc:
                raise NumericalError(f"stage {stage}: {exc}", getattr(exc, "diagnostics", {})) from exc
            model.set_params(res.x, shared, local)
            trace.extend((stage, v) for v in res.trace)
    return model, trace


# ------------------------------------------------------------- aggregation

class AggregationError(NumericalError):
    pass


def _rbcm(mu, var, prior_mean, prior_var):
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)
    prior_var = np.broadcast_to(np.asarray(prior_var, dtype=float), mu.shape[1:])
    prior_mean = np.broadcast_to(np.asarray(prior_mean, dtype=float), mu.shape[1:])
    if np.any(var <= 0) or np.any(prior_var <= 0):
        raise ValueError("variances must be positive")
    w = 0.5 * (np.log(prior_var)[None] - np.log(var))
    wsum = w.sum(axis=0)
    prec = np.sum(w / var, axis=0) + (1.0 - wsum) / prior_var
    num = np.sum(w / var * mu, axis=0) + (1.0 - wsum) / prior_var * prior_mean
    ok = prec > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        var_a = np.where(ok, 1.0 / prec, np.nan)
        mu_a = np.where(ok, var_a * num, np.nan)
    return mu_a, var_a, w, ok


def _check_ok(ok, w, prec_name):
    if not np.all(ok):
        bad = np.flatnonzero(~np.atleast_1d(ok))
        raise AggregationError(f"non-positive aggregated precision for {prec_name}",
                               {"points": bad.tolist(), "weights": np.atleast_2d(w.T)[bad].tolist()})


def aggregate_f(mu, var, prior_var):
    """RBCM combination of expert predictions of f (arrays shaped (M, ...)).

    Weights are the entropy differences 0.5 (log prior_var - log var_i).
    """
    mu_a, var_a, w, ok = _rbcm(mu, var, 0.0, prior_var)
    _check_ok(ok, w, "f")
    return mu_a, var_a


def aggregate_g(mu, var, prior_mean, prior_var):
    """As aggregate_f, with the prior mean mu0 entering the combined mean."""
    mu_a, var_a, w, ok = _rbcm(mu, var, prior_mean, prior_var)
    _check_ok(ok, w, "g")
    return mu_a, var_a


@dataclass
class AggregatedPrediction:
    mu_f: np.ndarray
    var_f: np.ndarray
    mu_g: np.ndarray
    var_g: np.ndarray
    mu: np.ndarray
    var: np.ndarray
    w_f: np.ndarray
    w_g: np.ndarray
    failed: np.ndarray

    def latent(self):
        return LatentPrediction(self.mu_f, self.var_f, self.mu_g, self.var_g)


def _expert_predict(args):
    vm, Xstar = args
    return predict_latent(vm, Xstar)


def predict_dvshgp(model: DvshgpModel, Xstar, workers=1) -> AggregatedPrediction:
    """Aggregate per-expert latent predictions; failed points come back as NaN."""
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    if Xstar.shape[1] != model.d:
        raise ValueError(f"test inputs have {Xstar.shape[1]} columns, model expects {model.d}")
    with _pool(workers) as mapper:
        preds = list(mapper(_expert_predict, [(model.expert_model(i), Xstar) for i in range(model.M)]))
    mu_f = np.array([p.mu_f for p in preds])
    var_f = np.array([p.var_f for p in preds])
    mu_g = np.array([p.mu_g for p in preds])
    var_g = np.array([p.var_g for p in preds])
    kff = np.full(Xstar.shape[0], model.kf.variance)
    kgg = np.full(Xstar.shape[0], model.kg.variance)
    mfa, vfa, wf, okf = _rbcm(mu_f, var_f, 0.0, kff)
    mga, vga, wg, okg = _rbcm(mu_g, var_g, model.mu0, kgg)
    ok = okf & okg
    expo = mga + 0.5 * vga
    overflow = ok & (expo > 700)
    ok &= ~overflow
    with np.errstate(invalid="ignore", over="ignore"):
        var = np.where(ok, vfa + np.exp(np.where(ok, expo, 0.0)), np.nan)
    return AggregatedPrediction(mfa, vfa, mga, vga, np.where(ok, mfa, np.nan), var, wf, wg, ~ok)
