import numpy as np
import pytest

from vshgp.core import elbo, elbo_grads, predict_latent
from vshgp.distributed import (
    AggregationError,
    DvshgpConfig,
    ExpertError,
    decomposed_elbo,
    decomposed_grads,
    default_sizes,
    init_dvshgp,
    kmeans_partition,
    lloyd,
    predict_dvshgp,
    train_dvshgp,
    aggregate_f,
    aggregate_g,
)
from vshgp.gradcheck import fd_gradient, rel_error
from vshgp.kernels import KernelParams


def blobs(seed=0, k=10):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 0.3, size=(k, 2))
    b = rng.normal(0, 0.3, size=(k, 2)) + [8.0, 8.0]
    return np.vstack([a, b]), np.repeat([0, 1], k)


def small_model(seed=0, n=16, M=2, m0=3, u0=3):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-3, 3, size=(n, 1))
    y = np.sin(X[:, 0]) + 0.2 * rng.normal(size=n)
    model = init_dvshgp(X, y, M, m0, u0, seed=seed)
    model.kf = KernelParams.from_vector(model.kf.to_vector() + 0.2 * rng.normal(size=2))
    model.kg = KernelParams.from_vector(model.kg.to_vector() + 0.2 * rng.normal(size=2))
    model.mu0 += 0.3 * rng.normal()
    for e in model.experts:
        e.lambda_log = e.lambda_log + 0.3 * rng.normal(size=e.lambda_log.size)
        e.Xm = e.Xm + 0.1 * rng.normal(size=e.Xm.shape)
        e.Xu = e.Xu + 0.1 * rng.normal(size=e.Xu.shape)
    return model


# ---------------------------------------------------------------- partition

def test_single_cluster():
    X = np.random.default_rng(0).normal(size=(30, 3))
    p = kmeans_partition(X, 1)
    assert np.all(p.assignments == 0)
    np.testing.assert_allclose(p.centroids[0], X.mean(axis=0), atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_two_blobs(seed):
    X, truth = blobs(seed)
    p = kmeans_partition(X, 2, seed=seed)
    # labels are arbitrary up to permutation
    same = np.array_equal(p.assignments, truth) or np.array_equal(p.assignments, 1 - truth)
    assert same


@pytest.mark.parametrize("seed", range(5))
def test_lloyd_fixpoint(seed):
    X = np.random.default_rng(seed).normal(size=(200, 2))
    labels, C = lloyd(X, 6, np.random.default_rng(seed))
    d2 = np.sum((X[:, None, :] - C[None]) ** 2, axis=2)
    own = d2[np.arange(200), labels]
    d2[np.arange(200), labels] = np.inf
    assert np.all(own < d2.min(axis=1))
    for j in range(6):
        np.testing.assert_allclose(C[j], X[labels == j].mean(axis=0), atol=1e-12)


def test_repair_merges_small_clusters():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(0, 0.1, (40, 1)), rng.normal(5, 0.1, (40, 1)), [[20.0], [20.1]]])
    p = kmeans_partition(X, 3, seed=0, min_size=5)
    assert p.n_experts == 2 and p.requested == 3
    assert np.all(p.sizes() >= 5)
    assert p.sizes().sum() == X.shape[0]


def test_partition_errors():
    with pytest.raises(ValueError):
        kmeans_partition(np.zeros((3, 1)), 4)
    with pytest.raises(ValueError):
        kmeans_partition(np.zeros((3, 1)), 0)


def test_disjoint_cover():
    model = small_model(n=40, M=3)
    idx = np.sort(np.concatenate([e.index for e in model.experts]))
    np.testing.assert_array_equal(idx, np.arange(40))
    assert model.manifest["effective_M"] == model.M
    assert default_sizes(1000, 10) == (100, 50, 50)
    assert default_sizes(10**6, 10)[1] == 300


# ---------------------------------------------------------------- bound

def test_single_expert_equals_vshgp():
    model = small_model(M=1)
    vm = model.expert_model(0)
    assert decomposed_elbo(model).total == elbo(vm).total
    g, ref = decomposed_grads(model), elbo_grads(vm)
    np.testing.assert_array_equal(g.kf, ref.kf)
    np.testing.assert_array_equal(g.kg, ref.kg)
    assert g.mu0 == ref.mu0
    np.testing.assert_array_equal(g.local[0].lambda_log, ref.lambda_log)


def test_sum_of_independent_calls():
    model = small_model(n=30, M=3)
    d = decomposed_elbo(model)
    direct = [elbo(model.expert_model(i)).total for i in range(3)]
    assert d.per_expert == direct
    assert d.total == (direct[0] + direct[1]) + direct[2]


def test_worker_count_does_not_change_bound():
    model = small_model(n=60, M=4)
    a = decomposed_elbo(model, workers=1)
    b = decomposed_elbo(model, workers=4)
    assert a.total == b.total
    np.testing.assert_array_equal(decomposed_grads(model, 1).to_vector(), decomposed_grads(model, 4).to_vector())


@pytest.mark.parametrize("seed", range(3))
def test_grads_finite_differences(seed):
    model = small_model(seed, n=16, M=2)
    analytic = decomposed_grads(model).to_vector()
    x0 = model.get_params()

    def f(x):
        return decomposed_elbo(model.copy().set_params(x)).total

    assert rel_error(analytic, fd_gradient(f, x0)) < 1e-4


def test_duplicated_expert_doubles_shared_gradient():
    model = small_model(n=20, M=2)
    one = model.copy()
    one.experts = [one.experts[0]]
    two = model.copy()
    two.experts = [two.experts[0], two.experts[0].copy()]
    g1, g2 = decomposed_grads(one), decomposed_grads(two)
    np.testing.assert_allclose(g2.kf, 2 * g1.kf, rtol=1e-14)
    np.testing.assert_allclose(g2.kg, 2 * g1.kg, rtol=1e-14)
    assert g2.mu0 == pytest.approx(2 * g1.mu0, rel=1e-14)


def test_expert_error_carries_index():
    model = small_model(n=20, M=2)
    model.experts[1].lambda_log = np.full_like(model.experts[1].lambda_log, np.nan)
    with pytest.raises(ExpertError) as info:
        decomposed_elbo(model)
    assert info.value.index == 1


# ---------------------------------------------------------------- training

def test_zero_budgets_leave_model_unchanged():
    model = small_model(n=30, M=2)
    out, trace = train_dvshgp(model, DvshgpConfig(0, 0))
    np.testing.assert_array_equal(out.get_params(), model.get_params())
    assert trace == []


def test_training_monotone_and_shares_kernel():
    model = small_model(n=60, M=3)
    out, trace = train_dvshgp(model, DvshgpConfig(5, 10))
    vals = [v for _, v in trace]
    assert np.all(np.diff(vals) >= 0)
    assert vals[-1] > vals[0]
    assert [s for s, _ in trace][0] == 1 and [s for s, _ in trace][-1] == 2
    for i in range(out.M):
        vm = out.expert_model(i)
        assert vm.kf is out.kf and vm.kg is out.kg and vm.mu0 == out.mu0


def test_stage_one_touches_only_lambda():
    model = small_model(n=40, M=2)
    out, _ = train_dvshgp(model, DvshgpConfig(5, 0))
    np.testing.assert_array_equal(out.kf.to_vector(), model.kf.to_vector())
    assert out.mu0 == model.mu0
    for a, b in zip(out.experts, model.experts):
        np.testing.assert_array_equal(a.Xm, b.Xm)
        np.testing.assert_array_equal(a.Xu, b.Xu)
    assert not np.array_equal(out.experts[0].lambda_log, model.experts[0].lambda_log)


def test_training_independent_of_workers():
    model = small_model(n=80, M=4)
    a, ta = train_dvshgp(model, DvshgpConfig(3, 5, workers=1))
    b, tb = train_dvshgp(model, DvshgpConfig(3, 5, workers=4))
    np.testing.assert_array_equal(a.get_params(), b.get_params())
    assert ta == tb


# ---------------------------------------------------------------- aggregation

def rbcm_scalar(items, prior_mean, prior_var):
    """Scalar transcription of the robust BCM combination."""
    ws = [0.5 * (np.log(prior_var) - np.log(v)) for _, v in items]
    prec = sum(w / v for w, (_, v) in zip(ws, items)) + (1 - sum(ws)) / prior_var
    var = 1 / prec
    mean = var * (sum(w / v * m for w, (m, v) in zip(ws, items)) + (1 - sum(ws)) / prior_var * prior_mean)
    return mean, var


def test_aggregate_f_oracle():
    items = [(1.0, 0.5), (2.0, 1.0), (0.0, 2.0)]
    mu, var = aggregate_f(np.array([[m] for m, _ in items]), np.array([[v] for _, v in items]), 2.0)
    m_ref, v_ref = rbcm_scalar(items, 0.0, 2.0)
    assert mu[0] == pytest.approx(m_ref, rel=1e-13)
    assert var[0] == pytest.approx(v_ref, rel=1e-13)


def test_aggregate_g_oracle():
    items = [(-1.2, 0.3), (-0.4, 0.8)]
    mu, var = aggregate_g(np.array([[m] for m, _ in items]), np.array([[v] for _, v in items]), -2.0, 1.5)
    m_ref, v_ref = rbcm_scalar(items, -2.0, 1.5)
    assert mu[0] == pytest.approx(m_ref, rel=1e-12)
    assert var[0] == pytest.approx(v_ref, rel=1e-12)


def test_aggregate_reverts_to_prior():
    mu, var = aggregate_f(np.array([[3.0]]), np.array([[2.0]]), 2.0)
    assert mu[0] == 0.0 and var[0] == 2.0
    mu, var = aggregate_g(np.array([[3.0]]), np.array([[2.0]]), -1.5, 2.0)
    assert mu[0] == pytest.approx(-1.5) and var[0] == pytest.approx(2.0)


def test_aggregate_g_with_zero_prior_mean_matches_f():
    rng = np.random.default_rng(0)
    mu, var = rng.normal(size=(3, 5)), rng.uniform(0.1, 0.9, size=(3, 5))
    a = aggregate_f(mu, var, 1.0)
    b = aggregate_g(mu, var, 0.0, 1.0)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_identical_experts_keep_common_mean():
    # with a zero prior mean the common mean survives exactly when the weights sum to one
    v = 1.0 / np.e
    mu, var = aggregate_f(np.full((2, 1), 0.7), np.full((2, 1), v), 1.0)
    assert mu[0] == pytest.approx(0.7, rel=1e-15)
    # otherwise it is shrunk toward the prior mean, never past it
    mu, _ = aggregate_f(np.full((4, 1), 0.7), np.full((4, 1), 0.3), 1.0)
    assert 0.0 < mu[0] and mu[0] != pytest.approx(0.7)
    # for g the prior mean equals the common mean, so any weights keep it
    mu, _ = aggregate_g(np.full((4, 1), -1.3), np.full((4, 1), 0.3), -1.3, 1.0)
    assert mu[0] == pytest.approx(-1.3, rel=1e-15)


def test_variance_bounded_by_prior_when_weights_nonnegative():
    rng = np.random.default_rng(1)
    prior = 2.0
    var = rng.uniform(0.1, prior, size=(5, 50))
    _, va = aggregate_f(rng.normal(size=(5, 50)), var, prior)
    assert np.all(va > 0) and np.all(va <= prior)


def test_precision_never_below_prior_precision():
    # precision = 1/k + sum_i w_i (1/v_i - 1/k) and each term is >= 0,
    # including experts more uncertain than the prior (negative weights)
    rng = np.random.default_rng(2)
    for _ in range(200):
        M = rng.integers(1, 30)
        k = rng.uniform(0.05, 5.0)
        var = k * np.exp(rng.normal(0, 2, size=(M, 3)))
        _, va = aggregate_f(rng.normal(size=(M, 3)), var, k)
        assert np.all(va <= k * (1 + 1e-12))


def test_failed_aggregation_is_reported():
    var = np.array([[0.5, np.nan], [0.4, 0.3]])
    with pytest.raises(AggregationError) as info:
        aggregate_f(np.zeros((2, 2)), var, 1.0)
    assert info.value.diagnostics["points"] == [1]
    with pytest.raises(ValueError):
        aggregate_f(np.zeros((1, 1)), np.zeros((1, 1)), 1.0)


# ---------------------------------------------------------------- prediction

def test_single_expert_prediction_is_aggregated():
    model = small_model(n=30, M=1)
    Xs = np.linspace(-3, 3, 7)[:, None]
    agg = predict_dvshgp(model, Xs)
    lat = predict_latent(model.expert_model(0), Xs)
    mu_ref, var_ref = aggregate_f(lat.mu_f[None], lat.var_f[None], model.kf.variance)
    np.testing.assert_allclose(agg.mu_f, mu_ref, rtol=1e-13)
    np.testing.assert_allclose(agg.var_f, var_ref, rtol=1e-13)
    assert not agg.failed.any()
    np.testing.assert_allclose(agg.var, agg.var_f + np.exp(agg.mu_g + 0.5 * agg.var_g))
    np.testing.assert_array_equal(agg.mu, agg.mu_f)


def test_far_away_point_reverts_to_prior():
    model = small_model(n=30, M=3)
    agg = predict_dvshgp(model, np.array([[1e4]]))
    assert np.all(np.abs(agg.w_f) < 1e-6) and np.all(np.abs(agg.w_g) < 1e-6)
    assert agg.mu_f[0] == pytest.approx(0.0, abs=1e-6)
    assert agg.var_f[0] == pytest.approx(model.kf.variance, rel=1e-6)
    assert agg.mu_g[0] == pytest.approx(model.mu0, abs=1e-6)
    assert agg.var_g[0] == pytest.approx(model.kg.variance, rel=1e-6)


def test_prediction_dimension_check_and_workers():
    model = small_model(n=40, M=2)
    with pytest.raises(ValueError):
        predict_dvshgp(model, np.zeros((2, 3)))
    Xs = np.linspace(-3, 3, 11)[:, None]
    a, b = predict_dvshgp(model, Xs, 1), predict_dvshgp(model, Xs, 3)
    np.testing.assert_array_equal(a.var, b.var)


def test_single_expert_training_tracks_vshgp():
    from vshgp.core import train_vshgp
    from vshgp.data import gen_toy1d

    X, y = gen_toy1d(100, seed=0).normalized()
    model = init_dvshgp(X, y, 1, 8, 8, seed=0)
    out, trace = train_dvshgp(model, DvshgpConfig(3, 5))
    ref, ref_trace = train_vshgp(model.expert_model(0), budget=5, variational_budget=3)
    # the distributed trace repeats the value at the start of stage 2
    stage1 = [v for s, v in trace if s == 1]
    stage2 = [v for s, v in trace if s == 2][1:]
    np.testing.assert_allclose(stage1 + stage2, ref_trace, rtol=1e-9)
    np.testing.assert_allclose(out.expert_model(0).get_params(), ref.get_params(), rtol=1e-6, atol=1e-8)
