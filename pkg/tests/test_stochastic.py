import itertools

import numpy as np
import pytest

from vshgp.core import build_workspace, elbo, elbo_given_qg
from vshgp.gradcheck import check_svshgp, fd_gradient, random_q, rel_error
from vshgp.linalg import NumericalError
from vshgp.stochastic import (
    EpochSampler,
    ExplicitVariational,
    NaturalParams,
    QGrads,
    SvshgpConfig,
    elbo_factorized,
    euclidean_grads_q,
    hyper_grads,
    natural_step,
    predict_latent_svshgp,
    train_svshgp,
)
from oracles import dense_factorized, dense_qf_star, dense_qg, random_model


def setup(seed, n=10, m=3, u=3):
    model = random_model(seed, n=n, m=m, u=u)
    q = random_q(model, np.random.default_rng(seed + 100))
    return model, q


def dense(model, q, batch):
    return dense_factorized(model, q.mu_m, q.Sigma_m, q.mu_u, q.Sigma_u, batch)


@pytest.mark.parametrize("seed", range(4))
def test_full_batch_matches_dense(seed):
    model, q = setup(seed)
    full = np.arange(model.n)
    assert elbo_factorized(model, q) == pytest.approx(dense(model, q, full), rel=1e-10)
    assert elbo_factorized(model, q, full) == elbo_factorized(model, q)


def test_minibatch_matches_dense():
    model, q = setup(7)
    batch = np.array([1, 4, 5, 8])
    assert elbo_factorized(model, q, batch) == pytest.approx(dense(model, q, batch), rel=1e-10)


def test_singleton_batches_average_to_full():
    model, q = setup(2, n=6)
    vals = [elbo_factorized(model, q, [i]) for i in range(6)]
    assert abs(np.mean(vals) - elbo_factorized(model, q)) < 1e-10


@pytest.mark.parametrize("size", [1, 2])
def test_unbiased_exhaustive(size):
    model, q = setup(3, n=8)
    vals = [elbo_factorized(model, q, list(b)) for b in itertools.combinations(range(8), size)]
    assert abs(np.mean(vals) - elbo_factorized(model, q)) < 1e-10


def test_batch_validation():
    model, q = setup(0)
    with pytest.raises(ValueError):
        elbo_factorized(model, q, [])
    with pytest.raises(ValueError):
        elbo_factorized(model, q, [model.n])


@pytest.mark.parametrize("seed", range(3))
def test_equals_collapsed_at_optimum(seed):
    model = random_model(seed, n=12, m=4, u=4)
    ws = build_workspace(model)
    q = ExplicitVariational.from_collapsed(model)
    F_V = elbo(model, ws).total
    assert elbo_factorized(model, q) == pytest.approx(F_V, rel=1e-8)
    # any other q(f_m) with the same q(g_u) gives a lower bound
    rng = np.random.default_rng(seed)
    for _ in range(5):
        A = 0.2 * rng.normal(size=(model.m, model.m))
        q2 = ExplicitVariational.from_moments(q.mu_m + 0.3 * rng.normal(size=model.m), q.Sigma_m + A @ A.T,
                                              q.mu_u, q.Sigma_u)
        assert elbo_factorized(model, q2) <= F_V + 1e-10


def test_from_collapsed_matches_dense_oracles():
    model = random_model(5)
    mu_u, Sigma_u, *_ = dense_qg(model)
    mu, Sigma = dense_qf_star(model, mu_u, Sigma_u)
    q = ExplicitVariational.from_collapsed(model)
    np.testing.assert_allclose(q.mu_u, mu_u, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(q.Sigma_m, Sigma, rtol=1e-7, atol=1e-10)
    np.testing.assert_allclose(q.mu_m, mu, rtol=1e-7, atol=1e-10)


def test_prior_init_has_zero_kl():
    model = random_model(1)
    q = ExplicitVariational.prior(model)
    np.testing.assert_array_equal(q.mu_m, 0.0)
    np.testing.assert_allclose(q.mu_u, model.mu0)
    # with both KL terms zero the bound is the expected log likelihood alone
    full = np.arange(model.n)
    assert elbo_factorized(model, q) == pytest.approx(dense(model, q, full), rel=1e-10)


def sym_direction(rng, k):
    E = rng.normal(size=(k, k))
    return E + E.T


@pytest.mark.parametrize("seed", range(5))
def test_q_grads_finite_differences(seed):
    model, q = setup(seed)
    rng = np.random.default_rng(seed)
    for batch in (np.arange(model.n), np.array([0, 3, 4, 9])):
        g = euclidean_grads_q(model, q, batch)

        def f_mu(x, name):
            qq = q.copy()
            setattr(qq, name, x)
            return dense(model, qq, batch)

        assert rel_error(g.mu_m, fd_gradient(lambda x: f_mu(x, "mu_m"), q.mu_m)) < 1e-5
        assert rel_error(g.mu_u, fd_gradient(lambda x: f_mu(x, "mu_u"), q.mu_u)) < 1e-5
        for which, G in (("m", g.Sigma_m), ("u", g.Sigma_u)):
            k = G.shape[0]
            E = sym_direction(rng, k)
            h = 1e-5

            def at(t):
                S_m, S_u = q.Sigma_m, q.Sigma_u
                if which == "m":
                    S_m = S_m + t * E
                else:
                    S_u = S_u + t * E
                return dense_factorized(model, q.mu_m, S_m, q.mu_u, S_u, batch)

            num = (at(h) - at(-h)) / (2 * h)
            assert np.allclose(G, G.T)
            assert np.sum(G * E) == pytest.approx(num, rel=1e-5, abs=1e-7)


@pytest.mark.parametrize("seed", range(3))
def test_hyper_grads_finite_differences(seed):
    results = check_svshgp(seed, tol=1e-4)
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_hyper_grads_against_dense_oracle():
    model, q = setup(9)
    batch = np.array([0, 2, 5, 6, 7])
    gh = hyper_grads(model, q, batch)
    for block in ("kf", "kg", "mu0", "Xm", "Xu"):
        x0 = model.get_params((block,))

        def f(x, block=block):
            return dense(model.copy().set_params(x, (block,)), q, batch)

        assert rel_error(gh.to_vector((block,)), fd_gradient(f, x0)) < 1e-5, block


def test_zero_f_gradients_at_optimum():
    model = random_model(4, n=12, m=4, u=4)
    q = ExplicitVariational.from_collapsed(model)
    g = euclidean_grads_q(model, q)
    assert np.max(np.abs(g.mu_m)) < 1e-8
    assert np.max(np.abs(g.Sigma_m)) < 1e-8


def test_mean_gradient_vanishes_on_consistent_targets():
    model, q = setup(6)
    q.mu_m = np.zeros(model.m)
    model.y = np.zeros(model.n)   # y = Omega mu_m with mu_m = 0
    g = euclidean_grads_q(model, q)
    assert np.max(np.abs(g.mu_m)) < 1e-12


def test_unit_step_lands_on_optimal_qf():
    model, q = setup(8, n=12, m=4, u=4)
    mu_star, Sigma_star = dense_qf_star(model, q.mu_u, q.Sigma_u)
    new = natural_step(q, euclidean_grads_q(model, q), 1.0, blocks=("f",))
    np.testing.assert_allclose(new.mu_m, mu_star, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(new.Sigma_m, Sigma_star, rtol=1e-8, atol=1e-10)
    np.testing.assert_array_equal(new.mu_u, q.mu_u)
    np.testing.assert_array_equal(new.L_u, q.L_u)
    F = elbo_factorized(model, new)
    assert F == pytest.approx(elbo_given_qg(model, q.mu_u, q.Sigma_u).total, rel=1e-8)


def test_zero_gradient_step_is_identity():
    model, q = setup(1)
    zero = QGrads(np.zeros(model.m), np.zeros((model.m, model.m)), np.zeros(model.u), np.zeros((model.u, model.u)))
    new = natural_step(q, zero, 0.5)
    np.testing.assert_allclose(new.mu_m, q.mu_m, atol=1e-12)
    np.testing.assert_allclose(new.Sigma_m, q.Sigma_m, atol=1e-12)
    np.testing.assert_allclose(new.mu_u, q.mu_u, atol=1e-12)
    np.testing.assert_allclose(new.Sigma_u, q.Sigma_u, atol=1e-12)


def test_step_halving_and_failure():
    model, q = setup(2)
    k = model.m
    # a large positive Sigma gradient makes the unit step indefinite
    P = np.linalg.inv(q.Sigma_m)
    big = QGrads(np.zeros(k), 0.75 * P, np.zeros(model.u), np.zeros((model.u, model.u)))
    new = natural_step(q, big, 1.0, blocks=("f",))
    assert np.all(np.linalg.eigvalsh(new.Sigma_m) > 0)
    huge = QGrads(np.zeros(k), 1e6 * P, np.zeros(model.u), np.zeros((model.u, model.u)))
    with pytest.raises(NumericalError):
        natural_step(q, huge, 1.0, blocks=("f",), max_halvings=3)
    with pytest.raises(ValueError):
        natural_step(q, big, 0.0)


def test_natural_params():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3))
    S = A @ A.T + np.eye(3)
    mu = rng.normal(size=3)
    p = NaturalParams.from_moments(mu, S)
    np.testing.assert_allclose(-2 * p.Theta2 @ S, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(np.linalg.solve(-2 * p.Theta2, p.theta1), mu, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(p.Theta2) < 0)
    assert np.all(np.linalg.eigvalsh(p.Psi2 - np.outer(p.psi1, p.psi1)) > 0)


def test_explicit_variational_validation():
    with pytest.raises(ValueError):
        ExplicitVariational(np.zeros(2), np.diag([1.0, -1.0]), np.zeros(1), np.eye(1))
    with pytest.raises(NumericalError):
        ExplicitVariational.from_moments(np.zeros(2), -np.eye(2), np.zeros(1), np.eye(1))


def test_epoch_sampler_covers_each_epoch():
    s = EpochSampler(10, 3, np.random.default_rng(0))
    seen = np.concatenate([s.next() for _ in range(10)])
    # 30 draws span three full epochs
    assert np.all(np.bincount(seen, minlength=10) == 3)
    assert EpochSampler(4, 10, np.random.default_rng(0)).next().size == 4


def test_zero_iterations_leave_model_unchanged():
    model = random_model(0, n=20, m=4, u=4)
    res = train_svshgp(model, SvshgpConfig(iterations=0))
    np.testing.assert_array_equal(res.state.model.get_params(), model.get_params())
    assert res.trace == []


def test_f_only_unit_steps_track_collapsed_bound():
    model = random_model(3, n=15, m=4, u=4)
    q = ExplicitVariational.from_collapsed(model)
    A = 0.3 * np.random.default_rng(0).normal(size=(4, 4))
    q = ExplicitVariational.from_moments(q.mu_m + 1.0, q.Sigma_m + A @ A.T, q.mu_u, q.Sigma_u)
    cfg = SvshgpConfig(batch_size=15, iterations=4, gamma_initial=1.0, gamma_final=1.0,
                       ngd_blocks=("f",), train_hypers=False)
    res = train_svshgp(model, cfg, q=q)
    F_V = elbo(model).total
    for _, val, _ in res.trace:
        assert val == pytest.approx(F_V, rel=1e-8)


def test_training_improves_and_is_reproducible():
    from vshgp.data import gen_toy1d
    from vshgp.core import init_model

    ds = gen_toy1d(200, seed=0)
    X, y = ds.normalized()
    model = init_model(X, y, 10, 10, seed=0)
    cfg = SvshgpConfig(batch_size=25, iterations=150, eval_every=50)
    a = train_svshgp(model, cfg)
    b = train_svshgp(model, cfg)
    assert [t[1] for t in a.trace] == [t[1] for t in b.trace]
    F0 = elbo_factorized(model, ExplicitVariational.prior(model))
    assert a.full_trace[-1][1] > F0
    for q in (a.state.q.L_m, a.state.q.L_u):
        assert np.all(np.diag(q) > 0)
    lat = predict_latent_svshgp(a.state, X[:5])
    assert np.all(lat.var_f > 0) and np.all(lat.var_g > 0)


def test_adam_only_variant_runs():
    model = random_model(2, n=30, m=4, u=4)
    res = train_svshgp(model, SvshgpConfig(batch_size=10, iterations=30, method="adam"))
    assert len(res.trace) == 30
    assert np.all(np.isfinite([t[1] for t in res.trace]))


def test_config_validation():
    with pytest.raises(ValueError):
        SvshgpConfig(batch_size=0)
    with pytest.raises(ValueError):
        SvshgpConfig(method="sgd")
