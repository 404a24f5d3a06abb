import numpy as np
import pytest

from dmsgd.errors import BadConfig, BadParam
from dmsgd.objectives import (Family, NoiseModel, QuadraticConsensus, build_objective,
                              estimate_assumptions, eval_loss, grad_exact, grad_noisy)
from dmsgd.oracles import finite_difference_grad
from dmsgd.streams import NoiseKind, NoiseStreams

FAMILIES = {
    "quadratic": dict(family="quadratic_consensus", eig_min=0.1, eig_max=2.0),
    "logistic": dict(family="logistic"),
    "soft": dict(family="soft_nonconvex"),
}


def make(name, N=5, m=3, h=0.5, seed=2):
    kw = dict(FAMILIES[name])
    fam = kw.pop("family")
    return build_objective(fam, N, m, heterogeneity=h, dataset_seed=seed, **kw)


def test_quadratic_examples():
    q = QuadraticConsensus(np.eye(4), np.zeros((3, 4)))
    assert eval_loss(q, np.zeros(4)) == 0.0
    assert eval_loss(q, np.array([1.0, 0, 0, 0])) == pytest.approx(0.5)
    X = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(grad_exact(q, X), X)


@pytest.mark.parametrize("name", list(FAMILIES))
def test_stationarity_at_minimiser(name):
    obj = make(name)
    if obj.theta_star is None:
        pytest.skip("no known minimiser for this family")
    X = np.tile(obj.theta_star, (obj.m, 1))
    assert np.linalg.norm(grad_exact(obj, X).mean(axis=0)) <= 1e-8
    assert eval_loss(obj, obj.theta_star) == obj.g_star


def test_logistic_minimiser_quality():
    obj = make("logistic", N=6, m=4)
    assert obj.theta_star_grad_norm <= 1e-10
    assert obj.convex


@pytest.mark.parametrize("name", list(FAMILIES))
def test_finite_differences(name):
    obj = make(name)
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(-2, 2, obj.dim)
        fd = finite_difference_grad(obj.loss, x, h=1e-5)
        g = obj.grad(x)
        worst = max(worst, np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1e-8))
    assert worst <= 1e-4


@pytest.mark.parametrize("name", list(FAMILIES))
def test_local_gradients_match_local_losses(name):
    obj = make(name, N=3, m=2)
    rng = np.random.default_rng(1)
    X = rng.uniform(-1, 1, (2, 3))
    G = grad_exact(obj, X)
    for i in range(2):
        def f(x, i=i):
            Y = X.copy()
            Y[i] = x
            return obj.worker_losses(Y)[i]
        fd = finite_difference_grad(f, X[i])
        assert np.allclose(fd, G[i], rtol=1e-4, atol=1e-7)


@pytest.mark.parametrize("name", list(FAMILIES))
def test_non_negative_loss(name):
    obj = make(name)
    pts = np.random.default_rng(9).uniform(-5, 5, (2000, obj.dim))
    assert np.min(obj.loss(pts)) >= -1e-12


def test_gradient_domination_quadratic():
    obj = make("quadratic", N=6, m=4)
    rng = np.random.default_rng(0)
    x = rng.uniform(-3, 3, (1000, obj.dim))
    g = obj.grad(x)
    lhs = np.sum(g * g, axis=1)
    rhs = 2 * obj.L * (obj.loss(x) - obj.g_star) + 1e-9
    assert np.all(lhs <= rhs)


def test_gradient_domination_equality_for_scaled_identity():
    L = 2.5
    obj = QuadraticConsensus(L * np.eye(3), np.random.default_rng(3).standard_normal((4, 3)))
    x = np.random.default_rng(4).uniform(-2, 2, (1000, 3))
    g = obj.grad(x)
    lhs = np.sum(g * g, axis=1)
    rhs = 2 * L * (obj.loss(x) - obj.g_star)
    assert np.max(np.abs(lhs - rhs)) <= 1e-9


def test_unknown_family_parameter():
    with pytest.raises(BadConfig):
        build_objective("soft_nonconvex", 3, 2, bogus=1)


def test_bad_quadratic_inputs():
    with pytest.raises(BadParam):
        QuadraticConsensus(-np.eye(2), np.zeros((2, 2)))
    with pytest.raises(BadParam):
        QuadraticConsensus(np.array([[1.0, 1.0], [0.0, 1.0]]), np.zeros((2, 2)))


def test_dataset_seed_determines_objective():
    a, b = make("soft", seed=4), make("soft", seed=4)
    assert np.array_equal(a.a, b.a) and np.array_equal(a.start_point, b.start_point)
    assert not np.array_equal(a.a, make("soft", seed=5).a)


def test_zero_heterogeneity_gives_identical_workers():
    # logistic workers hold different samples even without a shift
    for name in ("quadratic", "soft"):
        obj = make(name, h=0.0)
        x = np.random.default_rng(0).uniform(-1, 1, obj.dim)
        G = obj.worker_grads_at(x)
        assert np.max(np.abs(G - G[0])) <= 1e-12


def test_silent_noise_equals_exact():
    obj = make("soft")
    X = np.random.default_rng(0).uniform(-1, 1, (obj.m, obj.dim))
    streams = NoiseStreams([1], obj.m, obj.dim, NoiseKind.NONE)
    assert np.array_equal(grad_noisy(obj, NoiseModel(), X, streams), grad_exact(obj, X))


def test_rademacher_support_scalar():
    obj = build_objective("quadratic_consensus", 1, 1)
    x = np.array([[0.3]])
    exact = grad_exact(obj, x)[0, 0]
    streams = NoiseStreams([123], 1, 1, NoiseKind.RADEMACHER)
    vals = np.array([grad_noisy(obj, NoiseModel("rademacher", 0.1), x, streams)[0, 0]
                     for _ in range(4000)])
    ups = np.isclose(vals, exact + 0.1, rtol=0, atol=1e-15)
    downs = np.isclose(vals, exact - 0.1, rtol=0, atol=1e-15)
    assert np.all(ups | downs)
    assert abs(ups.mean() - 0.5) < 4 * 0.5 / np.sqrt(4000)


def _batch_noisy_mean(obj, noise, X, seeds, steps):
    streams = NoiseStreams(seeds, obj.m, obj.dim, noise.kind, chunk=steps)
    XS = np.broadcast_to(X, (len(seeds),) + X.shape)
    acc = np.zeros(X.shape)
    sq = np.zeros(X.shape)
    for _ in range(steps):
        G = grad_noisy(obj, noise, XS, streams)
        acc += G.sum(axis=0)
        sq += (G * G).sum(axis=0)
    n = len(seeds) * steps
    mean = acc / n
    return mean, np.sqrt(np.maximum(sq / n - mean * mean, 0) / n), n


def test_clt_mean_over_a_million_draws():
    obj = build_objective("quadratic_consensus", 1, 1, dataset_seed=1)
    X = np.array([[0.4]])
    mean, _, n = _batch_noisy_mean(obj, NoiseModel("rademacher", 0.1), X, list(range(1000)), 1000)
    assert n == 10**6
    assert abs(mean - grad_exact(obj, X))[0, 0] <= 4 * 0.1 / np.sqrt(n)


@pytest.mark.parametrize("name", list(FAMILIES))
@pytest.mark.parametrize("kind", ["gaussian", "rademacher"])
def test_unbiased_within_five_stderr(name, kind):
    obj = make(name, N=3, m=2)
    X = np.random.default_rng(2).uniform(-1, 1, (2, 3))
    mean, se, n = _batch_noisy_mean(obj, NoiseModel(kind, 0.5), X, list(range(200)), 500)
    assert n >= 10**5
    assert np.all(np.abs(mean - grad_exact(obj, X)) < 5 * se)


def test_assumption_report_basics():
    rng = np.random.default_rng(0)
    obj = make("soft", h=0.0)
    rep = estimate_assumptions(obj, NoiseModel(), 200, rng)
    assert rep.sigma0_sq_hat == 0.0
    assert rep.sigma1_sq_hat <= 1e-12
    assert rep.L_hat >= 0 and rep.M_hat >= 0 and rep.probes == 200
    with pytest.raises(BadParam):
        estimate_assumptions(obj, NoiseModel(), 50, rng)


def test_sigma0_matches_gaussian_variance():
    m, N, s = 4, 6, 0.3
    obj = make("quadratic", N=N, m=m)
    rep = estimate_assumptions(obj, NoiseModel("gaussian", s), 10**4, np.random.default_rng(1))
    assert abs(rep.sigma0_sq_hat / (m * N * s * s) - 1) <= 0.05


def test_heterogeneity_steers_sigma1():
    vals = [estimate_assumptions(make("quadratic", h=h), NoiseModel(), 200,
                                 np.random.default_rng(0)).sigma1_sq_hat for h in (0.1, 0.5, 1.0)]
    assert vals[0] < vals[1] < vals[2]
