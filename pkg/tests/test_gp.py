import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msbo import gp
from msbo.gp import GpHyperparams
from oracles import central_difference, dense_gp_posterior, lml_dense


def random_instance(rng, n=None, d=None):
    n = n or int(rng.integers(2, 41))
    d = d or int(rng.integers(1, 7))
    x = rng.random((n, d))
    y = np.sin(3 * x @ rng.standard_normal(d)) + 0.1 * rng.standard_normal(n)
    return x, y


def random_hyperparams(rng, d):
    return GpHyperparams(np.exp(rng.uniform(np.log(0.1), np.log(2.0), d)),
                         float(np.exp(rng.uniform(np.log(0.3), np.log(3.0)))),
                         float(np.exp(rng.uniform(np.log(1e-4), np.log(1e-1)))))


def test_kernel_closed_forms():
    hp = GpHyperparams(np.array([1.0]), 1.0, 1e-4)
    assert gp.kernel([0.3], [0.3], hp) == 1.0
    assert gp.kernel([0.0], [1.0], hp) == pytest.approx(math.exp(-0.5), abs=1e-15)
    hp2 = GpHyperparams(np.array([0.3, 0.7]), 2.5, 1e-4)
    assert gp.kernel([0.1, 0.9], [0.1, 0.9], hp2) == 2.5


def test_kernel_infinite_lengthscale_drops_dimension():
    hp_full = GpHyperparams(np.array([0.4, 1e300]), 1.3, 1e-4)
    hp_red = GpHyperparams(np.array([0.4]), 1.3, 1e-4)
    assert gp.kernel([0.1, 0.0], [0.6, 1.0], hp_full) == pytest.approx(gp.kernel([0.1], [0.6], hp_red), rel=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.lists(st.floats(0.01, 100), min_size=3, max_size=3), st.floats(1e-3, 1e3))
def test_kernel_symmetric_and_bounded(a, b, ls, s):
    hp = GpHyperparams(np.array(ls), s, 1e-4)
    k1, k2 = gp.kernel(a, b, hp), gp.kernel(b, a, hp)
    assert k1 == k2
    assert 0.0 <= k1 <= s


def test_posterior_matches_dense_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        x, y = random_instance(rng, n=30)
        hp = random_hyperparams(rng, x.shape[1])
        model = gp.condition(x, y, hp)
        q = rng.random((15, x.shape[1]))
        mean, var = gp.posterior(model, q)
        diag = hp.noise_variance + model.jitter * hp.output_scale
        m_ref, v_ref = dense_gp_posterior(x, y, q, hp.lengthscales, hp.output_scale, diag)
        assert np.max(np.abs(mean - m_ref)) <= 1e-8
        assert np.max(np.abs(var - v_ref)) <= 1e-8


def test_interpolation_at_training_points():
    rng = np.random.default_rng(2)
    x = rng.random((12, 2))
    y = np.cos(4 * x[:, 0]) + x[:, 1]
    hp = GpHyperparams(np.array([0.5, 0.5]), 1.0, 1e-8)
    model = gp.condition(x, y, hp)
    mean, var = gp.posterior(model, x)
    assert np.max(np.abs(mean - y)) <= 1e-6
    assert np.max(var / model.y_std**2) <= 1e-6 * hp.output_scale


def test_prior_reversion_far_from_data():
    rng = np.random.default_rng(3)
    x = rng.random((10, 1))
    y = 3.0 + np.sin(5 * x[:, 0])
    model = gp.condition(x, y, GpHyperparams(np.array([0.1]), 1.7, 1e-4))
    mean, var = gp.posterior(model, np.array([[50.0]]))
    assert mean[0] == pytest.approx(y.mean(), abs=1e-12)
    assert var[0] == pytest.approx(1.7 * y.std() ** 2, rel=1e-12)


def test_variance_never_exceeds_prior_plus_noise():
    rng = np.random.default_rng(4)
    for _ in range(10):
        x, y = random_instance(rng)
        model = gp.fit(x, y, n_starts=2, max_iter=50)
        _, var = model.posterior_standardised(rng.random((200, x.shape[1])) * 1.5 - 0.25)
        hp = model.hyperparams
        assert np.all(var >= 0)
        assert np.all(var <= hp.output_scale + hp.noise_variance + 1e-10)


def test_fit_improves_on_default_start():
    x = np.linspace(0, 1, 20)[:, None]
    y = np.sin(6 * x[:, 0]) + 0.5 * x[:, 0]
    model = gp.fit(x, y)
    default = gp.condition(x, y, GpHyperparams.default(1))
    assert model.log_marginal_likelihood() >= default.log_marginal_likelihood()


def test_fit_gradient_vanishes_at_interior_optimum():
    rng = np.random.default_rng(5)
    x = rng.random((25, 1))
    y = np.sin(6 * x[:, 0]) + 0.05 * rng.standard_normal(25)
    model = gp.fit(x, y)
    theta = model.hyperparams.to_log()
    lo, hi = np.array(gp.log_bounds(1)).T
    interior = (theta > lo + 1e-3) & (theta < hi - 1e-3)
    assert interior.all()
    assert np.linalg.norm(gp.log_marginal_likelihood_grad(model)) <= 1e-5


def test_fit_constant_targets():
    x = np.random.default_rng(6).random((8, 2))
    model = gp.fit(x, np.full(8, 4.2))
    mean, _ = gp.posterior(model, np.random.default_rng(7).random((20, 2)))
    assert np.allclose(mean, 4.2, atol=1e-9)


def test_fit_single_point_uses_defaults():
    model = gp.fit([[0.3, 0.4]], [1.5])
    hp = model.hyperparams
    assert np.array_equal(hp.lengthscales, [0.5, 0.5])
    assert hp.output_scale == 1.0 and hp.noise_variance == 1e-6
    mean, _ = model.posterior([[0.3, 0.4]])
    assert mean[0] == pytest.approx(1.5)


def test_fit_rejects_non_finite():
    with pytest.raises(ValueError):
        gp.fit([[0.1], [0.2]], [1.0, np.nan])


def test_fit_is_order_insensitive():
    rng = np.random.default_rng(8)
    x, y = random_instance(rng, n=20, d=2)
    perm = rng.permutation(20)
    a = gp.fit(x, y)
    b = gp.fit(x[perm], y[perm])
    q = rng.random((30, 2))
    assert np.max(np.abs(a.posterior(q)[0] - b.posterior(q)[0])) <= 1e-8


def test_recover_known_lengthscale():
    """Data drawn from the exact prior; the fitted lengthscale should land near the truth."""
    hits = 0
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        x = rng.random((200, 1))
        k = gp.kernel_matrix(x, x, GpHyperparams(np.array([0.2]), 1.0, 0.01)) + 0.01 * np.eye(200)
        y = np.linalg.cholesky(k + 1e-10 * np.eye(200)) @ rng.standard_normal(200)
        ls = gp.fit(x, y, n_starts=4).hyperparams.lengthscales[0]
        hits += 0.1 <= ls <= 0.4
    assert hits >= 8


def test_lml_matches_dense_oracle_and_gradient_fd():
    rng = np.random.default_rng(9)
    for _ in range(10):
        x, y = random_instance(rng)
        model = gp.condition(x, y, random_hyperparams(rng, x.shape[1]))
        theta = model.hyperparams.to_log()
        ref = lml_dense(theta, x, model.train_y_std, model.jitter)
        assert model.log_marginal_likelihood() == pytest.approx(ref, abs=1e-8 * max(1.0, abs(ref)))
        fd = central_difference(lambda t: gp.log_marginal_likelihood(model, t), theta)
        an = gp.log_marginal_likelihood_grad(model, theta)
        assert np.all(np.abs(an - fd) <= 1e-4 * np.maximum(np.abs(fd), 1e-2))


def test_gradient_finite_on_duplicated_data():
    rng = np.random.default_rng(10)
    x = rng.random((10, 2))
    y = rng.standard_normal(10)
    xx, yy = np.vstack([x, x]), np.concatenate([y, y])
    hp = GpHyperparams(np.array([0.5, 0.5]), 1.0, 1e-8)
    model = gp.condition(xx, yy, hp)
    assert np.all(np.isfinite(gp.log_marginal_likelihood_grad(model)))


def test_cholesky_reproduces_matrix():
    rng = np.random.default_rng(11)
    x, y = random_instance(rng, n=40, d=3)
    model = gp.fit(x, y, n_starts=2)
    hp = model.hyperparams
    k = gp.kernel_matrix(x, x, hp) + (hp.noise_variance + model.jitter * hp.output_scale) * np.eye(40)
    rel = np.linalg.norm(model.chol @ model.chol.T - k) / np.linalg.norm(k)
    assert rel <= 1e-10


def test_standardise_round_trip():
    y = np.random.default_rng(12).standard_normal(50) * 7 + 3
    z, m, s = gp.standardise(y)
    assert np.max(np.abs(gp.destandardise(z, m, s) - y)) <= 1e-12


def test_sample_posterior_statistics():
    rng = np.random.default_rng(13)
    x, y = random_instance(rng, n=15, d=2)
    model = gp.fit(x, y, n_starts=2)
    q = np.array([[0.37, 0.61]])
    mean, var = model.posterior(q)
    draws = gp.sample_posterior(model, q, 100_000, np.random.default_rng(0))[:, 0]
    se = math.sqrt(var[0] / 100_000)
    assert abs(draws.mean() - mean[0]) <= 3 * se
    # standard error of the sample std is about sigma / sqrt(2n)
    assert abs(draws.std(ddof=1) - math.sqrt(var[0])) <= 3 * math.sqrt(var[0] / 200_000)


def test_sample_posterior_joint_covariance():
    rng = np.random.default_rng(14)
    x, y = random_instance(rng, n=10, d=1)
    model = gp.condition(x, y, GpHyperparams(np.array([0.3]), 1.0, 1e-3))
    q = np.array([[0.2], [0.25], [0.9]])
    _, cov = model.posterior_cov(q)
    draws = gp.sample_posterior(model, q, 200_000, np.random.default_rng(1))
    assert np.allclose(np.cov(draws.T), cov, atol=0.02 * np.max(np.diag(cov)) + 1e-9)


def test_sample_posterior_deterministic_and_degenerate():
    x = np.array([[0.1], [0.5], [0.9]])
    model = gp.condition(x, [1.0, 2.0, 0.5], GpHyperparams(np.array([0.3]), 1.0, 1e-8))
    a = gp.sample_posterior(model, [[0.4]], 5, np.random.default_rng(3))
    b = gp.sample_posterior(model, [[0.4]], 5, np.random.default_rng(3))
    assert np.array_equal(a, b)
    # posterior variance at a point far beyond every lengthscale with zero output scale
    flat = gp.condition(x, [1.0, 2.0, 0.5], GpHyperparams(np.array([0.3]), 1e-300, 1e-8))
    draws = gp.sample_posterior(flat, [[0.4]], 10, np.random.default_rng(4))
    assert np.all(draws == draws[0, 0])
    with pytest.raises(ValueError):
        gp.sample_posterior(model, [[0.4]], 0, np.random.default_rng(0))
