import math

import numpy as np
import pytest
from scipy import optimize

from pbgd.core import PenaltyKind, penalty_value
from pbgd.problems import (
    analytic_lower_solution,
    catalog_entry,
    catalog_names,
    make_constrained_toy,
    make_example_intro,
    make_hyperclean_data,
    make_hyperclean_synthetic,
    make_quadratic,
    make_toy_nc,
    sigmoid,
)

TWO_PI_3 = 2.0 * math.pi / 3.0


def test_catalog_names():
    assert catalog_names() == [
        "constrained-toy",
        "example-intro",
        "hyperclean-synthetic",
        "quadratic",
        "toy-nc",
    ]


def test_catalog_entry_metadata():
    e = catalog_entry("quadratic")
    assert e.has_analytic_solution_set
    assert e.grad_norm_convex
    assert e.declared_rho[PenaltyKind.VALUE_GAP] == 1.0
    assert not catalog_entry("example-intro").grad_norm_convex


def test_unknown_problem():
    with pytest.raises(KeyError):
        catalog_entry("nonexistent")


# ---------------------------------------------------------------------------
# quadratic


def test_quadratic_closed_forms():
    p = make_quadratic()
    x = np.zeros(1)
    assert p.analytic_v(x) == 0.0
    assert analytic_lower_solution(p, x)[0] == 0.0
    # penalized minimizer -1/(2 gamma) and its value-gap eps = 1/(4 gamma^2)
    gamma = 10.0
    y_gamma = np.array([-1.0 / (2 * gamma)])
    assert y_gamma[0] == -0.05
    assert penalty_value(p, PenaltyKind.VALUE_GAP, x, y_gamma) == pytest.approx(0.0025)


# ---------------------------------------------------------------------------
# introductory example


def test_example_intro_solution_set():
    p = make_example_intro()
    x = np.zeros(1)
    assert p.g_eval(x, np.zeros(1)) == 0.0
    rng = np.random.default_rng(0)
    for _ in range(200):
        y = rng.uniform(-8, 8, 1)
        if abs(y[0]) > 1e-9:
            assert p.g_eval(x, y) > 0.0
    assert p.f_eval(x, np.zeros(1)) == pytest.approx(0.75)


def test_example_intro_pathology_is_stationary_for_all_gamma():
    from pbgd.core import penalized_gradient_grad_norm_sq

    p = make_example_intro()
    f_bad = p.f_eval(np.zeros(1), np.array([TWO_PI_3]))
    f_opt = p.f_eval(np.zeros(1), np.zeros(1))
    assert f_bad < f_opt or f_bad == pytest.approx(0.0)  # f(2pi/3) = 0 < f(0)
    for gamma in (1.0, 10.0, 100.0):
        g = penalized_gradient_grad_norm_sq(p, gamma, [0.0], [TWO_PI_3])
        assert np.linalg.norm(g) <= 1e-11 * (1 + gamma)


# ---------------------------------------------------------------------------
# nonconvex toy


def test_toy_nc_solution_set_and_value():
    p = make_toy_nc()
    for xv in np.linspace(0, 3, 13):
        x = np.array([xv])
        y_star = analytic_lower_solution(p, x)
        assert y_star[0] == -xv
        assert p.analytic_v(x) == 0.0
        assert abs(p.grad_y_g(x, y_star)[0]) <= 1e-12
        assert p.g_eval(x, y_star) <= 1e-15


def reduced_local_minimizers():
    """Independent grid-search oracle for the minimizers of f(x, -x)."""
    p = make_toy_nc()

    def phi(xv):
        return p.f_eval(np.array([xv]), np.array([-xv]))

    xs = np.linspace(0.0, 3.0, 30001)  # resolution 1e-4
    vals = np.array([phi(x) for x in xs])
    mins = []
    for i in range(1, len(xs) - 1):
        if vals[i] < vals[i - 1] and vals[i] <= vals[i + 1]:
            res = optimize.minimize_scalar(
                phi, bounds=(xs[i - 1], xs[i + 1]), method="bounded",
                options={"xatol": 1e-12},
            )
            mins.append(float(res.x))
    # boundary checks: a boundary point is a local minimizer if phi increases
    # moving inward
    if vals[1] >= vals[0]:
        mins.insert(0, float(xs[0]))
    if vals[-2] >= vals[-1]:
        mins.append(float(xs[-1]))
    return np.array(mins)


def test_toy_nc_reduced_minimizers():
    mins = reduced_local_minimizers()
    assert len(mins) == 3
    assert np.allclose(mins, [0.3823514, 1.2151419, 2.8296326], atol=1e-4)


# ---------------------------------------------------------------------------
# constrained toy


def test_constrained_toy_oracles():
    p = make_constrained_toy()
    assert analytic_lower_solution(p, np.array([1.5]))[0] == 1.0
    assert p.analytic_v(np.array([1.5])) == pytest.approx(0.25)
    assert analytic_lower_solution(p, np.array([0.3]))[0] == pytest.approx(0.3)
    assert p.analytic_v(np.array([0.3])) == 0.0


def test_constrained_toy_bilevel_solution_by_grid():
    p = make_constrained_toy()
    xs = np.linspace(0, 2, 20001)
    vals = [
        p.f_eval(np.array([x]), p.analytic_lower_solution(np.array([x]))) for x in xs
    ]
    best = xs[int(np.argmin(vals))]
    assert abs(best - 1.0) <= 1e-4
    assert min(vals) == pytest.approx(0.0, abs=1e-8)


# ---------------------------------------------------------------------------
# hyperclean synthetic


def test_hyperclean_data_shapes_and_determinism():
    d1 = make_hyperclean_data(n_train=50, n_val=30, dim=4, noise_rate=0.2, seed=9)
    d2 = make_hyperclean_data(n_train=50, n_val=30, dim=4, noise_rate=0.2, seed=9)
    assert d1.A_train.shape == (50, 4)
    assert d1.corrupted.sum() == 10
    assert np.array_equal(d1.A_train, d2.A_train)
    assert np.array_equal(d1.b_train, d2.b_train)
    assert set(np.unique(d1.b_train)) <= {-1.0, 1.0}
    # corrupted labels are flipped teacher labels
    assert not np.array_equal(d1.corrupted, make_hyperclean_data(seed=10).corrupted[:50])


def test_hyperclean_invalid_sizes():
    with pytest.raises(ValueError):
        make_hyperclean_data(n_train=0)
    with pytest.raises(ValueError):
        make_hyperclean_data(noise_rate=1.5)
    with pytest.raises(ValueError):
        make_hyperclean_data(lambda_reg=0.0)


def test_hyperclean_uniform_weights_reduce_to_plain_logistic():
    # all x_i equal (zero): the lower level is plain logistic regression
    # with regularization lambda / sigmoid(0) = 2 lambda
    data = make_hyperclean_data(n_train=40, n_val=30, dim=3, noise_rate=0.0,
                                lambda_reg=0.02, seed=2)
    p = make_hyperclean_synthetic(data=data)
    x0 = np.zeros(p.d_x)

    def baseline(w):
        losses = np.logaddexp(0.0, -data.b_train * (data.A_train @ w))
        return 0.5 * float(np.mean(losses)) + 0.01 * float(w @ w)

    w1 = optimize.minimize(lambda w: p.g_eval(x0, w), np.zeros(3), method="BFGS").x
    w2 = optimize.minimize(baseline, np.zeros(3), method="BFGS").x
    assert np.allclose(w1, w2, atol=1e-5)
    assert p.f_eval(x0, w1) == pytest.approx(p.f_eval(x0, w2), abs=1e-8)


def test_hyperclean_mu_constant():
    p = make_hyperclean_synthetic(n_train=20, n_val=10, dim=2, lambda_reg=0.05, seed=1)
    assert p.constants.mu == pytest.approx(1.0 / 0.1)


def test_hyperclean_stochastic_oracles_shared_sample_contract():
    from pbgd.core import rng_stream

    p = make_hyperclean_synthetic(n_train=30, n_val=20, dim=3, seed=4)
    x = np.full(30, 0.3)
    w1, w2 = np.zeros(3), np.full(3, 0.5)
    a = p.g_grad_sample(x, w1, rng_stream(5, 1), 8)
    b = p.g_grad_sample(x, w2, rng_stream(5, 1), 8)
    # identical generator streams draw identical sample indices: the x-block
    # support pattern coincides even though the evaluation points differ
    assert np.array_equal(a[:, :30] != 0.0, b[:, :30] != 0.0)
    # unbiasedness: many-sample mean approaches the exact gradient
    big = p.g_grad_sample(x, w2, rng_stream(6, 1), 60000).mean(axis=0)
    exact = p.g_grad(x, w2)
    assert np.linalg.norm(big - exact) <= 2e-2 * (1 + np.linalg.norm(exact))


def test_sigmoid_stability():
    v = sigmoid(np.array([-800.0, 0.0, 800.0]))
    assert v[0] == 0.0 and v[1] == 0.5 and v[2] == 1.0
