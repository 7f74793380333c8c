import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pbgd.core import (
    ConstraintSet,
    InvalidConfigError,
    MissingOracleError,
    PenaltyKind,
    ProblemSpec,
    SmoothnessConstants,
    SolverConfig,
    penalized_gradient_grad_norm_sq,
    penalized_gradient_value_gap,
    penalized_objective,
    penalty_value,
    project,
    projected_gradient_metric,
    stack_xy,
)
from pbgd.problems import make_example_intro, make_quadratic, make_toy_nc
from pbgd.verify import finite_difference_grad

TWO_PI_3 = 2.0 * math.pi / 3.0


# ---------------------------------------------------------------------------
# projections


def test_project_box_clips_coordinatewise():
    box = ConstraintSet.box([0.0, 0.0], [1.0, 1.0])
    assert np.allclose(project(box, [1.7, -0.3]), [1.0, 0.0])


def test_project_simplex_symmetry():
    s = ConstraintSet.simplex(1.0, dim=2)
    assert np.allclose(project(s, [0.6, 0.6]), [0.5, 0.5])


def test_project_ball_radial_scaling():
    b = ConstraintSet.ball([0.0, 0.0], 2.0)
    assert np.allclose(project(b, [3.0, 4.0]), [1.2, 1.6])


def test_project_full_space_identity():
    f = ConstraintSet.full_space(3)
    v = np.array([1.0, -2.0, 0.5])
    assert np.array_equal(project(f, v), v)


def test_project_dimension_mismatch():
    box = ConstraintSet.box([0.0], [1.0])
    with pytest.raises(ValueError):
        project(box, [0.5, 0.5])


def test_project_rejects_nonfinite():
    with pytest.raises(ValueError):
        project(ConstraintSet.full_space(2), [np.nan, 0.0])


_sets = [
    ConstraintSet.box([-1.0, 0.0, 2.0], [1.0, 0.5, 3.0]),
    ConstraintSet.interval(-2.0, 2.0, dim=3),
    ConstraintSet.ball([0.5, -0.5, 0.0], 1.5),
    ConstraintSet.simplex(1.0, dim=3),
]


@pytest.mark.parametrize("cset", _sets, ids=[c.kind for c in _sets])
@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=6, max_size=6))
def test_projection_properties(cset, coords):
    u = np.array(coords[:3])
    v = np.array(coords[3:])
    pu, pv = cset.project(u), cset.project(v)
    # idempotence (up to roundoff) and fixed points
    assert np.linalg.norm(cset.project(pu) - pu) <= 1e-12 * (1.0 + np.linalg.norm(pu))
    assert np.linalg.norm(cset.project(pv) - pv) <= 1e-12 * (1.0 + np.linalg.norm(pv))
    # non-expansiveness
    assert np.linalg.norm(pu - pv) <= np.linalg.norm(u - v) + 1e-12


def test_simplex_projection_feasible():
    s = ConstraintSet.simplex(2.0, dim=4)
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = s.project(rng.uniform(-5, 5, size=4))
        assert np.all(p >= -1e-15)
        assert abs(p.sum() - 2.0) <= 1e-12


# ---------------------------------------------------------------------------
# penalty values and objectives


def test_penalty_value_quadratic():
    p = make_quadratic()
    x, y = np.zeros(1), np.array([0.3])
    assert penalty_value(p, PenaltyKind.VALUE_GAP, x, y) == pytest.approx(0.09)
    assert penalty_value(p, PenaltyKind.GRAD_NORM_SQ, x, y) == pytest.approx(0.36)
    assert penalty_value(p, PenaltyKind.GRAD_NORM, x, y) == pytest.approx(0.6)


def test_penalty_zero_at_minimizer():
    p = make_quadratic()
    x, y = np.zeros(1), np.zeros(1)
    for kind in PenaltyKind:
        assert penalty_value(p, kind, x, y) == pytest.approx(0.0, abs=1e-15)


def test_value_gap_requires_v():
    p = make_quadratic()
    bare = ProblemSpec(
        name="bare",
        d_x=1,
        d_y=1,
        f_eval=p.f_eval,
        f_grad=p.f_grad,
        g_eval=p.g_eval,
        g_grad=p.g_grad,
        upper_set=p.upper_set,
        lower_set=p.lower_set,
    )
    with pytest.raises(MissingOracleError):
        penalty_value(bare, PenaltyKind.VALUE_GAP, [0.0], [0.3])
    # explicit v_hat works without the oracle
    assert penalty_value(bare, PenaltyKind.VALUE_GAP, [0.0], [0.3], v_hat=0.0) == pytest.approx(0.09)


def test_gradient_penalties_need_unconstrained_lower():
    from pbgd.problems import make_constrained_toy

    p = make_constrained_toy()
    with pytest.raises(InvalidConfigError):
        penalty_value(p, PenaltyKind.GRAD_NORM_SQ, [1.0], [0.5])


def test_penalized_objective_examples():
    p = make_quadratic()
    x = np.zeros(1)
    assert penalized_objective(p, PenaltyKind.VALUE_GAP, 10.0, x, [0.3]) == pytest.approx(1.2)
    # minimum of y + gamma y^2 at y = -1/(2 gamma)
    assert penalized_objective(p, PenaltyKind.VALUE_GAP, 10.0, x, [-0.05]) == pytest.approx(-0.025)
    assert penalized_objective(p, PenaltyKind.VALUE_GAP, 0.0, x, [0.3]) == pytest.approx(0.3)


# ---------------------------------------------------------------------------
# penalized gradients


def _shifted_quadratic():
    # g = (y - x)^2, f = 0; S(x) = {x}
    return ProblemSpec(
        name="shifted",
        d_x=1,
        d_y=1,
        f_eval=lambda x, y: 0.0,
        f_grad=lambda x, y: np.zeros(2),
        g_eval=lambda x, y: float((y[0] - x[0]) ** 2),
        g_grad=lambda x, y: np.array([-2.0 * (y[0] - x[0]), 2.0 * (y[0] - x[0])]),
        upper_set=ConstraintSet.full_space(1),
        lower_set=ConstraintSet.full_space(1),
        analytic_lower_solution=lambda x: x.copy(),
        analytic_v=lambda x: 0.0,
        constants=SmoothnessConstants(L_g=2.0, mu=0.25),
    )


def test_value_gap_gradient_assembly():
    p = _shifted_quadratic()
    grad = penalized_gradient_value_gap(p, 1.0, [0.0], [1.0], y_hat=[0.0])
    # exact y_hat = x kills the x-correction: result is gamma * grad g
    assert np.allclose(grad, [-2.0, 2.0])


def test_value_gap_gradient_reduces_to_f_grad_on_solution_set():
    p = make_toy_nc()
    x = np.array([1.3])
    y_star = p.analytic_lower_solution(x)
    grad = penalized_gradient_value_gap(p, 7.0, x, y_star, y_hat=y_star)
    assert np.allclose(grad, p.f_grad(x, y_star), atol=1e-12)


@pytest.mark.parametrize("make", [make_quadratic, make_example_intro, make_toy_nc])
def test_value_gap_gradient_matches_fd(make):
    problem = make()
    rng = np.random.default_rng(5)
    gamma = 3.0
    for _ in range(20):
        x = problem.upper_set.project(rng.uniform(-2, 2, problem.d_x))
        y = rng.uniform(-2, 2, problem.d_y)
        y_star = problem.analytic_lower_solution(x)
        grad = penalized_gradient_value_gap(problem, gamma, x, y, y_hat=y_star)

        def F(z):
            xv, yv = z[: problem.d_x], z[problem.d_x :]
            return problem.f_eval(xv, yv) + gamma * (
                problem.g_eval(xv, yv) - problem.analytic_v(xv)
            )

        fd = finite_difference_grad(F, stack_xy(x, y))
        assert np.max(np.abs(fd - grad)) <= 1e-5 * (1.0 + np.linalg.norm(grad))


def test_grad_norm_sq_gradient_quadratic_example():
    p = make_quadratic()
    grad = penalized_gradient_grad_norm_sq(p, 1.0, [0.0], [0.3])
    assert np.allclose(grad, [0.0, 3.4])


def test_grad_norm_sq_gradient_vanishes_at_pathology():
    p = make_example_intro()
    for gamma in (1.0, 10.0, 100.0):
        grad = penalized_gradient_grad_norm_sq(p, gamma, [0.0], [TWO_PI_3])
        assert np.linalg.norm(grad) <= 1e-11 * (1.0 + gamma)


def test_grad_norm_sq_gradient_matches_fd():
    problem = make_example_intro()
    rng = np.random.default_rng(6)
    gamma = 2.5
    for _ in range(20):
        x, y = rng.uniform(-1, 1, 1), rng.uniform(-2, 2, 1)
        grad = penalized_gradient_grad_norm_sq(problem, gamma, x, y)

        def F(z):
            xv, yv = z[:1], z[1:]
            gy = problem.g_grad(xv, yv)[1:]
            return problem.f_eval(xv, yv) + gamma * float(gy @ gy)

        fd = finite_difference_grad(F, stack_xy(x, y))
        assert np.max(np.abs(fd - grad)) <= 1e-5 * (1.0 + np.linalg.norm(grad))


def test_grad_norm_sq_gradient_needs_hvp():
    p = _shifted_quadratic()  # no HVP oracles
    with pytest.raises(MissingOracleError):
        penalized_gradient_grad_norm_sq(p, 1.0, [0.0], [1.0])


# ---------------------------------------------------------------------------
# projected gradient metric


def test_projected_gradient_zero_at_penalized_minimizer():
    p = make_quadratic()
    gsq, G = projected_gradient_metric(p, PenaltyKind.VALUE_GAP, 10.0, 0.02, [0.0], [-0.05])
    assert gsq <= 1e-28
    assert np.allclose(G, 0.0)


def test_projected_gradient_interior_equals_gradient():
    p = make_toy_nc()
    x, y = np.array([1.0]), np.array([0.3])
    y_star = p.analytic_lower_solution(x)
    grad = penalized_gradient_value_gap(p, 2.0, x, y, y_hat=y_star)
    gsq, G = projected_gradient_metric(p, PenaltyKind.VALUE_GAP, 2.0, 1e-3, x, y, y_hat=y_star)
    assert np.allclose(G, grad)
    assert gsq == pytest.approx(float(grad @ grad))


def test_projected_gradient_drops_normal_component_on_face():
    # constrained toy at (2, 1): the y-gradient pushes beyond the active
    # face y = 1, so the y component of G vanishes while x passes through.
    from pbgd.problems import make_constrained_toy

    p = make_constrained_toy()
    x, y = np.array([2.0]), np.array([1.0])
    y_star = p.analytic_lower_solution(x)
    grad = penalized_gradient_value_gap(p, 5.0, x, y, y_hat=y_star)
    assert grad[1] < 0  # step would leave the box upward
    gsq, G = projected_gradient_metric(p, PenaltyKind.VALUE_GAP, 5.0, 0.01, x, y, y_hat=y_star)
    assert G[1] == pytest.approx(0.0, abs=1e-15)
    assert G[0] == pytest.approx(grad[0])
    assert gsq == pytest.approx(grad[0] ** 2)


def test_projected_gradient_rejects_grad_norm():
    p = make_quadratic()
    with pytest.raises(InvalidConfigError):
        projected_gradient_metric(p, PenaltyKind.GRAD_NORM, 1.0, 0.1, [0.0], [0.3])


# ---------------------------------------------------------------------------
# config and constants validation


def test_smoothness_constants_validation():
    SmoothnessConstants(L_f=0.0, L=0.0, L_g2=0.0)  # zeros fine for the L-family
    with pytest.raises(ValueError):
        SmoothnessConstants(mu=0.0)
    with pytest.raises(ValueError):
        SmoothnessConstants(L_g=-1.0)
    with pytest.raises(ValueError):
        SmoothnessConstants(L=float("inf"))


def test_solver_config_validation():
    SolverConfig(K=0)  # zero-iteration budget allowed: report echoes the start
    with pytest.raises(InvalidConfigError):
        SolverConfig(gamma=0.0)
    with pytest.raises(InvalidConfigError):
        SolverConfig(alpha=-0.1)
    with pytest.raises(InvalidConfigError):
        SolverConfig(q=1.0)
    with pytest.raises(InvalidConfigError):
        SolverConfig(batch_size=0)
    with pytest.raises(InvalidConfigError):
        SolverConfig(inner_schedule="sometimes")


def test_delta_schedule():
    cfg = SolverConfig(delta0=1e-2, q=2.0)
    assert cfg.delta_schedule(0) == pytest.approx(1e-2)
    assert cfg.delta_schedule(9) == pytest.approx(1e-4)
