"""Outer loops of the penalty-based bilevel gradient descent family.

``pbgd`` is the generic penalized projected-gradient loop; ``v_pbgd``,
``v_pbgd_constrained`` and ``g_pbgd`` are its value-gap (unconstrained /
constrained lower level) and gradient-norm-squared specializations;
``v_pbsgd`` is the stochastic value-gap variant with minibatch outer updates
and a step-size-weighted inner solver.
"""

from __future__ import annotations

import time
from typing import Optional

import numpy as np

from .core import (
    DivergedError,
    InvalidConfigError,
    IterateRecord,
    MissingOracleError,
    PenaltyKind,
    ProblemSpec,
    SolveReport,
    SolverConfig,
    Termination,
    as_vector,
    penalized_gradient_grad_norm_sq,
    penalized_gradient_value_gap,
    project_product,
    rng_stream,
    stack_xy,
)
from .inner import inner_iteration_schedule, lower_gd, lower_projected_gd, lower_sgd_weighted

__all__ = [
    "pbgd",
    "v_pbgd",
    "v_pbgd_constrained",
    "g_pbgd",
    "v_pbsgd",
    "auto_alpha",
    "auto_beta",
]

# named RNG sub-streams
_STREAM_INNER = 1
_STREAM_OUTER_F = 2
_STREAM_OUTER_G = 3


def auto_beta(problem: ProblemSpec) -> float:
    """Canonical inner step size ``beta = 1 / L_g``."""
    problem.constants.require("L_g")
    return 1.0 / problem.constants.L_g


def auto_alpha(problem: ProblemSpec, gamma: float, penalty: PenaltyKind, constrained: bool) -> float:
    """Constants-based outer step size.

    Value gap: ``1 / (L_f + gamma (2 L_g + L_g^2 mu))`` unconstrained and
    ``1 / (L_f + gamma (L_g + L_v))`` constrained.  Gradient-norm-squared:
    ``1 / (L_f + 2 gamma L_g^2)``, the curvature bound of the penalty for a
    quadratic lower level (heuristic otherwise).
    """
    c = problem.constants
    if penalty == PenaltyKind.VALUE_GAP:
        if constrained:
            c.require("L_f", "L_g", "L_v")
            return 1.0 / (c.L_f + gamma * (c.L_g + c.L_v))
        c.require("L_f", "L_g", "mu")
        return 1.0 / (c.L_f + gamma * (2.0 * c.L_g + c.L_g**2 * c.mu))
    if penalty == PenaltyKind.GRAD_NORM_SQ:
        c.require("L_f", "L_g")
        return 1.0 / (c.L_f + 2.0 * gamma * c.L_g**2)
    raise InvalidConfigError("no automatic step size for this penalty kind")


def _resolve_steps(
    problem: ProblemSpec,
    config: SolverConfig,
    constrained: bool,
    notes: list,
) -> tuple[float, Optional[float]]:
    alpha = config.alpha
    if alpha is None:
        alpha = auto_alpha(problem, config.gamma, config.penalty, constrained)
        notes.append(f"auto alpha = {alpha:.6g}")
    if config.penalty != PenaltyKind.VALUE_GAP:
        return alpha, None
    beta = config.beta
    if beta is None:
        beta = auto_beta(problem)
        notes.append(f"auto beta = {beta:.6g}")
    return alpha, beta


def _inner_T(
    problem: ProblemSpec,
    config: SolverConfig,
    alpha: float,
    beta: float,
    k: int,
    constrained: bool,
    notes: list,
) -> int:
    if config.inner_schedule == "fixed":
        return config.inner_T
    c = problem.constants
    c.require("mu", "L_g")
    c_beta = 1.0 - beta / (2.0 * c.mu)
    if c_beta <= 0.0:
        # beta = 2 mu: the geometric factor degenerates to zero, one exact step
        if not any(n.startswith("log schedule degenerate") for n in notes):
            notes.append("log schedule degenerate (c_beta <= 0): using T_k = 1")
        return 1
    return inner_iteration_schedule(
        k,
        alpha,
        beta,
        config.gamma,
        c.mu,
        c.L_g,
        mode="constrained" if constrained else "unconstrained",
    )


def _start(problem: ProblemSpec, config: SolverConfig) -> np.ndarray:
    if config.x0 is not None or config.y0 is not None:
        if config.x0 is None or config.y0 is None:
            raise InvalidConfigError("supply both x0 and y0 or neither")
        x0 = as_vector(config.x0, problem.d_x, "x0")
        y0 = as_vector(config.y0, problem.d_y, "y0")
    else:
        x0, y0 = problem.start_point()
    return project_product(problem.upper_set, problem.lower_set, stack_xy(x0, y0))


def _clamp_penalty(p: float, record_flags: list) -> tuple[float, bool]:
    # Definition-1 penalties are nonnegative; tiny negatives can only come
    # from an inexact v-hat and are clamped and flagged.
    if p < 0.0:
        record_flags.append(p)
        return 0.0, True
    return p, False


def _finish(
    problem: ProblemSpec,
    config: SolverConfig,
    algorithm: str,
    trace: list,
    iterates: list,
    final_z: np.ndarray,
    termination: Termination,
    penalty_source: str,
    final_inner_y: Optional[np.ndarray],
    notes: list,
    resolved_steps: Optional[dict] = None,
) -> SolveReport:
    x, y = final_z[: problem.d_x], final_z[problem.d_x :]
    return SolveReport(
        final_x=x,
        final_y=y,
        trace=trace,
        termination=termination,
        config=config,
        problem_name=problem.name,
        algorithm=algorithm,
        penalty_source=penalty_source,
        iterates=np.array(iterates).reshape(len(iterates), problem.dim),
        final_inner_y=final_inner_y,
        notes=notes,
        resolved_steps=resolved_steps or {},
    )


def _run_deterministic(problem: ProblemSpec, config: SolverConfig, algorithm: str) -> SolveReport:
    constrained = not problem.lower_set.is_full
    value_gap = config.penalty == PenaltyKind.VALUE_GAP
    if config.penalty == PenaltyKind.GRAD_NORM:
        raise InvalidConfigError("the grad-norm penalty is handled by proxlinear.pbpl")
    if not value_gap:
        if constrained:
            raise InvalidConfigError("grad-norm-sq penalty requires an unconstrained lower level")
        if not problem.has_hvp:
            raise MissingOracleError("grad-norm-sq penalty needs Hessian-vector product oracles")

    notes: list = []
    alpha, beta = _resolve_steps(problem, config, constrained, notes)
    z = _start(problem, config)
    y_init = z[problem.d_x :].copy()

    if value_gap:
        penalty_source = "analytic-v" if problem.analytic_v is not None else "inner-estimate"
    else:
        penalty_source = "exact"

    trace: list = []
    iterates: list = []
    negative_penalties: list = []
    y_hat: Optional[np.ndarray] = None
    termination = Termination.BUDGET_EXHAUSTED

    for k in range(1, config.K + 1):
        tick = time.perf_counter_ns()
        x, y = z[: problem.d_x], z[problem.d_x :]
        inner_used = 0
        try:
            if value_gap:
                T_k = _inner_T(problem, config, alpha, beta, k, constrained, notes)
                w0 = y if config.warm_start else y_init
                solve = lower_projected_gd if constrained else lower_gd
                inner = solve(problem, x, w0, beta, T_k)
                y_hat = inner.y_hat
                inner_used = inner.iters
                grad = penalized_gradient_value_gap(problem, config.gamma, x, y, y_hat)
                if problem.analytic_v is not None:
                    v_hat = float(problem.analytic_v(x))
                else:
                    v_hat = float(problem.g_eval(x, y_hat))
                p_k = float(problem.g_eval(x, y)) - v_hat
            else:
                grad = penalized_gradient_grad_norm_sq(problem, config.gamma, x, y)
                gy = problem.grad_y_g(x, y)
                p_k = float(gy @ gy)
        except DivergedError as err:
            notes.append(f"inner solve diverged at k={k}: {err}")
            termination = Termination.DIVERGED
            break

        p_k, clamped = _clamp_penalty(p_k, negative_penalties)
        f_k = float(problem.f_eval(x, y))
        z_next = project_product(problem.upper_set, problem.lower_set, z - alpha * grad)
        G = (z - z_next) / alpha
        gsq = float(G @ G)
        trace.append(
            IterateRecord(
                k=k,
                f_value=f_k,
                penalty_value=p_k,
                F_gamma=f_k + config.gamma * p_k,
                proj_grad_norm_sq=gsq,
                inner_iters_used=inner_used,
                elapsed_ns=time.perf_counter_ns() - tick,
                penalty_clamped=clamped,
            )
        )
        iterates.append(z.copy())

        if gsq <= config.tol_proj_grad**2:
            termination = Termination.STATIONARITY_REACHED
            break
        if not np.all(np.isfinite(z_next)) or np.linalg.norm(z_next) > config.max_iterate_norm:
            termination = Termination.DIVERGED
            break
        z = z_next

    if negative_penalties:
        notes.append(
            f"{len(negative_penalties)} value-gap evaluations clamped to 0 "
            f"(most negative {min(negative_penalties):.3e})"
        )
    return _finish(
        problem, config, algorithm, trace, iterates, z, termination, penalty_source, y_hat, notes,
        resolved_steps={"alpha": alpha, "beta": beta},
    )


def pbgd(problem: ProblemSpec, config: SolverConfig) -> SolveReport:
    """Generic penalized bilevel gradient descent.

    Each outer iteration assembles the penalty gradient ``h_k`` per the
    configured kind (value gap via an inner lower-level solve, gradient norm
    squared exactly) and takes the projected step
    ``z <- Proj_Z(z - alpha (grad f + gamma h_k))``; the loop stops at the
    iteration budget or once ``||G_gamma|| <= tol``.
    """
    return _run_deterministic(problem, config, "pbgd")


def v_pbgd(problem: ProblemSpec, config: SolverConfig) -> SolveReport:
    """Value-gap PBGD with warm-started inner GD (unconstrained lower level)."""
    if config.penalty != PenaltyKind.VALUE_GAP:
        raise InvalidConfigError("v_pbgd runs the value-gap penalty")
    if not problem.lower_set.is_full:
        raise InvalidConfigError("v_pbgd requires an unconstrained lower level")
    return _run_deterministic(problem, config, "v-pbgd")


def v_pbgd_constrained(problem: ProblemSpec, config: SolverConfig) -> SolveReport:
    """Value-gap PBGD with projected inner GD over a compact lower-level set."""
    if config.penalty != PenaltyKind.VALUE_GAP:
        raise InvalidConfigError("v_pbgd_constrained runs the value-gap penalty")
    if problem.lower_set.is_full:
        raise InvalidConfigError("v_pbgd_constrained needs a bounded lower-level set")
    if not problem.lower_set.is_bounded:
        raise InvalidConfigError("lower-level set must be bounded")
    return _run_deterministic(problem, config, "v-pbgd-con")


def g_pbgd(problem: ProblemSpec, config: SolverConfig) -> SolveReport:
    """PBGD with the exact gradient-norm-squared penalty (no inner loop)."""
    if config.penalty != PenaltyKind.GRAD_NORM_SQ:
        config = config.with_updates(penalty=PenaltyKind.GRAD_NORM_SQ)
    return _run_deterministic(problem, config, "g-pbgd")


def v_pbsgd(problem: ProblemSpec, config: SolverConfig) -> SolveReport:
    """Stochastic value-gap PBGD (minibatch outer updates, weighted inner SGD).

    Per outer iteration the same lower-level gradient samples are used at
    ``(x_k, y_k)`` and at ``(x_k, y_hat_k)`` (two identically seeded
    generator streams), so the sampling noise of the x-block difference
    cancels; the whole run is deterministic under a fixed seed.
    """
    if config.penalty != PenaltyKind.VALUE_GAP:
        raise InvalidConfigError("v_pbsgd runs the value-gap penalty")
    if not problem.has_stochastic:
        raise MissingOracleError("v_pbsgd needs f_grad_sample and g_grad_sample oracles")
    if not problem.lower_set.is_full:
        raise InvalidConfigError("v_pbsgd requires an unconstrained lower level")

    notes: list = []
    alpha, _ = _resolve_steps(problem, config, constrained=False, notes=notes)
    problem.constants.require("L_g")
    L_g = problem.constants.L_g
    T = max(1, config.inner_T)
    M = config.batch_size

    betas = 1.0 / (L_g * np.sqrt(np.arange(1, T + 1, dtype=float)))
    if problem.constants.mu is not None:
        need = 192.0 * problem.constants.mu * L_g**2
        if float(np.sum(betas**2)) < need:
            notes.append(
                f"sum beta_t^2 = {float(np.sum(betas ** 2)):.3g} < 192 mu L_g^2 = {need:.3g}; "
                "the stochastic rate simplification does not apply at this T"
            )

    z = _start(problem, config)
    penalty_source = "analytic-v" if problem.analytic_v is not None else "inner-estimate"
    trace: list = []
    iterates: list = []
    negative_penalties: list = []
    y_hat: Optional[np.ndarray] = None
    termination = Termination.BUDGET_EXHAUSTED
    dx = problem.d_x

    for k in range(1, config.K + 1):
        tick = time.perf_counter_ns()
        x, y = z[:dx], z[dx:]
        try:
            inner = lower_sgd_weighted(
                problem, x, y, T, L_g, rng_stream(config.seed, _STREAM_INNER, k), batch=M
            )
        except DivergedError as err:
            notes.append(f"inner solve diverged at k={k}: {err}")
            termination = Termination.DIVERGED
            break
        y_hat = inner.y_hat

        gf = problem.f_grad_sample(x, y, rng_stream(config.seed, _STREAM_OUTER_F, k), M)
        gg_at_z = problem.g_grad_sample(x, y, rng_stream(config.seed, _STREAM_OUTER_G, k), M)
        gg_at_hat = problem.g_grad_sample(x, y_hat, rng_stream(config.seed, _STREAM_OUTER_G, k), M)
        grad = np.mean(gf, axis=0) + config.gamma * np.mean(gg_at_z, axis=0)
        grad[:dx] -= config.gamma * np.mean(gg_at_hat, axis=0)[:dx]

        if problem.analytic_v is not None:
            v_hat = float(problem.analytic_v(x))
        else:
            v_hat = float(problem.g_eval(x, y_hat))
        p_k, clamped = _clamp_penalty(float(problem.g_eval(x, y)) - v_hat, negative_penalties)
        f_k = float(problem.f_eval(x, y))

        z_next = project_product(problem.upper_set, problem.lower_set, z - alpha * grad)
        G = (z - z_next) / alpha
        gsq = float(G @ G)
        trace.append(
            IterateRecord(
                k=k,
                f_value=f_k,
                penalty_value=p_k,
                F_gamma=f_k + config.gamma * p_k,
                proj_grad_norm_sq=gsq,
                inner_iters_used=inner.iters,
                elapsed_ns=time.perf_counter_ns() - tick,
                penalty_clamped=clamped,
            )
        )
        iterates.append(z.copy())

        if gsq <= config.tol_proj_grad**2:
            termination = Termination.STATIONARITY_REACHED
            break
        if not np.all(np.isfinite(z_next)) or np.linalg.norm(z_next) > config.max_iterate_norm:
            termination = Termination.DIVERGED
            break
        z = z_next

    if negative_penalties:
        notes.append(
            f"{len(negative_penalties)} value-gap evaluations clamped to 0 "
            f"(most negative {min(negative_penalties):.3e})"
        )
    return _finish(
        problem, config, "v-pbsgd", trace, iterates, z, termination, penalty_source, y_hat, notes,
        resolved_steps={"alpha": alpha, "beta_schedule": f"1/(L_g sqrt(t)), T={T}"},
    )
