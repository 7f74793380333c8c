"""Lower-level solvers and the inner iteration schedule.

Plain gradient descent for an unconstrained lower level, projected gradient
descent for a compact lower-level set, a step-size-weighted stochastic
variant, and the logarithmic iteration-count rule used by the warm-started
outer loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    DivergedError,
    MissingOracleError,
    ProblemSpec,
    as_vector,
)

__all__ = [
    "InnerResult",
    "lower_gd",
    "lower_projected_gd",
    "lower_sgd_weighted",
    "inner_iteration_schedule",
]

_DIVERGENCE_NORM = 1e12


@dataclass
class InnerResult:
    """Outcome of one lower-level solve.

    ``final_lower_gap`` is ``g(x, y_hat) - v(x)`` when the problem supplies
    an analytic value oracle; ``final_grad_norm`` is the lower-level
    gradient norm (projected-gradient norm for a constrained lower level).
    """

    y_hat: np.ndarray
    iters: int
    final_lower_gap: Optional[float]
    final_grad_norm: float


def _gap(problem: ProblemSpec, x: np.ndarray, y: np.ndarray) -> Optional[float]:
    if problem.analytic_v is None:
        return None
    return float(problem.g_eval(x, y)) - float(problem.analytic_v(x))


def _guard(omega: np.ndarray, last: np.ndarray) -> None:
    if not np.all(np.isfinite(omega)) or np.linalg.norm(omega) > _DIVERGENCE_NORM:
        raise DivergedError("lower-level iterate diverged", state=last)


def lower_gd(problem: ProblemSpec, x, y0, beta: float, T: int) -> InnerResult:
    """Run ``T`` gradient steps ``w <- w - beta * grad_y g(x, w)`` from ``y0``.

    The recommended step size is ``beta in (0, 1/L_g]``; with the lower
    objective PL the suboptimality gap then contracts geometrically.
    """
    if beta <= 0:
        raise ValueError("beta must be > 0")
    if T < 0:
        raise ValueError("T must be >= 0")
    x = as_vector(x, problem.d_x, "x")
    omega = as_vector(y0, problem.d_y, "y0").copy()
    for _ in range(T):
        new = omega - beta * problem.grad_y_g(x, omega)
        _guard(new, omega)
        omega = new
    gy = problem.grad_y_g(x, omega)
    return InnerResult(
        y_hat=omega,
        iters=T,
        final_lower_gap=_gap(problem, x, omega),
        final_grad_norm=float(np.linalg.norm(gy)),
    )


def lower_projected_gd(problem: ProblemSpec, x, y0, beta: float, T: int) -> InnerResult:
    """Projected inner GD ``w <- Proj_U(w - beta * grad_y g(x, w))``.

    Every iterate stays inside the lower-level set.  ``final_grad_norm``
    reports the projected-gradient norm ``|w - Proj_U(w - beta g')| / beta``.
    """
    if beta <= 0:
        raise ValueError("beta must be > 0")
    if T < 0:
        raise ValueError("T must be >= 0")
    x = as_vector(x, problem.d_x, "x")
    U = problem.lower_set
    omega = U.project(as_vector(y0, problem.d_y, "y0"))
    for _ in range(T):
        new = U.project(omega - beta * problem.grad_y_g(x, omega))
        _guard(new, omega)
        omega = new
    step = omega - U.project(omega - beta * problem.grad_y_g(x, omega))
    return InnerResult(
        y_hat=omega,
        iters=T,
        final_lower_gap=_gap(problem, x, omega),
        final_grad_norm=float(np.linalg.norm(step) / beta),
    )


def lower_sgd_weighted(
    problem: ProblemSpec,
    x,
    y0,
    T: int,
    L_g: float,
    rng: np.random.Generator,
    batch: int = 1,
) -> InnerResult:
    """Stochastic inner solve with decaying steps and weighted output sampling.

    Runs ``w_{t+1} = w_t - beta_t * grad_y g(x, w_t; psi_t)`` with
    ``beta_t = 1 / (L_g sqrt(t))`` for ``t = 1..T`` and returns ``w_i`` with
    the index drawn from ``P(i = t) = beta_t / sum_t beta_t``.  Each
    ``psi_t`` is a ``batch``-sample average (still unbiased; batching only
    shrinks its variance).
    """
    if problem.g_grad_sample is None:
        raise MissingOracleError("lower_sgd_weighted needs the g_grad_sample oracle")
    if T < 1:
        raise ValueError("T must be >= 1")
    if L_g <= 0:
        raise ValueError("L_g must be > 0")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    x = as_vector(x, problem.d_x, "x")
    omega = as_vector(y0, problem.d_y, "y0").copy()
    betas = 1.0 / (L_g * np.sqrt(np.arange(1, T + 1, dtype=float)))
    trajectory = np.empty((T, problem.d_y))
    for t in range(T):
        trajectory[t] = omega
        sample = np.mean(problem.g_grad_sample(x, omega, rng, batch), axis=0)
        new = omega - betas[t] * np.asarray(sample, dtype=float)[problem.d_x :]
        _guard(new, omega)
        omega = new
    weights = betas / betas.sum()
    pick = int(rng.choice(T, p=weights))
    y_hat = trajectory[pick]
    gy = problem.grad_y_g(x, y_hat)
    return InnerResult(
        y_hat=y_hat,
        iters=T,
        final_lower_gap=_gap(problem, x, y_hat),
        final_grad_norm=float(np.linalg.norm(gy)),
    )


def inner_iteration_schedule(
    k: int,
    alpha: float,
    beta: float,
    gamma: float,
    mu: float,
    L_g: float,
    mode: str = "unconstrained",
) -> int:
    """Logarithmic inner iteration count for outer iteration ``k``.

    With ``c = 1 - beta / (2 mu)`` the unconstrained rule is
    ``T_k = ceil(max{-log_c(16 L_g^2), -2 log_c(2 alpha k)})`` and the
    constrained rule is ``T_k = ceil(-2 log_c(2 alpha gamma k))``, both
    floored at 1.  Requires ``c`` strictly inside (0, 1).
    """
    if mode not in ("unconstrained", "constrained"):
        raise ValueError("mode must be 'unconstrained' or 'constrained'")
    if k < 1:
        raise ValueError("outer index k must be >= 1")
    if min(alpha, beta, gamma, mu, L_g) <= 0:
        raise ValueError("alpha, beta, gamma, mu, L_g must be > 0")
    c_beta = 1.0 - beta / (2.0 * mu)
    if not (0.0 < c_beta < 1.0):
        raise ValueError(f"c_beta = 1 - beta/(2 mu) = {c_beta} must lie in (0, 1)")
    log_c = math.log(c_beta)  # negative
    if mode == "unconstrained":
        t1 = -math.log(16.0 * L_g**2) / log_c
        t2 = -2.0 * math.log(2.0 * alpha * k) / log_c
        t = max(t1, t2)
    else:
        t = -2.0 * math.log(2.0 * alpha * gamma * k) / log_c
    return max(1, int(math.ceil(t)))
