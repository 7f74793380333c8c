"""Domain types and penalty machinery shared by every solver.

The central objects are:

* :class:`ConstraintSet` -- a closed convex set given by an exact Euclidean
  projection oracle,
* :class:`ProblemSpec` -- a bilevel problem instance with first-order (and
  optionally second-order) oracles for the upper objective ``f`` and the
  lower objective ``g``,
* :class:`SolverConfig` / :class:`SolveReport` -- solver tunables and results,

together with the penalty evaluations ``p(x, y)``, the penalized objective
``F_gamma = f + gamma * p``, its gradient assemblies, and the projected
gradient stationarity metric ``G_gamma``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "MissingOracleError",
    "InvalidConfigError",
    "DivergedError",
    "SubproblemBudgetError",
    "ConstraintSet",
    "SmoothnessConstants",
    "PenaltyKind",
    "ProblemSpec",
    "SolverConfig",
    "Termination",
    "IterateRecord",
    "SolveReport",
    "as_vector",
    "stack_xy",
    "split_z",
    "project",
    "project_product",
    "penalty_value",
    "penalized_objective",
    "penalized_gradient_value_gap",
    "penalized_gradient_grad_norm_sq",
    "projected_gradient_metric",
    "rng_stream",
]


class MissingOracleError(ValueError):
    """An operation needs an oracle the problem does not supply."""


class InvalidConfigError(ValueError):
    """Solver configuration or algorithm/problem pairing is invalid."""


class DivergedError(RuntimeError):
    """An iteration left the finite range; carries the last finite state."""

    def __init__(self, message: str, state=None):
        super().__init__(message)
        self.state = state


class SubproblemBudgetError(RuntimeError):
    """A certified subproblem solve ran out of budget; carries the gap."""

    def __init__(self, message: str, gap: float):
        super().__init__(message)
        self.gap = gap


# ---------------------------------------------------------------------------
# vectors


def as_vector(v, dim: Optional[int] = None, name: str = "v") -> np.ndarray:
    """Validate and return ``v`` as a finite 1-D float64 array."""
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} has length {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def stack_xy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.concatenate([x, y])


def split_z(problem: "ProblemSpec", z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return z[: problem.d_x], z[problem.d_x :]


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Named deterministic RNG stream derived from (seed, key...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in key]]))


# ---------------------------------------------------------------------------
# constraint sets


@dataclass(frozen=True)
class ConstraintSet:
    """A closed convex set with an exact Euclidean projection.

    Supported kinds: ``full`` (all of R^dim), ``box`` (per-coordinate
    bounds), ``interval`` (uniform scalar bounds), ``ball`` (center/radius)
    and ``simplex`` (nonnegative orthant with a fixed coordinate sum).
    """

    kind: str
    dim: int
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None
    radius: Optional[float] = None
    scale: Optional[float] = None

    # -- constructors

    @staticmethod
    def full_space(dim: int) -> "ConstraintSet":
        return ConstraintSet(kind="full", dim=dim)

    @staticmethod
    def box(lower, upper) -> "ConstraintSet":
        lo = as_vector(lower, name="lower")
        hi = as_vector(upper, dim=lo.shape[0], name="upper")
        if np.any(lo > hi):
            raise ValueError("box requires lower <= upper coordinatewise")
        return ConstraintSet(kind="box", dim=lo.shape[0], lower=lo, upper=hi)

    @staticmethod
    def interval(lo: float, hi: float, dim: int = 1) -> "ConstraintSet":
        if not (lo <= hi):
            raise ValueError("interval requires lo <= hi")
        return ConstraintSet(
            kind="interval",
            dim=dim,
            lower=np.full(dim, float(lo)),
            upper=np.full(dim, float(hi)),
        )

    @staticmethod
    def ball(center, radius: float) -> "ConstraintSet":
        c = as_vector(center, name="center")
        if radius <= 0:
            raise ValueError("ball radius must be positive")
        return ConstraintSet(kind="ball", dim=c.shape[0], center=c, radius=float(radius))

    @staticmethod
    def simplex(scale: float, dim: int) -> "ConstraintSet":
        if scale <= 0:
            raise ValueError("simplex scale must be positive")
        return ConstraintSet(kind="simplex", dim=dim, scale=float(scale))

    # -- queries

    @property
    def is_full(self) -> bool:
        return self.kind == "full"

    @property
    def is_bounded(self) -> bool:
        if self.kind in ("ball", "simplex"):
            return True
        if self.kind in ("box", "interval"):
            return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))
        return False

    def project(self, v) -> np.ndarray:
        """Euclidean projection of ``v`` onto the set."""
        v = as_vector(v, dim=self.dim, name="v")
        if self.kind == "full":
            return v
        if self.kind in ("box", "interval"):
            return np.clip(v, self.lower, self.upper)
        if self.kind == "ball":
            d = v - self.center
            n = float(np.linalg.norm(d))
            if n <= self.radius:
                return v
            return self.center + d * (self.radius / n)
        if self.kind == "simplex":
            return _project_simplex(v, self.scale)
        raise ValueError(f"unknown constraint kind {self.kind!r}")

    def contains(self, v, tol: float = 1e-9) -> bool:
        v = as_vector(v, dim=self.dim, name="v")
        return bool(np.linalg.norm(self.project(v) - v) <= tol * (1.0 + np.linalg.norm(v)))


def _project_simplex(v: np.ndarray, scale: float) -> np.ndarray:
    # Exact sort-and-threshold projection onto {w >= 0, sum w = scale}.
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - scale
    idx = np.arange(1, v.shape[0] + 1)
    cond = u - css / idx > 0
    rho = int(idx[cond][-1])
    tau = css[rho - 1] / rho
    return np.maximum(v - tau, 0.0)


def project(cset: ConstraintSet, v) -> np.ndarray:
    """Project ``v`` onto ``cset`` (module-level convenience)."""
    return cset.project(v)


def project_product(upper_set: ConstraintSet, lower_set: ConstraintSet, z: np.ndarray) -> np.ndarray:
    """Project a stacked point onto the product set C x U."""
    dx = upper_set.dim
    return np.concatenate([upper_set.project(z[:dx]), lower_set.project(z[dx:])])


# ---------------------------------------------------------------------------
# problem data


@dataclass(frozen=True)
class SmoothnessConstants:
    """Problem constants used by step-size schedules and bound monitors.

    All fields are optional; a missing value simply disables the features
    that need it.  ``L`` bounds the Lipschitz constant of ``f(x, .)``;
    ``L_f``/``L_g`` are joint Lipschitz-smoothness constants of ``f``/``g``;
    ``L_g2`` bounds the Lipschitz constant of the map ``(x, y) -> grad_y g``;
    ``mu`` is the PL / quadratic-growth modulus; ``mu_bar`` the
    proximal-error-bound modulus; ``rho`` the squared-distance-bound modulus
    of the value-gap penalty; ``sigma`` a lower bound on the singular values
    of the lower-level Hessian off the solution set; ``L_v`` the smoothness
    of the lower-level value function.

    ``L``, ``L_f``, ``L_g2`` and ``L_v`` may legitimately be zero (linear
    parts); the moduli ``mu``, ``mu_bar``, ``rho``, ``sigma`` and ``L_g``
    must be strictly positive when supplied.
    """

    L: Optional[float] = None
    L_f: Optional[float] = None
    L_g: Optional[float] = None
    L_g2: Optional[float] = None
    mu: Optional[float] = None
    mu_bar: Optional[float] = None
    rho: Optional[float] = None
    sigma: Optional[float] = None
    L_v: Optional[float] = None

    def __post_init__(self):
        for name in ("L", "L_f", "L_g2", "L_v"):
            val = getattr(self, name)
            if val is not None and (not math.isfinite(val) or val < 0):
                raise ValueError(f"constant {name} must be finite and >= 0")
        for name in ("L_g", "mu", "mu_bar", "rho", "sigma"):
            val = getattr(self, name)
            if val is not None and (not math.isfinite(val) or val <= 0):
                raise ValueError(f"constant {name} must be finite and > 0")

    def require(self, *names: str) -> None:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise MissingOracleError(
                "required smoothness constants not supplied: " + ", ".join(missing)
            )


class PenaltyKind(str, Enum):
    """Lower-level suboptimality measure used as the penalty term."""

    VALUE_GAP = "value-gap"          # g(x, y) - v(x)
    GRAD_NORM_SQ = "grad-norm-sq"    # ||grad_y g(x, y)||^2
    GRAD_NORM = "grad-norm"          # ||grad_y g(x, y)||  (prox-linear pathway)


@dataclass(frozen=True)
class ProblemSpec:
    """A bilevel problem instance.

    Oracles must be pure functions of their arguments; a single instance may
    be shared by concurrent solves.  Gradients are returned stacked as one
    vector of length ``d_x + d_y`` (x-block first).  Hessian-vector products
    follow the conventions

    * ``g_hvp_yy(x, y, v)``: ``(d2g/dy dy) v`` for ``v`` of length ``d_y``,
    * ``g_hvp_xy(x, y, v)``: ``(d2g/dx dy) v`` of length ``d_x`` for ``v``
      of length ``d_y``,
    * ``g_hvp_yx(x, y, u)``: the adjoint product of length ``d_y`` for ``u``
      of length ``d_x``.

    Stochastic oracles draw ``n`` samples from the supplied generator and
    return an ``(n, d_x + d_y)`` array whose row mean is unbiased for the
    exact gradient; two identically seeded generators must yield identical
    samples so that one sample can be evaluated at two points.
    """

    name: str
    d_x: int
    d_y: int
    f_eval: Callable[[np.ndarray, np.ndarray], float]
    f_grad: Callable[[np.ndarray, np.ndarray], np.ndarray]
    g_eval: Callable[[np.ndarray, np.ndarray], float]
    g_grad: Callable[[np.ndarray, np.ndarray], np.ndarray]
    upper_set: ConstraintSet
    lower_set: ConstraintSet
    constants: SmoothnessConstants = field(default_factory=SmoothnessConstants)
    g_hvp_yy: Optional[Callable] = None
    g_hvp_xy: Optional[Callable] = None
    g_hvp_yx: Optional[Callable] = None
    analytic_lower_solution: Optional[Callable[[np.ndarray], np.ndarray]] = None
    analytic_v: Optional[Callable[[np.ndarray], float]] = None
    f_grad_sample: Optional[Callable] = None
    g_grad_sample: Optional[Callable] = None
    default_start: Optional[tuple] = None

    def __post_init__(self):
        if self.d_x < 1 or self.d_y < 1:
            raise ValueError("dimensions must be >= 1")
        if self.upper_set.dim != self.d_x:
            raise ValueError("upper_set dimension must equal d_x")
        if self.lower_set.dim != self.d_y:
            raise ValueError("lower_set dimension must equal d_y")

    @property
    def dim(self) -> int:
        return self.d_x + self.d_y

    @property
    def has_hvp(self) -> bool:
        return self.g_hvp_yy is not None and self.g_hvp_xy is not None

    @property
    def has_stochastic(self) -> bool:
        return self.f_grad_sample is not None and self.g_grad_sample is not None

    def start_point(self) -> tuple[np.ndarray, np.ndarray]:
        """Default feasible start: the declared one, else the projected origin."""
        if self.default_start is not None:
            x0, y0 = self.default_start
            return as_vector(x0, self.d_x, "x0").copy(), as_vector(y0, self.d_y, "y0").copy()
        return self.upper_set.project(np.zeros(self.d_x)), self.lower_set.project(np.zeros(self.d_y))

    def grad_y_g(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.g_grad(x, y)[self.d_x :]

    def grad_x_g(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.g_grad(x, y)[: self.d_x]


# ---------------------------------------------------------------------------
# solver configuration and results


@dataclass
class SolverConfig:
    """All solver tunables.

    ``alpha``, ``beta`` and ``t`` may be left as ``None`` to request the
    automatic, constants-based choices; an explicitly supplied value always
    wins over the automatic one.  ``inner_schedule`` selects between a fixed
    inner iteration count ``inner_T`` and the logarithmic rule
    ``T_k = ceil(max{-log_c(16 L_g^2), -2 log_c(2 alpha k)})`` (unconstrained)
    or ``T_k = ceil(-2 log_c(2 alpha gamma k))`` (constrained) with
    ``c = 1 - beta / (2 mu)``.
    """

    gamma: float = 10.0
    alpha: Optional[float] = None
    beta: Optional[float] = None
    K: int = 1000
    inner_schedule: str = "fixed"  # "fixed" | "log"
    inner_T: int = 10
    tol_proj_grad: float = 1e-9
    penalty: PenaltyKind = PenaltyKind.VALUE_GAP
    batch_size: int = 1
    seed: int = 0
    delta0: float = 1e-2
    q: float = 2.0
    t: Optional[float] = None
    warm_start: bool = True
    x0: Optional[Sequence[float]] = None
    y0: Optional[Sequence[float]] = None
    max_iterate_norm: float = 1e12
    subproblem_budget: int = 200_000

    def __post_init__(self):
        self.penalty = PenaltyKind(self.penalty)
        if not self.gamma > 0:
            raise InvalidConfigError("gamma must be > 0 for solvers")
        if self.alpha is not None and not self.alpha > 0:
            raise InvalidConfigError("alpha must be > 0")
        if self.beta is not None and not self.beta > 0:
            raise InvalidConfigError("beta must be > 0")
        if self.K < 0:
            raise InvalidConfigError("K must be >= 0")
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be >= 1")
        if self.inner_schedule not in ("fixed", "log"):
            raise InvalidConfigError("inner_schedule must be 'fixed' or 'log'")
        if self.inner_T < 0:
            raise InvalidConfigError("inner_T must be >= 0")
        if self.tol_proj_grad < 0:
            raise InvalidConfigError("tol_proj_grad must be >= 0")
        if not self.delta0 > 0:
            raise InvalidConfigError("delta0 must be > 0")
        if not self.q > 1:
            raise InvalidConfigError("q must be > 1 (summable subproblem tolerances)")
        if self.t is not None and not self.t > 0:
            raise InvalidConfigError("t must be > 0")

    def with_updates(self, **kwargs) -> "SolverConfig":
        return replace(self, **kwargs)

    def delta_schedule(self, k: int) -> float:
        """Summable subproblem tolerance delta_k = delta0 / (k + 1)^q."""
        return self.delta0 / float(k + 1) ** self.q


class Termination(str, Enum):
    BUDGET_EXHAUSTED = "BudgetExhausted"
    STATIONARITY_REACHED = "StationarityReached"
    DIVERGED = "Diverged"


@dataclass
class IterateRecord:
    """One outer-iteration trace row.

    ``achieved_delta`` is populated by the prox-linear loop with the
    certified subproblem gap; ``penalty_clamped`` flags a tiny negative
    value-gap (from an inexact v-hat) that was clamped to zero.
    """

    k: int
    f_value: float
    penalty_value: float
    F_gamma: float
    proj_grad_norm_sq: float
    inner_iters_used: int
    elapsed_ns: int
    penalty_clamped: bool = False
    achieved_delta: Optional[float] = None


@dataclass
class SolveReport:
    """Final solver output: terminal point, per-iteration trace, termination."""

    final_x: np.ndarray
    final_y: np.ndarray
    trace: list
    termination: Termination
    config: SolverConfig
    problem_name: str
    algorithm: str
    penalty_source: str  # "analytic-v" | "inner-estimate" | "exact"
    iterates: np.ndarray  # row i = stacked (x, y) at trace row i
    final_inner_y: Optional[np.ndarray] = None
    notes: list = field(default_factory=list)
    resolved_steps: dict = field(default_factory=dict)  # actually used alpha/beta/t

    def __post_init__(self):
        if len(self.trace) > max(self.config.K, 0):
            raise ValueError("trace longer than the iteration budget")
        if self.termination == Termination.STATIONARITY_REACHED and self.trace:
            if self.trace[-1].proj_grad_norm_sq > self.config.tol_proj_grad**2 * (1 + 1e-12):
                raise ValueError("stationarity termination with large projected gradient")

    @property
    def final_record(self) -> Optional[IterateRecord]:
        return self.trace[-1] if self.trace else None

    @property
    def mean_proj_grad_norm_sq(self) -> float:
        if not self.trace:
            return float("nan")
        return float(np.mean([r.proj_grad_norm_sq for r in self.trace]))

    @property
    def iterations(self) -> int:
        return len(self.trace)


# ---------------------------------------------------------------------------
# penalty evaluation


def penalty_value(
    problem: ProblemSpec,
    kind: PenaltyKind,
    x,
    y,
    v_hat: Optional[float] = None,
) -> float:
    """Evaluate the penalty ``p(x, y)`` of the requested kind.

    For the value gap, ``v_hat`` supplies the lower-level optimal value; when
    omitted it is taken from the problem's analytic value oracle.  The
    gradient-based penalties require an unconstrained lower level.
    """
    kind = PenaltyKind(kind)
    x = as_vector(x, problem.d_x, "x")
    y = as_vector(y, problem.d_y, "y")
    if kind == PenaltyKind.VALUE_GAP:
        if v_hat is None:
            if problem.analytic_v is None:
                raise MissingOracleError(
                    "value-gap penalty needs v_hat or an analytic_v oracle"
                )
            v_hat = float(problem.analytic_v(x))
        return float(problem.g_eval(x, y)) - float(v_hat)
    if not problem.lower_set.is_full:
        raise InvalidConfigError("gradient penalties require an unconstrained lower level")
    gy = problem.grad_y_g(x, y)
    if kind == PenaltyKind.GRAD_NORM_SQ:
        return float(gy @ gy)
    return float(np.linalg.norm(gy))


def penalized_objective(
    problem: ProblemSpec,
    kind: PenaltyKind,
    gamma: float,
    x,
    y,
    v_hat: Optional[float] = None,
) -> float:
    """``F_gamma(x, y) = f(x, y) + gamma * p(x, y)``; ``gamma = 0`` is allowed here."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    x = as_vector(x, problem.d_x, "x")
    y = as_vector(y, problem.d_y, "y")
    val = float(problem.f_eval(x, y))
    if gamma > 0:
        val += gamma * penalty_value(problem, kind, x, y, v_hat)
    return val


def penalized_gradient_value_gap(
    problem: ProblemSpec,
    gamma: float,
    x,
    y,
    y_hat,
) -> np.ndarray:
    """Value-gap penalized gradient assembled from an approximate lower solution.

    Returns ``grad f(x, y) + gamma * (grad g(x, y) - [grad_x g(x, y_hat), 0])``:
    the x-block subtracts the lower-level x-gradient evaluated at ``y_hat``
    (a Danskin-type surrogate for ``grad v(x)``), while the y-block is
    ``grad_y f + gamma * grad_y g`` untouched by ``y_hat``.
    """
    x = as_vector(x, problem.d_x, "x")
    y = as_vector(y, problem.d_y, "y")
    y_hat = as_vector(y_hat, problem.d_y, "y_hat")
    grad = problem.f_grad(x, y) + gamma * problem.g_grad(x, y)
    grad = np.asarray(grad, dtype=float).copy()
    grad[: problem.d_x] -= gamma * problem.grad_x_g(x, y_hat)
    return grad


def penalized_gradient_grad_norm_sq(
    problem: ProblemSpec,
    gamma: float,
    x,
    y,
) -> np.ndarray:
    """Exact gradient of ``f + gamma * ||grad_y g||^2`` via Hessian-vector products."""
    if not problem.has_hvp:
        raise MissingOracleError("grad-norm-sq penalty gradient needs g_hvp_xy and g_hvp_yy")
    x = as_vector(x, problem.d_x, "x")
    y = as_vector(y, problem.d_y, "y")
    gy = problem.grad_y_g(x, y)
    pen = np.concatenate([problem.g_hvp_xy(x, y, gy), problem.g_hvp_yy(x, y, gy)])
    return problem.f_grad(x, y) + 2.0 * gamma * pen


def projected_gradient_metric(
    problem: ProblemSpec,
    kind: PenaltyKind,
    gamma: float,
    alpha: float,
    x,
    y,
    y_hat=None,
) -> tuple[float, np.ndarray]:
    """Projected gradient ``G_gamma`` of the penalized problem and its squared norm.

    ``G_gamma = (z - Proj_Z(z - alpha * grad F_gamma(z))) / alpha`` with
    ``Z`` the product of the upper and lower constraint sets; it vanishes
    exactly at stationary points of the penalized problem over convex ``Z``.
    For the value-gap penalty the gradient is assembled from ``y_hat`` (the
    analytic lower-level solution when available and ``y_hat`` is omitted).
    """
    kind = PenaltyKind(kind)
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    x = as_vector(x, problem.d_x, "x")
    y = as_vector(y, problem.d_y, "y")
    if kind == PenaltyKind.VALUE_GAP:
        if y_hat is None:
            if problem.analytic_lower_solution is None:
                raise MissingOracleError(
                    "value-gap G_gamma needs y_hat or an analytic lower solution"
                )
            y_hat = problem.analytic_lower_solution(x)
        grad = penalized_gradient_value_gap(problem, gamma, x, y, y_hat)
    elif kind == PenaltyKind.GRAD_NORM_SQ:
        grad = penalized_gradient_grad_norm_sq(problem, gamma, x, y)
    else:
        raise InvalidConfigError(
            "G_gamma is defined for the smooth penalties; use "
            "proxlinear.prox_gradient_mapping for the grad-norm penalty"
        )
    z = stack_xy(x, y)
    moved = project_product(problem.upper_set, problem.lower_set, z - alpha * grad)
    G = (z - moved) / alpha
    return float(G @ G), G
