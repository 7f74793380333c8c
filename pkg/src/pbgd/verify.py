"""Independent verification oracles.

Finite differences for gradient and Hessian-product checks, samplers for the
squared-distance-bound penalty properties, Danskin-type value-function
gradient checks, log-log rate fits, and the convergence-bound monitors for
the supported convergence-rate guarantees.  Everything is deterministic
under a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import optimize

from .core import (
    ConstraintSet,
    MissingOracleError,
    PenaltyKind,
    ProblemSpec,
    SolveReport,
    penalty_value,
    projected_gradient_metric,
    rng_stream,
    stack_xy,
)
from .problems import ProblemCatalogEntry, catalog_entry, catalog_names

__all__ = [
    "CheckReport",
    "finite_difference_grad",
    "finite_difference_hvp",
    "check_squared_distance_bound",
    "check_danskin",
    "lower_value_and_solution",
    "check_gradients",
    "check_projection_properties",
    "check_lower_solution_stationarity",
    "fit_loglog_slope",
    "convergence_bound_check",
    "check_problem",
    "check_all",
]

FD_STEP = 1e-5
GRAD_RTOL = 1e-5
DANSKIN_TOL = 1e-4


@dataclass
class CheckReport:
    """Outcome of one verification check."""

    name: str
    status: str  # "pass" | "fail" | "skipped"
    worst_residual: float
    n_samples: int
    tolerance: float
    details: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    @property
    def failed(self) -> bool:
        return self.status == "fail"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "status": self.status,
            "worst_residual": self.worst_residual,
            "n_samples": self.n_samples,
            "tolerance": self.tolerance,
            "details": list(self.details),
        }


def _report(name, ok, worst, n, tol, details=None) -> CheckReport:
    return CheckReport(
        name=name,
        status="pass" if ok else "fail",
        worst_residual=float(worst),
        n_samples=int(n),
        tolerance=float(tol),
        details=details or [],
    )


# ---------------------------------------------------------------------------
# finite differences


def finite_difference_grad(fn: Callable, z, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``z``."""
    if h <= 0:
        raise ValueError("h must be > 0")
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    for i in range(z.shape[0]):
        e = np.zeros_like(z)
        e[i] = h
        out[i] = (fn(z + e) - fn(z - e)) / (2.0 * h)
    return out


def finite_difference_hvp(grad_fn: Callable, z, v, h: float = FD_STEP) -> np.ndarray:
    """Central-difference directional derivative of a gradient field."""
    z = np.asarray(z, dtype=float)
    v = np.asarray(v, dtype=float)
    return (np.asarray(grad_fn(z + h * v)) - np.asarray(grad_fn(z - h * v))) / (2.0 * h)


# ---------------------------------------------------------------------------
# domain sampling

_UNBOUNDED_BOX = 5.0


def _sample_set(cset: ConstraintSet, rng: np.random.Generator, n: int) -> np.ndarray:
    if cset.is_bounded:
        if cset.kind in ("box", "interval"):
            return rng.uniform(cset.lower, cset.upper, size=(n, cset.dim))
        pts = rng.uniform(-_UNBOUNDED_BOX, _UNBOUNDED_BOX, size=(n, cset.dim))
        return np.array([cset.project(p) for p in pts])
    return rng.uniform(-_UNBOUNDED_BOX, _UNBOUNDED_BOX, size=(n, cset.dim))


# ---------------------------------------------------------------------------
# penalty property sampler


def check_squared_distance_bound(
    problem: ProblemSpec,
    kind: PenaltyKind,
    rho: float,
    n_samples: int = 1000,
    seed: int = 0,
) -> CheckReport:
    """Sample-check the squared-distance-bound properties of a penalty.

    Over sampled ``(x, y)``: ``p >= 0``, ``rho p >= d^2`` against the
    analytic lower-level solution, and the vanishing equivalence
    ``p <= 1e-10  iff  d <= 1e-5`` (exercised both at random points and at
    points placed on and near the solution set).
    """
    kind = PenaltyKind(kind)
    if rho <= 0:
        raise ValueError("rho must be > 0")
    if kind == PenaltyKind.GRAD_NORM:
        raise ValueError("the squared-distance bound concerns the smooth penalties")
    if problem.analytic_lower_solution is None:
        raise MissingOracleError("squared-distance check needs the analytic lower solution")
    rng = rng_stream(seed, 7)
    xs = _sample_set(problem.upper_set, rng, n_samples)
    ys = _sample_set(problem.lower_set, rng, n_samples)
    # exercise the equivalence near the solution set as well
    on_manifold = min(50, n_samples)
    for i in range(on_manifold):
        ys[i] = problem.analytic_lower_solution(xs[i])
        if i % 2 == 1:
            ys[i] = problem.lower_set.project(ys[i] + 1e-7 * rng.standard_normal(problem.d_y))

    worst = -np.inf
    details = []
    for i in range(n_samples):
        x, y = xs[i], ys[i]
        p = penalty_value(problem, kind, x, y)
        y_star = problem.analytic_lower_solution(x)
        dsq = float(np.sum((y - y_star) ** 2))
        slack = 1e-9 * (1.0 + dsq)
        if p < -1e-10:
            details.append(f"negative penalty {p:.3e} at sample {i}")
        resid = dsq - rho * p
        worst = max(worst, resid)
        if resid > slack:
            if len(details) < 5:
                details.append(
                    f"rho*p < d^2 at sample {i}: p={p:.6e}, d^2={dsq:.6e}, x={x}, y={y}"
                )
        # vanishing equivalence at numeric precision: a tiny penalty must
        # certify closeness, and exact solutions must zero the penalty (the
        # literal two-sided threshold pair is unattainable where the gap
        # grows linearly in d, e.g. at active lower-level constraints)
        if p <= 1e-10 and math.sqrt(dsq) > 1e-5:
            details.append(f"tiny penalty far from S(x) at sample {i}: p={p:.3e}, d={math.sqrt(dsq):.3e}")
        if dsq == 0.0 and p > 1e-10:
            details.append(f"nonzero penalty on S(x) at sample {i}: p={p:.3e}")
    ok = not details
    return _report(
        f"{problem.name}:sdb[{kind.value},rho={rho:g}]", ok, worst, n_samples, 0.0, details
    )


# ---------------------------------------------------------------------------
# gradient / HVP consistency


def check_gradients(
    problem: ProblemSpec,
    n_points: int = 100,
    seed: int = 0,
    h: float = FD_STEP,
    rtol: float = GRAD_RTOL,
) -> CheckReport:
    """Analytic gradients (and Hessian products, when present) against
    central finite differences at random points; residuals are relative to
    ``1 + ||grad||``."""
    rng = rng_stream(seed, 11)
    xs = _sample_set(problem.upper_set, rng, n_points)
    ys = _sample_set(problem.lower_set, rng, n_points)
    worst = 0.0
    details = []

    def stacked(fn):
        return lambda z: fn(z[: problem.d_x], z[problem.d_x :])

    f_of_z = stacked(problem.f_eval)
    g_of_z = stacked(problem.g_eval)
    g_grad_of_z = stacked(problem.g_grad)

    for i in range(n_points):
        x, y = xs[i], ys[i]
        z = stack_xy(x, y)
        for label, fn, grad in (
            ("f", f_of_z, problem.f_grad(x, y)),
            ("g", g_of_z, problem.g_grad(x, y)),
        ):
            fd = finite_difference_grad(fn, z, h)
            resid = float(np.max(np.abs(fd - grad))) / (1.0 + float(np.linalg.norm(grad)))
            worst = max(worst, resid)
            if resid > rtol and len(details) < 5:
                details.append(f"grad {label} mismatch {resid:.2e} at point {i}")
        if problem.has_hvp:
            v = rng.standard_normal(problem.d_y)
            fd_full = finite_difference_hvp(g_grad_of_z, z, np.concatenate([np.zeros(problem.d_x), v]), h)
            hvp_x = problem.g_hvp_xy(x, y, v)
            hvp_y = problem.g_hvp_yy(x, y, v)
            got = np.concatenate([hvp_x, hvp_y])
            resid = float(np.max(np.abs(fd_full - got))) / (1.0 + float(np.linalg.norm(got)))
            worst = max(worst, resid)
            if resid > rtol and len(details) < 5:
                details.append(f"hvp mismatch {resid:.2e} at point {i}")
    return _report(f"{problem.name}:gradients", worst <= rtol and not details, worst, n_points, rtol, details)


def check_lower_solution_stationarity(
    problem: ProblemSpec,
    n_points: int = 100,
    seed: int = 0,
    tol: float = 1e-8,
) -> CheckReport:
    """The analytic lower solution must zero the (projected) lower gradient."""
    if problem.analytic_lower_solution is None:
        return CheckReport(f"{problem.name}:stationarity", "skipped", 0.0, 0, tol,
                           ["no analytic lower solution"])
    rng = rng_stream(seed, 13)
    xs = _sample_set(problem.upper_set, rng, n_points)
    worst = 0.0
    for x in xs:
        y_star = problem.analytic_lower_solution(x)
        gy = problem.grad_y_g(x, y_star)
        if problem.lower_set.is_full:
            resid = float(np.linalg.norm(gy))
        else:
            beta = 1.0
            moved = problem.lower_set.project(y_star - beta * gy)
            resid = float(np.linalg.norm(y_star - moved) / beta)
        worst = max(worst, resid)
    return _report(f"{problem.name}:stationarity", worst <= tol, worst, n_points, tol)


def check_projection_properties(
    cset: ConstraintSet,
    n_pairs: int = 200,
    seed: int = 0,
    name: str = "set",
) -> CheckReport:
    """Idempotence, fixed points, and non-expansiveness on random pairs."""
    rng = rng_stream(seed, 17)
    worst = 0.0
    details = []
    for i in range(n_pairs):
        u = rng.uniform(-10, 10, size=cset.dim)
        v = rng.uniform(-10, 10, size=cset.dim)
        pu, pv = cset.project(u), cset.project(v)
        idem = float(np.linalg.norm(cset.project(pu) - pu)) / (1.0 + float(np.linalg.norm(pu)))
        fixed = float(np.linalg.norm(cset.project(pv) - pv))
        expans = float(np.linalg.norm(pu - pv)) - float(np.linalg.norm(u - v))
        worst = max(worst, idem, fixed, expans)
        if max(idem, fixed) > 1e-12 or expans > 1e-12:
            if len(details) < 5:
                details.append(f"projection property violated at pair {i}")
    return _report(f"{name}:projection", not details, worst, n_pairs, 1e-12, details)


# ---------------------------------------------------------------------------
# Danskin check


def lower_value_and_solution(problem: ProblemSpec, x: np.ndarray, w0=None):
    """High-accuracy lower-level value via an independent solver (L-BFGS-B)."""
    bounds = None
    if not problem.lower_set.is_full:
        if problem.lower_set.kind not in ("box", "interval"):
            raise MissingOracleError("value-function fallback supports box lower sets only")
        bounds = list(zip(problem.lower_set.lower, problem.lower_set.upper))
    w0 = np.zeros(problem.d_y) if w0 is None else np.asarray(w0, dtype=float)
    res = optimize.minimize(
        lambda w: problem.g_eval(x, w),
        w0,
        jac=lambda w: problem.grad_y_g(x, w),
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": 5000, "ftol": 1e-16, "gtol": 1e-12},
    )
    return float(res.fun), np.asarray(res.x, dtype=float)


def check_danskin(
    problem: ProblemSpec,
    x,
    h: float = FD_STEP,
    tol: float = DANSKIN_TOL,
    max_coords: int = 8,
    seed: int = 0,
) -> CheckReport:
    """Finite differences of the value function against ``grad_x g(x, y*)``.

    Uses the analytic value/solution oracles when available, otherwise a
    high-accuracy independent lower-level solve.  For wide upper variables
    only ``max_coords`` randomly chosen coordinates are probed.
    """
    x = np.asarray(x, dtype=float)

    if problem.analytic_v is not None:
        value = lambda xv: float(problem.analytic_v(xv))
    else:
        warm = {}

        def value(xv):
            v, w = lower_value_and_solution(problem, xv, warm.get("w"))
            warm["w"] = w
            return v

    if problem.analytic_lower_solution is not None:
        y_star = problem.analytic_lower_solution(x)
    else:
        _, y_star = lower_value_and_solution(problem, x)

    grad_x = problem.grad_x_g(x, y_star)
    coords = np.arange(problem.d_x)
    if problem.d_x > max_coords:
        coords = rng_stream(seed, 19).choice(problem.d_x, size=max_coords, replace=False)
    worst = 0.0
    for i in coords:
        e = np.zeros_like(x)
        e[i] = h
        fd = (value(x + e) - value(x - e)) / (2.0 * h)
        worst = max(worst, abs(fd - grad_x[i]) / (1.0 + abs(grad_x[i])))
    return _report(f"{problem.name}:danskin", worst <= tol, worst, len(coords), tol)


# ---------------------------------------------------------------------------
# rate fits and theorem monitors


def estimate_c_g(problem: ProblemSpec, grid: int = 64) -> float:
    """Grid estimate of ``C_g = max over C x U of (g - v)``.

    A ``grid x grid`` sample over the compact product set; an estimate, not
    a certified maximum, so callers typically apply a safety factor.
    """
    for cs in (problem.upper_set, problem.lower_set):
        if not (cs.is_bounded and cs.kind in ("box", "interval")):
            raise MissingOracleError("C_g estimation needs compact box-like sets")
    if problem.analytic_v is None:
        raise MissingOracleError("C_g estimation needs the analytic value oracle")
    if problem.d_x != 1 or problem.d_y != 1:
        raise MissingOracleError("grid C_g estimation is implemented for 1-D blocks")
    xs = np.linspace(problem.upper_set.lower[0], problem.upper_set.upper[0], grid)
    ys = np.linspace(problem.lower_set.lower[0], problem.lower_set.upper[0], grid)
    best = -np.inf
    for xv in xs:
        x = np.array([xv])
        v = float(problem.analytic_v(x))
        for yv in ys:
            best = max(best, float(problem.g_eval(x, np.array([yv]))) - v)
    return float(best)


def fit_loglog_slope(pairs) -> float:
    """Least-squares slope of ``log(v)`` against ``log(u)`` for positive pairs."""
    pts = [(float(u), float(v)) for u, v in pairs]
    if len(pts) < 3:
        raise ValueError("need at least 3 pairs to fit a log-log slope")
    if any(u <= 0 or v <= 0 for u, v in pts):
        raise ValueError("log-log fit needs positive values")
    lu = np.log([u for u, _ in pts])
    lv = np.log([v for _, v in pts])
    return float(np.polyfit(lu, lv, 1)[0])


def _theorem_preconditions(report: SolveReport, theorem: str, c) -> Optional[str]:
    gamma = report.config.gamma
    alpha = report.resolved_steps.get("alpha")
    if theorem == "T3":
        if None in (c.L_f, c.L_g, c.mu):
            return "missing constants L_f, L_g or mu"
        bound = 1.0 / (c.L_f + gamma * (2.0 * c.L_g + c.L_g**2 * c.mu))
        if alpha is None or alpha > bound * (1.0 + 1e-12):
            return f"alpha {alpha} exceeds the compliant bound {bound:.6g}"
        beta = report.resolved_steps.get("beta")
        if beta is not None and beta > 1.0 / c.L_g * (1.0 + 1e-12):
            return f"beta {beta} exceeds 1/L_g"
    elif theorem == "T4":
        if None in (c.L_f, c.L_g, c.L_v, c.mu):
            return "missing constants L_f, L_g, L_v or mu"
        bound = 1.0 / (c.L_f + gamma * (c.L_g + c.L_v))
        if alpha is None or alpha > bound * (1.0 + 1e-12):
            return f"alpha {alpha} exceeds the compliant bound {bound:.6g}"
    elif theorem == "T5":
        t = report.resolved_steps.get("t")
        if None in (c.L_f, c.L_g2):
            return "missing constants L_f or L_g2"
        denom = c.L_f + gamma * c.L_g2
        if denom > 0 and (t is None or t > 1.0 / denom * (1.0 + 1e-12)):
            return f"t {t} exceeds the compliant bound {1.0 / denom:.6g}"
    else:
        raise ValueError("theorem must be one of 'T3', 'T4', 'T5'")
    return None


def convergence_bound_check(
    report: SolveReport,
    theorem: str,
    C_f: float,
    C_g: Optional[float] = None,
    problem: Optional[ProblemSpec] = None,
    prefixes: Optional[list] = None,
) -> CheckReport:
    """Assert the theorem's rate bound at every trace prefix.

    T3 / T4 compare the running mean of ``||G_gamma||^2`` against
    ``a (F_gamma(z_1) - C_f) / (alpha K) + b / K`` with ``(a, b)`` the
    theorem constants; T5 compares the running min of the prox-gradient
    mapping against ``2 (F~(z_0) - C_f + sum delta_k) / (t K)``.  If the
    configured steps violate the rate guarantee's preconditions the check is
    skipped (status "skipped"), not failed.  When ``problem`` supplies an
    analytic lower solution the left-hand side for T3/T4 is re-evaluated
    exactly at the recorded iterates.
    """
    if not report.trace:
        raise ValueError("empty trace")
    if problem is None:
        raise ValueError("problem (with constants) is required")
    c = problem.constants
    reason = _theorem_preconditions(report, theorem, c)
    if reason is not None:
        return CheckReport(
            f"{report.problem_name}:{theorem}-bound", "skipped", 0.0, 0, 0.0,
            [f"precondition violated: {reason}"],
        )

    gamma = report.config.gamma
    alpha = report.resolved_steps.get("alpha")
    F1 = report.trace[0].F_gamma
    gsq = np.array([r.proj_grad_norm_sq for r in report.trace])

    if theorem in ("T3", "T4") and problem is not None and problem.analytic_lower_solution is not None:
        exact = []
        for z in report.iterates:
            x, y = z[: problem.d_x], z[problem.d_x :]
            val, _ = projected_gradient_metric(
                problem, PenaltyKind.VALUE_GAP, gamma, alpha, x, y
            )
            exact.append(val)
        gsq = np.array(exact)

    K_all = np.arange(1, len(gsq) + 1)
    if theorem == "T3":
        lhs = np.cumsum(gsq) / K_all
        rhs = 18.0 * (F1 - C_f) / (alpha * K_all) + 10.0 * c.L**2 * c.L_g**2 / K_all
    elif theorem == "T4":
        if C_g is None:
            raise ValueError("T4 needs C_g")
        lhs = np.cumsum(gsq) / K_all
        rhs = 8.0 * (F1 - C_f) / (alpha * K_all) + 3.0 * c.L_g**2 * c.mu * C_g / K_all
    else:
        t = report.resolved_steps.get("t")
        deltas = np.array([r.achieved_delta or 0.0 for r in report.trace])
        lhs = np.minimum.accumulate(gsq)
        rhs = 2.0 / t * (F1 - C_f + np.cumsum(deltas)) / K_all

    idx = (
        np.array([k - 1 for k in prefixes if k <= len(gsq)], dtype=int)
        if prefixes is not None
        else np.arange(len(gsq))
    )
    resid = lhs[idx] - rhs[idx]
    worst = float(resid.max())
    details = []
    if worst > 0:
        bad = int(idx[int(np.argmax(resid))]) + 1
        details.append(f"bound violated at prefix K={bad}: lhs={lhs[bad - 1]:.6g} rhs={rhs[bad - 1]:.6g}")
    return _report(
        f"{report.problem_name}:{theorem}-bound", worst <= 0.0, worst, len(idx), 0.0, details
    )


# ---------------------------------------------------------------------------
# battery


def check_problem(entry: ProblemCatalogEntry, seed: int = 0, fast: bool = False) -> list:
    """Run the full property battery for one catalog entry."""
    spec = entry.spec
    n_grad = 20 if (fast or spec.dim > 50) else 100
    n_sdb = 300 if fast else 1000
    reports = [
        check_gradients(spec, n_points=n_grad, seed=seed),
        check_lower_solution_stationarity(spec, n_points=min(n_grad, 50), seed=seed),
        check_projection_properties(spec.upper_set, seed=seed, name=f"{spec.name}:upper"),
        check_projection_properties(spec.lower_set, seed=seed, name=f"{spec.name}:lower"),
    ]
    for kind, rho in entry.declared_rho.items():
        reports.append(check_squared_distance_bound(spec, kind, rho, n_samples=n_sdb, seed=seed))
    xs = _sample_set(spec.upper_set, rng_stream(seed, 23), 3)
    for x in xs:
        reports.append(check_danskin(spec, x, seed=seed))
    return reports


def check_all(seed: int = 0, names: Optional[list] = None, fast: bool = False) -> dict:
    """Run the battery over the catalog; returns {problem: [CheckReport]}."""
    out = {}
    for name in names or catalog_names():
        out[name] = check_problem(catalog_entry(name), seed=seed, fast=fast)
    return out
