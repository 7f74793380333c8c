"""Built-in test problems with analytic oracles where they exist.

Each catalog entry documents its smoothness constants.  Constants marked
"estimated" were obtained by dense grid sampling over the operating region
and rounded up; the verification battery re-checks the declared penalty
moduli by sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    ConstraintSet,
    MissingOracleError,
    PenaltyKind,
    ProblemSpec,
    SmoothnessConstants,
    as_vector,
    rng_stream,
)

__all__ = [
    "ProblemCatalogEntry",
    "make_example_intro",
    "make_quadratic",
    "make_toy_nc",
    "make_constrained_toy",
    "HypercleanData",
    "make_hyperclean_data",
    "make_hyperclean_synthetic",
    "analytic_lower_solution",
    "catalog_names",
    "make_problem",
    "catalog_entry",
    "sigmoid",
]

TWO_PI_3 = 2.0 * math.pi / 3.0


@dataclass(frozen=True)
class ProblemCatalogEntry:
    """A catalog problem plus its declared penalty-bound classification."""

    name: str
    spec: ProblemSpec
    pl_class: str
    has_analytic_solution_set: bool
    grad_norm_convex: bool
    declared_rho: dict


def sigmoid(v):
    v = np.asarray(v, dtype=float)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def _noise(rng: Optional[np.random.Generator], std: float, shape) -> np.ndarray:
    if std == 0.0:
        return np.zeros(shape)
    return std * rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# quadratic: f = y, g = y^2


def make_quadratic(noise_std: float = 0.0) -> ProblemSpec:
    """Scalar quadratic instance: upper ``f = y``, lower ``g = y^2``.

    Bilevel solution ``y = 0``; the value-gap penalized problem has the
    closed-form minimizer ``y = -1/(2 gamma)``.  Constants (exact):
    ``L = 1`` (|df/dy| = 1), ``L_f = 0`` (linear f), ``L_g = 2``,
    ``L_g2 = 0`` (linear lower gradient), ``mu = 1/4`` (PL: 4 y^2 >= 4 y^2),
    ``sigma = 2``, ``L_v = 0``, value-gap distance modulus ``rho = 1``
    (p = y^2 equals the squared distance).  ``noise_std > 0`` adds i.i.d.
    Gaussian noise to the stochastic gradient oracles.
    """

    def f_eval(x, y):
        return float(y[0])

    def f_grad(x, y):
        return np.array([0.0, 1.0])

    def g_eval(x, y):
        return float(y[0] ** 2)

    def g_grad(x, y):
        return np.array([0.0, 2.0 * y[0]])

    def f_grad_sample(x, y, rng, n):
        return np.array([0.0, 1.0]) + _noise(rng, noise_std, (n, 2))

    def g_grad_sample(x, y, rng, n):
        return np.array([0.0, 2.0 * y[0]]) + _noise(rng, noise_std, (n, 2))

    return ProblemSpec(
        name="quadratic",
        d_x=1,
        d_y=1,
        f_eval=f_eval,
        f_grad=f_grad,
        g_eval=g_eval,
        g_grad=g_grad,
        upper_set=ConstraintSet.full_space(1),
        lower_set=ConstraintSet.full_space(1),
        constants=SmoothnessConstants(
            L=1.0, L_f=0.0, L_g=2.0, L_g2=0.0, mu=0.25, rho=1.0, sigma=2.0, L_v=0.0
        ),
        g_hvp_yy=lambda x, y, v: 2.0 * np.asarray(v, dtype=float),
        g_hvp_xy=lambda x, y, v: np.zeros(1),
        g_hvp_yx=lambda x, y, u: np.zeros(1),
        analytic_lower_solution=lambda x: np.zeros(1),
        analytic_v=lambda x: 0.0,
        f_grad_sample=f_grad_sample,
        g_grad_sample=g_grad_sample,
    )


# ---------------------------------------------------------------------------
# introductory example: f = sin^2(y - 2pi/3), g = y^2 + 2 sin^2 y


def make_example_intro() -> ProblemSpec:
    """Nonconvex PL instance whose grad-norm-sq penalty has a spurious
    stationary point at ``y = 2 pi / 3`` (the lower Hessian vanishes there).

    Solution set {0}; ``f(x, 0) = 0.75``.  Constants: ``L = 1`` exact,
    ``L_f = 2`` exact, ``L_g = 6`` exact (|g''| <= 6), ``L_g2 = 8`` exact
    (|g'''| <= 8), ``mu = 1.05`` (sampled PL/QG supremum ~ 0.99 / 1.0, with
    margin), value-gap ``rho = 1`` (supremum attained at y = k pi).
    """

    def f_eval(x, y):
        return float(np.sin(y[0] - TWO_PI_3) ** 2)

    def f_grad(x, y):
        return np.array([0.0, math.sin(2.0 * (y[0] - TWO_PI_3))])

    def g_eval(x, y):
        return float(y[0] ** 2 + 2.0 * np.sin(y[0]) ** 2)

    def g_grad(x, y):
        return np.array([0.0, 2.0 * y[0] + 2.0 * math.sin(2.0 * y[0])])

    def g_hvp_yy(x, y, v):
        return (2.0 + 4.0 * math.cos(2.0 * y[0])) * np.asarray(v, dtype=float)

    return ProblemSpec(
        name="example-intro",
        d_x=1,
        d_y=1,
        f_eval=f_eval,
        f_grad=f_grad,
        g_eval=g_eval,
        g_grad=g_grad,
        upper_set=ConstraintSet.full_space(1),
        lower_set=ConstraintSet.full_space(1),
        constants=SmoothnessConstants(L=1.0, L_f=2.0, L_g=6.0, L_g2=8.0, mu=1.05, rho=1.0),
        g_hvp_yy=g_hvp_yy,
        g_hvp_xy=lambda x, y, v: np.zeros(1),
        g_hvp_yx=lambda x, y, u: np.zeros(1),
        analytic_lower_solution=lambda x: np.zeros(1),
        analytic_v=lambda x: 0.0,
        default_start=(np.zeros(1), np.array([0.5])),
    )


# ---------------------------------------------------------------------------
# nonconvex toy: sinusoidally coupled instance on x in [0, 3]


def make_toy_nc() -> ProblemSpec:
    """Nonconvex bilevel toy: ``f = cos(4y + 2) / (1 + e^{2 - 4x})
    + ln((4x - 2)^2 + 1) / 2``, ``g = (y + x)^2 + x sin^2(y + x)``,
    ``x in [0, 3]``, unconstrained lower level.

    The lower-level solution set is ``{-x}`` with ``v(x) = 0``.  Constants:
    ``L = 4`` exact (|df/dy| <= 4), ``L_f = 17.1`` estimated (grid supremum
    ~ 17.0), ``L_g = 16.5`` estimated (grid supremum of the joint Hessian
    norm ~ 16.17), ``L_g2 = 30`` estimated, ``mu = 3.0`` (sampled PL
    supremum ~ 2.85, QG supremum 1.0), value-gap ``rho = 1`` exact.
    """

    def f_eval(x, y):
        w = 4.0 * x[0] - 2.0
        return float(math.cos(4.0 * y[0] + 2.0) * sigmoid(w) + 0.5 * math.log(w * w + 1.0))

    def f_grad(x, y):
        w = 4.0 * x[0] - 2.0
        sig = float(sigmoid(w))
        fx = math.cos(4.0 * y[0] + 2.0) * 4.0 * sig * (1.0 - sig) + 4.0 * w / (w * w + 1.0)
        fy = -4.0 * math.sin(4.0 * y[0] + 2.0) * sig
        return np.array([fx, fy])

    def g_eval(x, y):
        u = y[0] + x[0]
        return float(u * u + x[0] * math.sin(u) ** 2)

    def g_grad(x, y):
        u = y[0] + x[0]
        s2u = math.sin(2.0 * u)
        gx = 2.0 * u + math.sin(u) ** 2 + x[0] * s2u
        gy = 2.0 * u + x[0] * s2u
        return np.array([gx, gy])

    def g_hvp_yy(x, y, v):
        u = y[0] + x[0]
        return (2.0 + 2.0 * x[0] * math.cos(2.0 * u)) * np.asarray(v, dtype=float)

    def g_hvp_xy(x, y, v):
        u = y[0] + x[0]
        return (2.0 + math.sin(2.0 * u) + 2.0 * x[0] * math.cos(2.0 * u)) * np.asarray(
            v, dtype=float
        )

    return ProblemSpec(
        name="toy-nc",
        d_x=1,
        d_y=1,
        f_eval=f_eval,
        f_grad=f_grad,
        g_eval=g_eval,
        g_grad=g_grad,
        upper_set=ConstraintSet.interval(0.0, 3.0, dim=1),
        lower_set=ConstraintSet.full_space(1),
        constants=SmoothnessConstants(L=4.0, L_f=17.1, L_g=16.5, L_g2=30.0, mu=3.0, rho=1.0),
        g_hvp_yy=g_hvp_yy,
        g_hvp_xy=g_hvp_xy,
        g_hvp_yx=g_hvp_xy,  # scalar cross-derivative is symmetric
        analytic_lower_solution=lambda x: np.array([-x[0]]),
        analytic_v=lambda x: 0.0,
        default_start=(np.array([1.0]), np.array([0.0])),
    )


# ---------------------------------------------------------------------------
# constrained toy: compact lower-level set


def make_constrained_toy() -> ProblemSpec:
    """Constrained desk instance: ``f = (x-1)^2 + (y-1)^2``,
    ``g = (y-x)^2``, ``x in [0, 2]``, ``y in [0, 1]``.

    Lower-level solution ``clip(x, 0, 1)``; ``v(x) = (clip(x,0,1) - x)^2``.
    Bilevel solution (1, 1).  Constants (exact): ``L = 2``, ``L_f = 2``,
    ``L_g = 4`` (joint Hessian eigenvalue), ``L_g2 = 0``, ``mu = 1``
    (quadratic growth with equality), ``mu_bar = 0.5`` (interior projected
    step has length 2 d), ``L_v = 2``, value-gap ``rho = 1``.
    """

    def f_eval(x, y):
        return float((x[0] - 1.0) ** 2 + (y[0] - 1.0) ** 2)

    def f_grad(x, y):
        return np.array([2.0 * (x[0] - 1.0), 2.0 * (y[0] - 1.0)])

    def g_eval(x, y):
        return float((y[0] - x[0]) ** 2)

    def g_grad(x, y):
        d = y[0] - x[0]
        return np.array([-2.0 * d, 2.0 * d])

    def y_star(x):
        return np.array([min(1.0, max(0.0, x[0]))])

    def v_fn(x):
        yc = min(1.0, max(0.0, x[0]))
        return float((yc - x[0]) ** 2)

    return ProblemSpec(
        name="constrained-toy",
        d_x=1,
        d_y=1,
        f_eval=f_eval,
        f_grad=f_grad,
        g_eval=g_eval,
        g_grad=g_grad,
        upper_set=ConstraintSet.interval(0.0, 2.0, dim=1),
        lower_set=ConstraintSet.interval(0.0, 1.0, dim=1),
        constants=SmoothnessConstants(
            L=2.0, L_f=2.0, L_g=4.0, L_g2=0.0, mu=1.0, mu_bar=0.5, rho=1.0, L_v=2.0
        ),
        g_hvp_yy=lambda x, y, v: 2.0 * np.asarray(v, dtype=float),
        g_hvp_xy=lambda x, y, v: -2.0 * np.asarray(v, dtype=float),
        g_hvp_yx=lambda x, y, u: -2.0 * np.asarray(u, dtype=float),
        analytic_lower_solution=y_star,
        analytic_v=v_fn,
        default_start=(np.zeros(1), np.zeros(1)),
    )


# ---------------------------------------------------------------------------
# synthetic data hyper-cleaning


@dataclass(frozen=True)
class HypercleanData:
    """Synthetic binary classification data with a corrupted training subset."""

    A_train: np.ndarray
    b_train: np.ndarray        # labels in {-1, +1}, corrupted subset flipped
    corrupted: np.ndarray      # boolean mask over training samples
    A_val: np.ndarray
    b_val: np.ndarray
    lambda_reg: float
    seed: int

    @property
    def n_train(self) -> int:
        return self.A_train.shape[0]

    @property
    def dim(self) -> int:
        return self.A_train.shape[1]


def make_hyperclean_data(
    n_train: int = 200,
    n_val: int = 500,
    dim: int = 5,
    noise_rate: float = 0.3,
    lambda_reg: float = 0.01,
    seed: int = 0,
) -> HypercleanData:
    """Draw teacher-labelled Gaussian data and flip the labels of a random
    ``noise_rate`` fraction of the training set (the validation set is clean)."""
    if n_train < 1 or n_val < 1 or dim < 1:
        raise ValueError("sizes must be positive")
    if not 0.0 <= noise_rate <= 1.0:
        raise ValueError("noise_rate must lie in [0, 1]")
    if lambda_reg <= 0:
        raise ValueError("lambda_reg must be > 0")
    rng = rng_stream(seed, 100)
    teacher = rng.standard_normal(dim)
    A_train = rng.standard_normal((n_train, dim))
    A_val = rng.standard_normal((n_val, dim))
    b_train = np.where(A_train @ teacher >= 0.0, 1.0, -1.0)
    b_val = np.where(A_val @ teacher >= 0.0, 1.0, -1.0)
    n_bad = int(round(noise_rate * n_train))
    corrupted = np.zeros(n_train, dtype=bool)
    corrupted[rng.permutation(n_train)[:n_bad]] = True
    b_train = np.where(corrupted, -b_train, b_train)
    return HypercleanData(
        A_train=A_train,
        b_train=b_train,
        corrupted=corrupted,
        A_val=A_val,
        b_val=b_val,
        lambda_reg=float(lambda_reg),
        seed=seed,
    )


def _logistic_losses(A: np.ndarray, b: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, -b * (A @ w))


def _logistic_grad_rows(A: np.ndarray, b: np.ndarray, w: np.ndarray) -> np.ndarray:
    # rows: grad_w log(1 + exp(-b a'w)) = -b * sigmoid(-b a'w) * a
    coef = -b * sigmoid(-b * (A @ w))
    return coef[:, None] * A


def make_hyperclean_synthetic(
    n_train: int = 200,
    n_val: int = 500,
    dim: int = 5,
    noise_rate: float = 0.3,
    lambda_reg: float = 0.01,
    seed: int = 0,
    data: Optional[HypercleanData] = None,
) -> ProblemSpec:
    """Sample-reweighting bilevel instance over synthetic corrupted data.

    Lower level: ``g(x, w) = mean_i sigmoid(x_i) loss_i(w) + lambda/2 ||w||^2``
    over model weights ``w`` (strongly convex, hence PL with
    ``mu = 1/(2 lambda)``); upper level: clean validation logistic loss.
    The per-sample logits ``x`` are unconstrained; the effective sample
    weight is ``sigmoid(x_i)``.  Smoothness constants are data-dependent
    estimates computed from the drawn instance.
    """
    if data is None:
        data = make_hyperclean_data(n_train, n_val, dim, noise_rate, lambda_reg, seed)
    A, b, Av, bv = data.A_train, data.b_train, data.A_val, data.b_val
    lam = data.lambda_reg
    n, d = data.n_train, data.dim
    n_val_actual = Av.shape[0]

    def f_eval(x, w):
        return float(np.mean(_logistic_losses(Av, bv, w)))

    def f_grad(x, w):
        gw = np.mean(_logistic_grad_rows(Av, bv, w), axis=0)
        return np.concatenate([np.zeros(n), gw])

    def g_eval(x, w):
        return float(np.mean(sigmoid(x) * _logistic_losses(A, b, w)) + 0.5 * lam * (w @ w))

    def g_grad(x, w):
        s = sigmoid(x)
        losses = _logistic_losses(A, b, w)
        gx = s * (1.0 - s) * losses / n
        gw = (s @ _logistic_grad_rows(A, b, w)) / n + lam * w
        return np.concatenate([gx, gw])

    def f_grad_sample(x, w, rng, m):
        idx = rng.integers(0, n_val_actual, size=m)
        rows = _logistic_grad_rows(Av[idx], bv[idx], w)
        return np.concatenate([np.zeros((m, n)), rows], axis=1)

    def g_grad_sample(x, w, rng, m):
        idx = rng.integers(0, n, size=m)
        s = sigmoid(x[idx])
        losses = _logistic_losses(A[idx], b[idx], w)
        out = np.zeros((m, n + d))
        out[np.arange(m), idx] = s * (1.0 - s) * losses
        out[:, n:] = s[:, None] * _logistic_grad_rows(A[idx], b[idx], w) + lam * w
        return out

    # data-dependent estimates; the x-block curvature depends on the loss
    # scale, bounded over the operating region ||w|| <= a few * ||teacher||
    max_row = float(np.max(np.linalg.norm(A, axis=1)))
    ww_curv = 0.25 * float(np.linalg.eigvalsh(A.T @ A / n).max()) + lam
    loss_scale = float(np.max(_logistic_losses(A, b, np.zeros(d)))) + max_row
    L_g_est = ww_curv + (0.1 * loss_scale + 0.25 * max_row) / math.sqrt(n)
    L_val = float(np.max(np.linalg.norm(Av, axis=1)))
    L_f_est = 0.25 * float(np.linalg.eigvalsh(Av.T @ Av / n_val_actual).max())

    return ProblemSpec(
        name="hyperclean-synthetic",
        d_x=n,
        d_y=d,
        f_eval=f_eval,
        f_grad=f_grad,
        g_eval=g_eval,
        g_grad=g_grad,
        upper_set=ConstraintSet.full_space(n),
        lower_set=ConstraintSet.full_space(d),
        constants=SmoothnessConstants(
            L=L_val, L_f=L_f_est, L_g=L_g_est, mu=1.0 / (2.0 * lam)
        ),
        f_grad_sample=f_grad_sample,
        g_grad_sample=g_grad_sample,
        default_start=(np.zeros(n), np.zeros(d)),
    )


# ---------------------------------------------------------------------------
# catalog


def analytic_lower_solution(problem: ProblemSpec, x) -> np.ndarray:
    """One element of the lower-level solution set at ``x``."""
    if problem.analytic_lower_solution is None:
        raise MissingOracleError(f"problem {problem.name!r} has no analytic lower solution")
    return np.asarray(problem.analytic_lower_solution(as_vector(x, problem.d_x, "x")), dtype=float)


_CATALOG: dict = {
    "quadratic": dict(
        builder=make_quadratic,
        pl_class="PL (quadratic; mu = 1/4)",
        has_analytic_solution_set=True,
        grad_norm_convex=True,
        declared_rho={PenaltyKind.VALUE_GAP: 1.0, PenaltyKind.GRAD_NORM_SQ: 0.25},
    ),
    "example-intro": dict(
        builder=make_example_intro,
        pl_class="PL (nonconvex; mu = 1.05 sampled)",
        has_analytic_solution_set=True,
        grad_norm_convex=False,
        declared_rho={PenaltyKind.VALUE_GAP: 1.0, PenaltyKind.GRAD_NORM_SQ: 0.85},
    ),
    "toy-nc": dict(
        builder=make_toy_nc,
        pl_class="PL (nonconvex; mu = 3.0 sampled)",
        has_analytic_solution_set=True,
        grad_norm_convex=False,
        declared_rho={PenaltyKind.VALUE_GAP: 1.0, PenaltyKind.GRAD_NORM_SQ: 2.2},
    ),
    "constrained-toy": dict(
        builder=make_constrained_toy,
        pl_class="QG + convex (constrained; mu = 1)",
        has_analytic_solution_set=True,
        grad_norm_convex=True,
        declared_rho={PenaltyKind.VALUE_GAP: 1.0},
    ),
    "hyperclean-synthetic": dict(
        builder=make_hyperclean_synthetic,
        pl_class="strongly convex lower level (mu = 1/(2 lambda))",
        has_analytic_solution_set=False,
        grad_norm_convex=False,
        declared_rho={},
    ),
}


def catalog_names() -> list:
    return sorted(_CATALOG.keys())


def make_problem(name: str, **params) -> ProblemSpec:
    """Build a catalog problem by name."""
    if name not in _CATALOG:
        raise KeyError(f"unknown problem {name!r}; known: {', '.join(catalog_names())}")
    return _CATALOG[name]["builder"](**params)


def catalog_entry(name: str, **params) -> ProblemCatalogEntry:
    if name not in _CATALOG:
        raise KeyError(f"unknown problem {name!r}; known: {', '.join(catalog_names())}")
    meta = _CATALOG[name]
    return ProblemCatalogEntry(
        name=name,
        spec=meta["builder"](**params),
        pl_class=meta["pl_class"],
        has_analytic_solution_set=meta["has_analytic_solution_set"],
        grad_norm_convex=meta["grad_norm_convex"],
        declared_rho=dict(meta["declared_rho"]),
    )
