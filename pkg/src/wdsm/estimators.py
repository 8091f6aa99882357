"""Monte-Carlo estimators of arbitrary-order scores of a noised density.

For the Gaussian kernel ``x_t | x0 ~ N(x0, sigma^2)`` the order-k marginal
score is the posterior mean of a term ``h_k(x0, x_t)`` built by repeatedly
applying the score-differential operator

    T[h] = d/dx_t h + h * s1(x_t | x0) - h * s1(x_t)

starting from ``h_1 = s1(x_t | x0)``.  In one dimension every ``h_k`` is a
polynomial in three kinds of quantities:

* ``a = s1(x_t | x0) = (x0 - x_t) / sigma^2`` with ``da/dx_t = c``,
* ``c = -1/sigma^2`` (constant in ``x_t``),
* the marginal derivatives ``m_j = s_j(x_t)`` with ``dm_j/dx_t = m_{j+1}``,

so the operator is applied exactly on the polynomial's exponent table.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import density
from .density import GaussianMixture1D

MAX_ORDER = 8
KINDS = ("t1", "t2", "t3")

# exponent layout: (a, c, m_1, m_2, ..., m_MAX_ORDER)
_NVARS = 2 + MAX_ORDER
_A, _C = 0, 1


def _m(j: int) -> int:
    return 1 + j


def conditional_score(x0, x_t, sigma: float, k: int):
    """k-th x_t-derivative of log N(x_t; x0, sigma^2)."""
    if int(k) != k or k < 1:
        raise ValueError(f"order must be a positive integer, got {k!r}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    if k == 1:
        out = (np.asarray(x0, dtype=float) - np.asarray(x_t, dtype=float)) / sigma**2
        return float(out) if out.ndim == 0 else out
    shape = np.broadcast_shapes(np.shape(x0), np.shape(x_t))
    value = -1.0 / sigma**2 if k == 2 else 0.0
    return np.full(shape, value) if shape else value


# ---------------------------------------------------------------------------
# marginal score providers


class MarginalScores:
    """Supplies ``[s_1(x), ..., s_n(x)]`` of the noised marginal at ``x``."""

    def __call__(self, x, n: int) -> list:
        raise NotImplementedError

    def score(self, x):
        return self(x, 1)[0]


class AnalyticMarginal(MarginalScores):
    """Exact derivatives of a mixture's log density (pass the perturbed mixture)."""

    def __init__(self, gmm: GaussianMixture1D):
        self.gmm = gmm

    def __call__(self, x, n):
        return density.log_density_derivatives(self.gmm, x, n)


class FiniteDifferenceMarginal(MarginalScores):
    """Higher derivatives of a plain score function by central differences.

    The step is ``rel_step * max(1, |x|)``; derivative ``s_j`` uses the
    order ``j-1`` central stencil on the score itself.
    """

    def __init__(self, score_fn: Callable, rel_step: float = 1e-5):
        self.score_fn = score_fn
        self.rel_step = rel_step

    def __call__(self, x, n):
        x = np.asarray(x, dtype=float)
        out = [np.asarray(self.score_fn(x), dtype=float)]
        if n > 1:
            h = self.rel_step * np.maximum(1.0, np.abs(x))
        for order in range(1, n):
            # wider steps for higher stencils keep round-off in check
            step = h * 10.0 ** ((order - 1) / 2)
            acc = 0.0
            for i in range(order + 1):
                acc = acc + (-1) ** i * math.comb(order, i) * np.asarray(
                    self.score_fn(x + (order / 2 - i) * step), dtype=float
                )
            out.append(acc / step**order)
        return [float(v) if v.ndim == 0 else v for v in out]


def as_marginal(provider) -> MarginalScores:
    if isinstance(provider, MarginalScores):
        return provider
    if isinstance(provider, GaussianMixture1D):
        return AnalyticMarginal(provider)
    if callable(provider):
        return FiniteDifferenceMarginal(provider)
    raise TypeError(f"cannot build marginal scores from {type(provider).__name__}")


# ---------------------------------------------------------------------------
# h_k polynomials


def _derive(poly: dict) -> dict:
    """Total x_t-derivative of a polynomial in (a, c, m_1, ...)."""
    out: dict = defaultdict(float)
    for exps, coef in poly.items():
        ea = exps[_A]
        if ea:
            e = list(exps)
            e[_A] -= 1
            e[_C] += 1
            out[tuple(e)] += coef * ea
        for j in range(1, MAX_ORDER):
            ej = exps[_m(j)]
            if ej:
                e = list(exps)
                e[_m(j)] -= 1
                e[_m(j + 1)] += 1
                out[tuple(e)] += coef * ej
        if exps[_m(MAX_ORDER)]:
            raise ValueError(f"orders above {MAX_ORDER} are not supported")
    return {k: v for k, v in out.items() if v != 0.0}


def _times(poly: dict, var: int, sign: float) -> dict:
    out = {}
    for exps, coef in poly.items():
        e = list(exps)
        e[var] += 1
        out[tuple(e)] = sign * coef
    return out


def _add(*polys: dict) -> dict:
    out: dict = defaultdict(float)
    for p in polys:
        for k, v in p.items():
            out[k] += v
    return {k: v for k, v in out.items() if v != 0.0}


def _h1_poly() -> dict:
    e = [0] * _NVARS
    e[_A] = 1
    return {tuple(e): 1.0}


def _operator_poly(poly: dict) -> dict:
    return _add(_derive(poly), _times(poly, _A, 1.0), _times(poly, _m(1), -1.0))


def _poly_order_needed(poly: dict) -> int:
    need = 0
    for exps in poly:
        for j in range(1, MAX_ORDER + 1):
            if exps[_m(j)]:
                need = max(need, j)
    return need


@dataclass
class HkTerm:
    """``h_k(x0, x_t)`` for a fixed noise level and marginal-score provider."""

    order: int
    sigma: float
    marginal: MarginalScores | None = None
    poly: dict = field(default_factory=_h1_poly, repr=False)

    def marginal_orders(self) -> int:
        return _poly_order_needed(self.poly)

    def terms(self) -> dict:
        return dict(self.poly)

    def __call__(self, x0, x_t):
        x0 = np.asarray(x0, dtype=float)
        x_t = np.asarray(x_t, dtype=float)
        a = (x0 - x_t) / self.sigma**2
        c = -1.0 / self.sigma**2
        need = self.marginal_orders()
        m = []
        if need:
            if self.marginal is None:
                raise ValueError(f"h_{self.order} needs marginal scores but no provider was given")
            m = self.marginal(x_t, need)
        total = 0.0
        for exps, coef in self.poly.items():
            term = coef * a ** exps[_A] * c ** exps[_C]
            for j in range(1, need + 1):
                if exps[_m(j)]:
                    term = term * np.asarray(m[j - 1]) ** exps[_m(j)]
            total = total + term
        total = np.broadcast_to(total, np.broadcast_shapes(x0.shape, x_t.shape))
        return float(total) if total.ndim == 0 else np.array(total)


def h1(sigma: float, marginal=None) -> HkTerm:
    return HkTerm(1, sigma, None if marginal is None else as_marginal(marginal))


def apply_score_operator(h: HkTerm, marginal_score=None, sigma: float | None = None) -> HkTerm:
    """One application of the score-differential operator: ``h_{k-1} -> h_k``."""
    if h.order >= MAX_ORDER:
        raise ValueError(f"orders above {MAX_ORDER} are not supported")
    marginal = h.marginal if marginal_score is None else as_marginal(marginal_score)
    return HkTerm(h.order + 1, h.sigma if sigma is None else sigma, marginal, _operator_poly(h.poly))


def hk_term(k: int, sigma: float, marginal=None) -> HkTerm:
    if int(k) != k or k < 1:
        raise ValueError(f"order must be a positive integer, got {k!r}")
    if k > MAX_ORDER:
        raise ValueError(f"orders above {MAX_ORDER} are not supported")
    term = h1(sigma, marginal)
    for _ in range(k - 1):
        term = apply_score_operator(term)
    return term


# ---------------------------------------------------------------------------
# Monte-Carlo estimates


def _mean_se(values: np.ndarray):
    values = np.asarray(values, dtype=float)
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def estimate_score_mc(gmm: GaussianMixture1D, sigma: float, x_t: float, k: int, n: int, rng):
    """Posterior average of ``h_k`` at ``x_t``; returns ``(estimate, std_err)``.

    ``x0 | x_t`` is drawn exactly from the conjugate mixture posterior and
    the marginal scores inside ``h_k`` are the analytic ones.
    """
    if n < 2:
        raise ValueError("need at least two Monte-Carlo draws")
    term = hk_term(k, sigma, AnalyticMarginal(density.perturb_density(gmm, sigma)))
    x0 = density.sample(density.posterior(gmm, sigma, x_t), n, rng)
    return _mean_se(term(x0, x_t))


def _second_order_terms(kind: str, a, s_hat, c):
    if kind == "t1":
        return a * a - a * s_hat + c
    if kind == "t2":
        d = a - s_hat
        return d * d + c
    if kind == "t3":
        return a * a - s_hat * s_hat + c
    raise ValueError(f"unknown estimator kind {kind!r}; expected one of {KINDS}")


def _norm_kind(kind) -> str:
    k = str(kind).lower()
    if k not in KINDS:
        raise ValueError(f"unknown estimator kind {kind!r}; expected one of {KINDS}")
    return k


def second_order_estimate(kind, gmm: GaussianMixture1D, sigma: float, x_t: float, delta: float, n: int, rng):
    """Second-order score estimate with a first-order score shifted by ``delta``.

    T1 uses the shifted score only in its cross term, T2 inside both
    centred factors, T3 in its subtracted square.
    """
    kind = _norm_kind(kind)
    if n < 2:
        raise ValueError("need at least two Monte-Carlo draws")
    s_hat = density.score(density.perturb_density(gmm, sigma), x_t) + delta
    x0 = density.sample(density.posterior(gmm, sigma, x_t), n, rng)
    a = (x0 - x_t) / sigma**2
    return _mean_se(_second_order_terms(kind, a, s_hat, -1.0 / sigma**2))


class EstimatorRow(NamedTuple):
    x_t: float
    kind: str
    estimate: float
    bias: float
    variance: float
    std_err: float


def estimator_bias_variance(kind, gmm, sigma, x_t_grid, delta, n_inner, n_reps, rng) -> list[EstimatorRow]:
    """Bias against the exact Hessian and spread over repeated estimates.

    ``kind`` may be one estimator tag or a sequence of them; all kinds at a
    grid point share the same posterior draws.  ``estimate`` is the mean of
    the ``n_reps`` estimates, ``variance`` their sample variance and
    ``std_err`` the standard error of that mean (hence of the bias).
    """
    kinds = [_norm_kind(kind)] if isinstance(kind, str) else [_norm_kind(k) for k in kind]
    if n_reps < 10:
        raise ValueError("need at least 10 repetitions")
    rng = np.random.default_rng(rng)
    marg = density.perturb_density(gmm, sigma)
    rows = []
    for x_t in np.atleast_1d(np.asarray(x_t_grid, dtype=float)):
        s, hess = density.log_density_derivatives(marg, x_t, 2)
        post = density.posterior(gmm, sigma, x_t)
        x0 = density.sample(post, n_inner * n_reps, rng).reshape(n_reps, n_inner)
        a = (x0 - x_t) / sigma**2
        for k in kinds:
            est = _second_order_terms(k, a, s + delta, -1.0 / sigma**2).mean(axis=1)
            var = float(est.var(ddof=1))
            mean = float(est.mean())
            rows.append(EstimatorRow(float(x_t), k, mean, mean - hess, var, math.sqrt(var / n_reps)))
    return rows


def expected_second_order(kind, score_value, hessian_value, delta):
    """Exact posterior expectation of each estimator for a constant shift ``delta``."""
    kind = _norm_kind(kind)
    if kind == "t1":
        return hessian_value - score_value * delta
    if kind == "t2":
        return hessian_value + delta * delta
    return hessian_value - delta * delta - 2.0 * score_value * delta


def population_variance(kind, gmm: GaussianMixture1D, sigma: float, delta: float, quadrature=None) -> float:
    """Variance over ``x_t ~ p_t`` of the exact estimator expectation.

    This is the spread the estimator comparison in the analysis refers to:
    for T2 it reduces to the variance of the true Hessian itself.
    """
    marg = density.perturb_density(gmm, sigma)

    def value(x):
        s, hess = density.log_density_derivatives(marg, x, 2)
        return expected_second_order(kind, s, hess, delta)

    mean = density.integrate_density(marg, value, quadrature)
    return density.integrate_density(marg, lambda x: (value(x) - mean) ** 2, quadrature)
