"""Loss weightings for denoising score matching.

All weights are scalar multipliers on the squared residual
``(s(x_t; theta) - s(x_t | x0))^2``.  The variance-stabilising choice is the
inverse of the posterior variance of the kernel score,

    Var_{x0|x_t}[s(x_t | x0)] = 1/sigma^2 + H(x_t)

where ``H`` is the second derivative of the noised log density.  Its
expectation over ``x_t`` is ``1/sigma^2 - I(sigma)`` since ``E[H] = -I``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import density
from .density import GaussianMixture1D, QuadratureSpec

WEIGHT_FLOOR = 1e-12

SCHEMES = ("none", "heuristic", "optimal-pointwise", "optimal-expected", "taylor-k1")
_ALIASES = {"optimal": "optimal-pointwise", "taylor": "taylor-k1", "conventional": "heuristic"}


class WeightWarning(UserWarning):
    """A weight denominator was non-positive and had to be clamped."""


def heuristic_weight(sigma):
    return np.square(sigma) if np.ndim(sigma) else float(sigma) ** 2


def optimal_pointwise_weight(sigma, hessian_at_xt, full_output: bool = False):
    """Inverse posterior variance of the kernel score, ``(1/sigma^2 + H)^-1``.

    A non-positive denominator (only possible through round-off) is clamped
    to ``WEIGHT_FLOOR`` and flagged with :class:`WeightWarning`.
    """
    sigma = np.asarray(sigma, dtype=float)
    denom = 1.0 / (sigma * sigma) + np.asarray(hessian_at_xt, dtype=float)
    clamped = denom <= WEIGHT_FLOOR
    if np.any(clamped):
        warnings.warn(f"{int(np.sum(clamped))} weight denominators clamped to {WEIGHT_FLOOR}", WeightWarning, stacklevel=2)
        denom = np.where(clamped, WEIGHT_FLOOR, denom)
    w = 1.0 / denom
    w = float(w) if w.ndim == 0 else w
    if full_output:
        return w, bool(np.any(clamped))
    return w


def optimal_expected_weight(sigma: float, fisher: float) -> float:
    """``sigma^2 / (1 - q)`` with ``q = sigma^2 * fisher``; rejects ``q >= 1``."""
    q = sigma * sigma * fisher
    if q >= 1.0:
        raise ValueError(
            f"sigma^2 * fisher = {q:.6g} >= 1; the expected posterior score variance "
            "1/sigma^2 - fisher must be positive"
        )
    return sigma * sigma / (1.0 - q)


def taylor_weight(sigma: float, fisher: float, order: int = 1) -> float:
    if order == 1:
        return sigma * sigma
    if order == 2:
        return sigma * sigma + sigma**4 * fisher
    raise ValueError(f"taylor order must be 1 or 2, got {order!r}")


def stam_upper_bound(sigma: float, fisher0: float) -> float:
    """Upper bound on the expected optimal weight from Stam's inequality."""
    return sigma * sigma + fisher0 * sigma**4


def expected_posterior_score_variance(gmm: GaussianMixture1D, sigma: float, quadrature: QuadratureSpec | None = None) -> float:
    """``E_{x_t}[1/sigma^2 + H(x_t)]`` by quadrature over the noised density."""
    marg = density.perturb_density(gmm, sigma)
    return density.integrate_density(marg, lambda x: 1.0 / sigma**2 + density.hessian(marg, x), quadrature)


@lru_cache(maxsize=4096)
def noised_fisher(gmm: GaussianMixture1D, sigma: float) -> float:
    """Cached Fisher information of ``gmm`` convolved with N(0, sigma^2)."""
    return density.fisher_information(density.perturb_density(gmm, float(sigma)))


@lru_cache(maxsize=64)
def clean_fisher(gmm: GaussianMixture1D) -> float:
    return density.fisher_information(gmm)


@dataclass(frozen=True)
class WeightingScheme:
    """A tagged loss weighting bound to the data density it may need."""

    tag: str = "heuristic"
    gmm: GaussianMixture1D | None = field(default=None, compare=True)

    def __post_init__(self):
        tag = _ALIASES.get(self.tag, self.tag)
        if tag not in SCHEMES:
            raise ValueError(f"unknown weighting {self.tag!r}; expected one of {SCHEMES} (or {tuple(_ALIASES)})")
        object.__setattr__(self, "tag", tag)
        if tag in ("optimal-pointwise", "optimal-expected") and self.gmm is None:
            raise ValueError(f"weighting {tag!r} needs the data density")

    def weight(self, sigma, x_t=None):
        """Weights for arrays of noise levels and noisy points (broadcast)."""
        sigma = np.asarray(sigma, dtype=float)
        if self.tag == "none":
            shape = np.broadcast_shapes(sigma.shape, np.shape(x_t)) if x_t is not None else sigma.shape
            return np.ones(shape)
        if self.tag in ("heuristic", "taylor-k1"):
            w = sigma * sigma
            return np.broadcast_to(w, np.broadcast_shapes(w.shape, np.shape(x_t))).copy() if x_t is not None else w
        if self.tag == "optimal-expected":
            flat = sigma.reshape(-1)
            uniq, inv = np.unique(flat, return_inverse=True)
            vals = np.array([optimal_expected_weight(s, noised_fisher(self.gmm, float(s))) for s in uniq])
            w = vals[inv].reshape(sigma.shape)
            return np.broadcast_to(w, np.broadcast_shapes(w.shape, np.shape(x_t))).copy() if x_t is not None else w
        if x_t is None:
            raise ValueError("pointwise optimal weighting needs x_t")
        return self.pointwise(sigma, np.asarray(x_t, dtype=float))

    def pointwise(self, sigma, x_t):
        """Inverse posterior score variance from the exact mixture posterior.

        Evaluates ``Var(x0 | x_t) / sigma^4`` from the conjugate posterior,
        which equals ``1/sigma^2 + H(x_t)`` without the cancellation that
        formula suffers at small sigma.
        """
        sigma, x_t = np.broadcast_arrays(np.asarray(sigma, dtype=float), np.asarray(x_t, dtype=float))
        w_c, m_c, s_c = self.gmm._arrays()
        v = s_c * s_c
        s2 = (sigma * sigma)[..., None]
        tot = v + s2
        logr = np.log(w_c) - 0.5 * np.log(tot) - 0.5 * (x_t[..., None] - m_c) ** 2 / tot
        logr -= logr.max(axis=-1, keepdims=True)
        r = np.exp(logr)
        r /= r.sum(axis=-1, keepdims=True)
        post_mean = (m_c * s2 + x_t[..., None] * v) / tot
        post_var = v * s2 / tot
        mean = np.sum(r * post_mean, axis=-1)
        var = np.sum(r * (post_var + (post_mean - mean[..., None]) ** 2), axis=-1)
        score_var = var / sigma**4
        clamped = score_var <= WEIGHT_FLOOR
        if np.any(clamped):
            warnings.warn(f"{int(np.sum(clamped))} weight denominators clamped", WeightWarning, stacklevel=2)
            score_var = np.where(clamped, WEIGHT_FLOOR, score_var)
        w = 1.0 / score_var
        return float(w) if w.ndim == 0 else w


def weight_curves(gmm: GaussianMixture1D, sigmas, x) -> list[dict]:
    """Heuristic and pointwise-optimal weights on a grid, one table per level."""
    scheme = WeightingScheme("optimal-pointwise", gmm)
    x = np.asarray(x, dtype=float)
    tables = []
    for s in np.atleast_1d(sigmas):
        tables.append(
            {
                "x": x,
                "sigma_t": np.full_like(x, float(s)),
                "conventional_weights": np.full_like(x, heuristic_weight(float(s))),
                "optimal_weights": scheme.pointwise(float(s), x),
            }
        )
    return tables
