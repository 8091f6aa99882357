"""Exact machinery for one-dimensional Gaussian mixtures.

The mixture type doubles as the clean data prior, the noise-perturbed
marginal (via :func:`perturb_density`) and the conjugate posterior of the
clean sample given a noisy one (via :func:`posterior`).  Everything here is
closed form except the Fisher information, which uses a fixed composite
Simpson rule.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import integrate, special, stats

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class QuadratureWarning(UserWarning):
    """The integration grid leaves non-negligible probability mass outside."""


@dataclass(frozen=True)
class GaussianMixture1D:
    """Weighted sum of univariate normals, stored as parallel tuples."""

    weights: tuple[float, ...]
    means: tuple[float, ...]
    stds: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        m = tuple(float(v) for v in self.means)
        s = tuple(float(v) for v in self.stds)
        if not w:
            raise ValueError("a mixture needs at least one component")
        if not (len(w) == len(m) == len(s)):
            raise ValueError(
                f"weights, means and stds differ in length: {len(w)}, {len(m)}, {len(s)}"
            )
        if not all(math.isfinite(v) for v in w + m + s):
            raise ValueError("mixture parameters must be finite")
        if min(w) <= 0.0:
            raise ValueError(f"mixture weights must be positive, got {w}")
        if abs(math.fsum(w) - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {math.fsum(w)!r}, not 1")
        if min(s) <= 0.0:
            raise ValueError(f"component stds must be positive, got {s}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "stds", s)

    @classmethod
    def from_components(cls, components: Iterable[Sequence[float]]) -> "GaussianMixture1D":
        comps = [tuple(c) for c in components]
        if not comps:
            raise ValueError("a mixture needs at least one component")
        w, m, s = zip(*comps)
        return cls(w, m, s)

    @classmethod
    def normal(cls, mean: float = 0.0, std: float = 1.0) -> "GaussianMixture1D":
        return cls((1.0,), (mean,), (std,))

    @property
    def components(self) -> list[tuple[float, float, float]]:
        return list(zip(self.weights, self.means, self.stds))

    def __len__(self):
        return len(self.weights)

    def _arrays(self):
        return np.asarray(self.weights), np.asarray(self.means), np.asarray(self.stds)

    def mean(self) -> float:
        w, m, _ = self._arrays()
        return float(np.dot(w, m))

    def variance(self) -> float:
        w, m, s = self._arrays()
        mu = np.dot(w, m)
        return float(np.dot(w, s**2 + m**2) - mu**2)


# ---------------------------------------------------------------------------
# evaluation


def _check_finite(x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("density evaluated at a non-finite point")
    return x


def _component_logs(gmm: GaussianMixture1D, x: np.ndarray):
    """log(w_i N(x; mu_i, s_i^2)) with components on the last axis, plus the standardised u."""
    w, m, s = gmm._arrays()
    u = (x[..., None] - m) / s
    logs = np.log(w) - np.log(s) - _LOG_SQRT_2PI - 0.5 * u * u
    return logs, u


def logpdf(gmm: GaussianMixture1D, x):
    x = _check_finite(x)
    logs, _ = _component_logs(gmm, x)
    out = special.logsumexp(logs, axis=-1)
    return float(out) if out.ndim == 0 else out


def pdf(gmm: GaussianMixture1D, x):
    """Mixture density ``sum_i w_i N(x; mu_i, s_i^2)``; scalar in, scalar out."""
    x = _check_finite(x)
    w, m, s = gmm._arrays()
    u = (x[..., None] - m) / s
    out = np.sum(w * np.exp(-0.5 * u * u) / (s * math.sqrt(2.0 * math.pi)), axis=-1)
    return float(out) if out.ndim == 0 else out


def responsibilities(gmm: GaussianMixture1D, x) -> np.ndarray:
    """Posterior component probabilities at ``x``, computed in log space."""
    x = _check_finite(x)
    logs, _ = _component_logs(gmm, x)
    return np.exp(logs - special.logsumexp(logs, axis=-1, keepdims=True))


def _hermite_he(u: np.ndarray, order: int) -> list[np.ndarray]:
    he = [np.ones_like(u), u]
    for n in range(1, order):
        he.append(u * he[n] - n * he[n - 1])
    return he[: order + 1]


def log_density_derivatives(gmm: GaussianMixture1D, x, max_order: int) -> list:
    """All derivatives of ``log pdf`` of orders ``1..max_order`` at ``x``.

    The ratios ``p^(j)/p`` are responsibility-weighted Hermite polynomials,
    so nothing underflows even far in the tails.  Log-derivatives follow
    from the moment-to-cumulant recursion
    ``L_n = m_n - sum_{j<n} C(n-1, j-1) L_j m_{n-j}``.
    """
    if max_order < 1:
        raise ValueError(f"derivative order must be >= 1, got {max_order}")
    x = _check_finite(x)
    logs, u = _component_logs(gmm, x)
    r = np.exp(logs - special.logsumexp(logs, axis=-1, keepdims=True))
    s = np.asarray(gmm.stds)
    he = _hermite_he(u, max_order)
    ratios = [None] + [
        np.sum(r * (-1.0) ** j * he[j] / s**j, axis=-1) for j in range(1, max_order + 1)
    ]
    logd = [None]
    for n in range(1, max_order + 1):
        acc = ratios[n]
        for j in range(1, n):
            acc = acc - math.comb(n - 1, j - 1) * logd[j] * ratios[n - j]
        logd.append(acc)
    return [float(v) if np.ndim(v) == 0 else v for v in logd[1:]]


def log_density_derivative(gmm: GaussianMixture1D, x, k: int):
    """k-th derivative of ``log pdf``: k=1 is the score, k=2 the Hessian."""
    if int(k) != k or k < 1:
        raise ValueError(f"derivative order must be a positive integer, got {k!r}")
    return log_density_derivatives(gmm, x, int(k))[-1]


def score(gmm: GaussianMixture1D, x):
    return log_density_derivative(gmm, x, 1)


def hessian(gmm: GaussianMixture1D, x):
    return log_density_derivative(gmm, x, 2)


# ---------------------------------------------------------------------------
# transformations


def perturb_density(gmm: GaussianMixture1D, sigma: float) -> GaussianMixture1D:
    """Marginal of ``x0 + sigma * z``: every component variance grows by sigma^2."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    stds = tuple(math.sqrt(s * s + sigma * sigma) for s in gmm.stds)
    return GaussianMixture1D(gmm.weights, gmm.means, stds)


def posterior(gmm: GaussianMixture1D, sigma: float, x_t: float) -> GaussianMixture1D:
    """Exact distribution of the clean sample given ``x_t = x0 + sigma * z``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    x_t = float(_check_finite(x_t))
    w, m, s = gmm._arrays()
    v = s * s
    tot = v + sigma * sigma
    logr = np.log(w) - 0.5 * np.log(tot) - 0.5 * (x_t - m) ** 2 / tot
    r = np.exp(logr - special.logsumexp(logr))
    keep = r > 0.0
    r = r[keep] / r[keep].sum()
    mean = (m * sigma * sigma + x_t * v) / tot
    std = np.sqrt(v * sigma * sigma / tot)
    return GaussianMixture1D(tuple(r), tuple(mean[keep]), tuple(std[keep]))


def sample(gmm: GaussianMixture1D, n: int, rng) -> np.ndarray:
    """Draw ``n`` i.i.d. points; ``rng`` is a numpy Generator or a seed."""
    if int(n) != n or n < 1:
        raise ValueError(f"sample size must be a positive integer, got {n!r}")
    rng = np.random.default_rng(rng)
    w, m, s = gmm._arrays()
    if len(w) == 1:
        idx = np.zeros(int(n), dtype=np.intp)
    else:
        idx = rng.choice(len(w), size=int(n), p=w / w.sum())
    return m[idx] + s[idx] * rng.standard_normal(int(n))


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureSpec:
    """Composite Simpson grid over ``[min mu - pad*max s, max mu + pad*max s]``."""

    points: int = 20001
    pad: float = 10.0
    tail_tol: float = 1e-10

    def grid(self, gmm: GaussianMixture1D) -> np.ndarray:
        smax = max(gmm.stds)
        return np.linspace(min(gmm.means) - self.pad * smax, max(gmm.means) + self.pad * smax, self.points)


def tail_mass(gmm: GaussianMixture1D, lo: float, hi: float) -> float:
    w, m, s = gmm._arrays()
    return float(np.sum(w * (stats.norm.cdf((lo - m) / s) + stats.norm.sf((hi - m) / s))))


def integrate_density(gmm: GaussianMixture1D, f=None, quadrature: QuadratureSpec | None = None) -> float:
    """``int f(x) p(x) dx`` on the quadrature grid (``f=None`` integrates p itself)."""
    quadrature = quadrature or QuadratureSpec()
    x = quadrature.grid(gmm)
    y = pdf(gmm, x)
    if f is not None:
        y = f(x) * y
    return float(integrate.simpson(y, x=x))


def fisher_information(gmm: GaussianMixture1D, quadrature: QuadratureSpec | None = None, full_output: bool = False):
    """Fisher information ``E[s(x)^2]`` of the mixture by Simpson quadrature.

    With ``full_output=True`` returns ``(value, info)`` where ``info`` holds
    the grid bounds, the probability mass left outside them and a
    ``narrow_grid`` flag.  A narrow grid also emits :class:`QuadratureWarning`.
    """
    quadrature = quadrature or QuadratureSpec()
    x = quadrature.grid(gmm)
    sc = score(gmm, x)
    value = float(integrate.simpson(sc * sc * pdf(gmm, x), x=x))
    outside = tail_mass(gmm, x[0], x[-1])
    narrow = outside > quadrature.tail_tol
    if narrow:
        warnings.warn(
            f"quadrature grid [{x[0]:.4g}, {x[-1]:.4g}] misses probability mass {outside:.3g}",
            QuadratureWarning,
            stacklevel=2,
        )
    if full_output:
        return value, {"lo": float(x[0]), "hi": float(x[-1]), "tail_mass": outside, "narrow_grid": narrow}
    return value


# ---------------------------------------------------------------------------
# config files


def parse_mixture(text: str, source: str = "<string>") -> GaussianMixture1D:
    """Parse ``component = <weight> <mean> <std>`` lines; ``#`` starts a comment."""
    comps = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or key.strip() != "component":
            raise ValueError(f"{source}:{lineno}: expected 'component = <weight> <mean> <std>', got {raw!r}")
        fields = value.split()
        if len(fields) != 3:
            raise ValueError(f"{source}:{lineno}: expected 3 numbers, found {len(fields)}")
        try:
            comps.append(tuple(float(f) for f in fields))
        except ValueError:
            raise ValueError(f"{source}:{lineno}: non-numeric component {value.strip()!r}") from None
    if not comps:
        raise ValueError(f"{source}: no components defined")
    try:
        return GaussianMixture1D.from_components(comps)
    except ValueError as exc:
        raise ValueError(f"{source}: {exc}") from None


BUNDLED = ("fig1_gmm.cfg", "gradvar_gmm.cfg")


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("wdsm") / "data" / name))


def load_mixture(path) -> GaussianMixture1D:
    """Load a mixture config; bare names of the bundled configs also resolve."""
    p = Path(path)
    if not p.exists() and p.name in BUNDLED and len(p.parts) == 1:
        p = bundled_path(p.name)
    if not p.exists():
        raise FileNotFoundError(f"density config not found: {path}")
    return parse_mixture(p.read_text(), source=str(path))


def fig1_mixture() -> GaussianMixture1D:
    return load_mixture("fig1_gmm.cfg")


def gradvar_mixture() -> GaussianMixture1D:
    return load_mixture("gradvar_gmm.cfg")
