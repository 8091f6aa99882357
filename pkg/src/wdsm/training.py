"""Weighted DSM training, gradient-variance measurement and the loss-gap check."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import density, sampling, score_net
from .density import GaussianMixture1D
from .errors import NumericalError
from .schedule import NoiseSchedule, sigma_at
from .score_net import Batch, MlpLayout, MlpParams
from .weighting import WeightingScheme, noised_fisher

log = logging.getLogger(__name__)

# stream ids for SeedSequence([seed, stream])
_INIT, _DATA, _EVAL, _GRADVAR, _GT = 0, 1, 2, 3, 4


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


@dataclass(frozen=True)
class TrainConfig:
    gmm: GaussianMixture1D
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    weighting: str = "heuristic"
    layout: MlpLayout = field(default_factory=MlpLayout)
    batch_size: int = 128
    iterations: int = 80_000
    lr: float = 1e-3
    eval_every: int = 2_000
    seed: int = 0
    n_eval: int = 5_000
    sampler_steps: int = 1_000
    t_min: float = 0.0
    eval_ground_truth: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch size and iteration count must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.eval_every < 1:
            raise ValueError("eval interval must be >= 1")
        if not (0.0 <= self.t_min < 1.0):
            raise ValueError("t_min must lie in [0, 1)")
        # normalises aliases and checks the density requirement early
        object.__setattr__(self, "weighting", self.scheme().tag)

    def scheme(self) -> WeightingScheme:
        return WeightingScheme(self.weighting, self.gmm)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gmm"] = [list(c) for c in self.gmm.components]
        d["layout"] = list(self.layout.widths)
        d["schedule"] = [self.schedule.sigma_min, self.schedule.sigma_max]
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class Adam:
    """Adam on a flat parameter vector, updated in place."""

    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        params -= (self.lr / bc1) * self.m / (np.sqrt(self.v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# batches


def dsm_batch(config: TrainConfig, params=None, sigma=None, rng=None, n: int | None = None) -> Batch:
    """One denoising batch: ``x0 ~ p``, ``x_t = x0 + sigma z``, target ``-z/sigma``.

    With ``sigma=None`` every sample gets its own uniformly drawn time;
    otherwise all samples share the given noise level.  ``params`` is
    accepted for signature symmetry and unused.
    """
    rng = np.random.default_rng(rng)
    n = config.batch_size if n is None else n
    if sigma is None:
        t = rng.uniform(config.t_min, 1.0, size=n)
        sig = np.asarray(sigma_at(config.schedule, t))
    else:
        sig = np.full(n, float(sigma))
    x0 = density.sample(config.gmm, n, rng)
    z = rng.standard_normal(n)
    x_t = x0 + sig * z
    w = config.scheme().weight(sig, x_t)
    return Batch(x_t, sig, -z / sig, np.asarray(w, dtype=float))


def sm_batch_from(config: TrainConfig, batch: Batch) -> Batch:
    """Same inputs and weights as ``batch`` but regressing on the true marginal score."""
    target = _marginal_score(config.gmm, batch.x_t, batch.sigma)
    return Batch(batch.x_t, batch.sigma, target, batch.weight)


def _marginal_score(gmm: GaussianMixture1D, x, sigma):
    """Exact score of the noised mixture for per-sample noise levels."""
    x = np.asarray(x, dtype=float)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), x.shape)
    w, m, s = gmm._arrays()
    tot = s * s + (sigma * sigma)[..., None]
    d = x[..., None] - m
    logr = np.log(w) - 0.5 * np.log(tot) - 0.5 * d * d / tot
    logr -= logr.max(axis=-1, keepdims=True)
    r = np.exp(logr)
    r /= r.sum(axis=-1, keepdims=True)
    return np.sum(r * (-d / tot), axis=-1)


def analytic_score_fn(gmm: GaussianMixture1D) -> Callable:
    """``score(x, sigma)`` of ``gmm`` noised at level sigma."""
    return lambda x, sigma: _marginal_score(gmm, x, sigma)


def model_score_fn(params: MlpParams) -> Callable:
    return lambda x, sigma: score_net.forward(params, x, np.broadcast_to(sigma, np.shape(x)))


# ---------------------------------------------------------------------------
# run log


def moving_average(values, window: int = 5) -> np.ndarray:
    """Centred moving average whose window is truncated at the ends."""
    v = np.asarray(values, dtype=float)
    half = window // 2
    out = np.empty_like(v)
    for i in range(v.size):
        lo, hi = max(0, i - half), min(v.size, i + half + 1)
        out[i] = v[lo:hi].mean()
    return out


@dataclass
class RunLog:
    header: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    def add(self, iteration: int, loss: float, model_ed: float, gen_ed: float = float("nan")):
        if self.records and iteration <= self.records[-1]["iterations"]:
            raise ValueError("run log iterations must increase strictly")
        self.records.append(
            {"iterations": int(iteration), "loss": float(loss), "model_sample_ed": float(model_ed), "gen_sample_ed": float(gen_ed)}
        )

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=float)

    @property
    def iterations(self) -> np.ndarray:
        return self.column("iterations").astype(int)

    def final_smoothed(self, name: str = "model_sample_ed", window: int = 5) -> float:
        return float(moving_average(self.column(name), window)[-1])


ED_COLUMNS = ("model_sample_ed", "gen_sample_ed")


def runlog_table(logs: Sequence[RunLog], window: int = 5) -> dict:
    """Columns of one run, or mean / std-error across seeds for several.

    ``*_lb``/``*_ub`` are mean minus/plus one standard error (equal to the
    value itself for a single run).
    """
    if not logs:
        raise ValueError("no run logs to tabulate")
    its = logs[0].iterations
    for lg in logs[1:]:
        if not np.array_equal(lg.iterations, its):
            raise ValueError("run logs disagree on evaluation iterations")
    table = {"iterations": its}
    loss = np.stack([lg.column("loss") for lg in logs])
    table["loss"] = loss.mean(axis=0)
    for name in ED_COLUMNS:
        vals = np.stack([lg.column(name) for lg in logs])
        mean = vals.mean(axis=0)
        se = vals.std(axis=0, ddof=1) / math.sqrt(len(logs)) if len(logs) > 1 else np.zeros_like(mean)
        table[name] = mean
        table[f"{name}_smoothed"] = moving_average(mean, window)
        table[f"{name}_lb"] = mean - se
        table[f"{name}_ub"] = mean + se
        table[f"{name}_mean"] = mean
        table[f"{name}_std_err"] = se
    return table


# ---------------------------------------------------------------------------
# training


def evaluate(params: MlpParams, config: TrainConfig, rng, ground_truth: bool = True):
    """Energy distances of model (and analytic-score) samples to fresh data."""
    cfg = sampling.SamplerConfig(steps=config.sampler_steps, n_samples=config.n_eval)
    data = density.sample(config.gmm, config.n_eval, rng)
    model = sampling.reverse_sde_sample(model_score_fn(params), config.schedule, cfg, rng)
    model_ed = sampling.energy_distance(model, data)
    gen_ed = float("nan")
    if ground_truth:
        gen = sampling.reverse_sde_sample(analytic_score_fn(config.gmm), config.schedule, cfg, rng)
        gen_ed = sampling.energy_distance(gen, data)
    return model_ed, gen_ed


def train(config: TrainConfig, params: MlpParams | None = None, on_eval: Callable | None = None):
    """Adam on the weighted DSM loss; evaluates every ``eval_every`` iterations.

    Returns ``(params, RunLog)``.  The log starts with the untrained model
    at iteration 0.  ``on_eval(iteration, params)`` runs after each
    evaluation (including iteration 0).
    """
    params = score_net.init(config.layout, rng_stream(config.seed, _INIT)) if params is None else params.copy()
    data_rng = rng_stream(config.seed, _DATA)
    eval_rng = rng_stream(config.seed, _EVAL)
    opt = Adam(params.layout.param_count, lr=config.lr)
    scheme = config.scheme()
    runlog = RunLog(header={"config_sha256": config.digest(), "seed": config.seed, "weighting": scheme.tag,
                            "optimizer": f"adam lr={config.lr} b1=0.9 b2=0.999 eps=1e-8", "batch_size": config.batch_size,
                            "energy_distance": "V-statistic, not square-rooted"})

    def record(it, loss):
        model_ed, gen_ed = evaluate(params, config, eval_rng, config.eval_ground_truth)
        runlog.add(it, loss, model_ed, gen_ed)
        log.info("iter %d loss %.5g model_ed %.5g gen_ed %.5g", it, loss, model_ed, gen_ed)
        if on_eval is not None:
            on_eval(it, params)

    loss0, _ = score_net.loss_and_grad(params, dsm_batch(config, rng=rng_stream(config.seed, _DATA, 0)))
    record(0, loss0)
    running = 0.0
    for it in range(1, config.iterations + 1):
        batch = dsm_batch(config, rng=data_rng)
        loss, grad = score_net.loss_and_grad(params, batch)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NumericalError(f"training diverged at iteration {it} (loss={loss})")
        opt.step(params.vector, grad)
        running += loss
        if it % config.eval_every == 0:
            record(it, running / config.eval_every)
            running = 0.0
    return params, runlog


# ---------------------------------------------------------------------------
# gradient variance


@dataclass
class GradVarReport:
    """Trace of the across-batch gradient covariance per (checkpoint, level, weighting, seed)."""

    sigma_levels: np.ndarray
    weightings: tuple
    seeds: tuple
    iterations: np.ndarray
    traces: np.ndarray  # shape (iterations, levels, weightings, seeds)

    def mean(self) -> np.ndarray:
        return self.traces.mean(axis=-1)

    def std_err(self) -> np.ndarray:
        k = self.traces.shape[-1]
        if k < 2:
            return np.zeros(self.traces.shape[:-1])
        return self.traces.std(axis=-1, ddof=1) / math.sqrt(k)

    def final(self, weighting: str):
        j = self.weightings.index(weighting)
        return self.mean()[-1, :, j], self.std_err()[-1, :, j]

    def table(self) -> dict:
        its, lv = np.meshgrid(self.iterations, np.arange(len(self.sigma_levels)), indexing="ij")
        out = {"iterations": its.reshape(-1), "level": lv.reshape(-1), "sigma_t": self.sigma_levels[lv].reshape(-1)}
        mean, se = self.mean(), self.std_err()
        for j, w in enumerate(self.weightings):
            key = w.split("-")[0]
            out[f"{key}_trace_mean"] = mean[:, :, j].reshape(-1)
            out[f"{key}_trace_std_err"] = se[:, :, j].reshape(-1)
        return out


def batch_gradient_trace(params: MlpParams, batches: Sequence[Batch]) -> float:
    """Trace of the sample covariance (ddof=1) of per-batch mean gradients."""
    G = np.stack([score_net.loss_and_grad(params, b)[1] for b in batches])
    return float(np.sum(G.var(axis=0, ddof=1)))


def _gradvar_at(params, config, levels, weightings, batches, rng):
    out = np.empty((len(levels), len(weightings)))
    schemes = [WeightingScheme(w, config.gmm) for w in weightings]
    for i, sig in enumerate(levels):
        raw = [dsm_batch(replace(config, weighting="none"), sigma=sig, rng=rng) for _ in range(batches)]
        for j, sch in enumerate(schemes):
            bs = [b._replace(weight=np.asarray(sch.weight(b.sigma, b.x_t), dtype=float)) for b in raw]
            out[i, j] = batch_gradient_trace(params, bs)
    return out


def gradient_variance(config: TrainConfig, sigma_levels, batches: int = 10, seeds: Sequence[int] = (0, 1, 2),
                      weightings=("heuristic", "optimal-pointwise"), at_init: bool = False) -> GradVarReport:
    """Gradient-covariance traces along a heuristic-weighted training run.

    For every seed a model is trained with ``config`` (weighting forced to
    heuristic); at each evaluation checkpoint, and for each noise level,
    ``batches`` fixed-sigma batches are drawn and the same batches are
    re-weighted by every scheme in ``weightings``.  ``at_init=True``
    measures only the freshly initialised model.
    """
    if batches < 2:
        raise ValueError("need at least two batches for a covariance")
    if not seeds:
        raise ValueError("need at least one seed")
    levels = np.asarray(sigma_levels, dtype=float)
    weightings = tuple(WeightingScheme(w, config.gmm).tag for w in weightings)
    per_seed, its = [], None
    for seed in seeds:
        cfg = replace(config, seed=int(seed), weighting="heuristic", eval_ground_truth=False)
        rng = rng_stream(seed, _GRADVAR)
        snaps: list = []
        checkpoints: list = []

        def on_eval(it, params):
            checkpoints.append(it)
            snaps.append(_gradvar_at(params, cfg, levels, weightings, batches, rng))

        if at_init:
            on_eval(0, score_net.init(cfg.layout, rng_stream(seed, _INIT)))
        else:
            _train_without_sampling(cfg, on_eval)
        if its is None:
            its = checkpoints
        per_seed.append(np.stack(snaps))
    traces = np.stack(per_seed, axis=-1)
    return GradVarReport(levels, weightings, tuple(int(s) for s in seeds), np.asarray(its), traces)


def _train_without_sampling(config: TrainConfig, on_eval: Callable):
    """Training loop that calls ``on_eval`` at checkpoints but skips ED sampling."""
    params = score_net.init(config.layout, rng_stream(config.seed, _INIT))
    data_rng = rng_stream(config.seed, _DATA)
    opt = Adam(params.layout.param_count, lr=config.lr)
    on_eval(0, params)
    for it in range(1, config.iterations + 1):
        loss, grad = score_net.loss_and_grad(params, dsm_batch(config, rng=data_rng))
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NumericalError(f"training diverged at iteration {it} (loss={loss})")
        opt.step(params.vector, grad)
        if it % config.eval_every == 0:
            on_eval(it, params)
    return params


def compare_dsm_sm_gradients(params: MlpParams, config: TrainConfig, sigma: float, batches: int = 200, rng=None):
    """Per-batch DSM and SM gradients on shared inputs at one noise level.

    Returns ``(dsm_grads, sm_grads)``, each of shape ``(batches, n_params)``.
    """
    rng = np.random.default_rng(rng)
    dsm, sm = [], []
    for _ in range(batches):
        b = dsm_batch(config, sigma=sigma, rng=rng)
        dsm.append(score_net.loss_and_grad(params, b)[1])
        sm.append(score_net.loss_and_grad(params, sm_batch_from(config, b))[1])
    return np.stack(dsm), np.stack(sm)


# ---------------------------------------------------------------------------
# loss decomposition


class GapResult(NamedTuple):
    l_dsm: float
    l_sm: float
    gap: float
    analytic_constant: float
    gap_std_err: float


def pythagorean_gap(gmm: GaussianMixture1D, sigma: float, score_fn: Callable, n: int, rng) -> GapResult:
    """Monte-Carlo DSM and SM losses of ``score_fn`` and their difference.

    ``score_fn(x)`` is a model of the first-order score at this noise
    level.  The analytic constant is ``1/sigma^2 - I(sigma)``.
    """
    if n < 1000:
        raise ValueError("use at least 1000 samples")
    rng = np.random.default_rng(rng)
    x0 = density.sample(gmm, n, rng)
    z = rng.standard_normal(n)
    x_t = x0 + sigma * z
    f = np.asarray(score_fn(x_t), dtype=float)
    cond = -z / sigma
    marg = _marginal_score(gmm, x_t, sigma)
    dsm = (f - cond) ** 2
    sm = (f - marg) ** 2
    diff = dsm - sm
    const = 1.0 / sigma**2 - noised_fisher(gmm, float(sigma))
    return GapResult(float(dsm.mean()), float(sm.mean()), float(diff.mean()), float(const),
                     float(diff.std(ddof=1) / math.sqrt(n)))
