"""Small tanh MLP score model s(x, sigma; theta) with hand-written backprop.

The network sees the features ``(x, log sigma)`` and outputs the score
directly (no preconditioning).  Parameters live in one flat vector laid
out layer by layer: the weight matrix row-major (``out x in``), then the
bias.  All evaluation is vectorised over a batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import NumericalError

INPUT_WIDTH = 2
OUTPUT_WIDTH = 1

# one hidden layer of width h gives 4h + 1 parameters
PAPER_LAYOUTS = {25: (6,), 361: (90,), 1321: (330,)}


@dataclass(frozen=True)
class MlpLayout:
    hidden: tuple[int, ...] = (6,)
    n_in: int = INPUT_WIDTH
    n_out: int = OUTPUT_WIDTH
    activation: str = "tanh"

    def __post_init__(self):
        hidden = tuple(int(h) for h in self.hidden)
        if not hidden or min(hidden) < 1:
            raise ValueError(f"hidden widths must be positive, got {self.hidden}")
        if self.activation != "tanh":
            raise ValueError("only tanh activations are supported")
        object.__setattr__(self, "hidden", hidden)

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.n_in, *self.hidden, self.n_out)

    @property
    def param_count(self) -> int:
        w = self.widths
        return sum((w[i] + 1) * w[i + 1] for i in range(len(w) - 1))

    def header(self) -> str:
        return "mlp " + " ".join(str(v) for v in self.widths)

    def slices(self):
        """``(weight_slice, weight_shape, bias_slice)`` per layer."""
        out, pos = [], 0
        w = self.widths
        for i in range(len(w) - 1):
            n_in, n_out = w[i], w[i + 1]
            ws = slice(pos, pos + n_in * n_out)
            pos += n_in * n_out
            bs = slice(pos, pos + n_out)
            pos += n_out
            out.append((ws, (n_out, n_in), bs))
        return out


def layout_for(param_count: int) -> MlpLayout:
    """Layout used for one of the reported model sizes (25, 361, 1321)."""
    if param_count not in PAPER_LAYOUTS:
        raise ValueError(f"no shipped layout with {param_count} parameters; have {sorted(PAPER_LAYOUTS)}")
    return MlpLayout(PAPER_LAYOUTS[param_count])


class MlpParams:
    """Flat parameter vector plus per-layer views into it."""

    __slots__ = ("layout", "vector", "_layers")

    def __init__(self, layout: MlpLayout, vector):
        vector = np.array(vector, dtype=float)
        if vector.shape != (layout.param_count,):
            raise ValueError(f"expected {layout.param_count} parameters, found {vector.size}")
        if not np.all(np.isfinite(vector)):
            raise ValueError("parameters must be finite")
        self.layout = layout
        self.vector = vector
        self._layers = [(vector[ws].reshape(shape), vector[bs]) for ws, shape, bs in layout.slices()]

    @property
    def layers(self):
        return self._layers

    def copy(self) -> "MlpParams":
        return MlpParams(self.layout, self.vector.copy())

    def __eq__(self, other):
        return (
            isinstance(other, MlpParams)
            and self.layout == other.layout
            and np.array_equal(self.vector, other.vector)
        )

    def __repr__(self):
        return f"MlpParams({self.layout.header()!r}, n={self.vector.size})"


def init(layout: MlpLayout, seed) -> MlpParams:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    vec = np.zeros(layout.param_count)
    for ws, (n_out, n_in), _ in layout.slices():
        lim = math.sqrt(6.0 / (n_in + n_out))
        vec[ws] = rng.uniform(-lim, lim, size=n_out * n_in)
    return MlpParams(layout, vec)


def features(x, sigma) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    x, sigma = np.broadcast_arrays(x, sigma)
    return np.stack([x.reshape(-1), np.log(sigma.reshape(-1))], axis=1)


def _forward(params: MlpParams, feats: np.ndarray):
    acts = [feats]
    h = feats
    layers = params.layers
    for W, b in layers[:-1]:
        h = np.tanh(h @ W.T + b)
        acts.append(h)
    W, b = layers[-1]
    out = (h @ W.T + b)[:, 0]
    return out, acts


def forward(params: MlpParams, x, sigma):
    """Network output at ``(x, sigma)``; arrays broadcast, scalars stay scalar."""
    shape = np.broadcast_shapes(np.shape(x), np.shape(sigma))
    out, _ = _forward(params, features(x, sigma))
    if not np.all(np.isfinite(out)):
        bad = int(np.argmax(~np.isfinite(out)))
        raise NumericalError(f"non-finite network output at sample {bad}")
    return float(out[0]) if shape == () else out.reshape(shape)


def input_grad(params: MlpParams, x, sigma):
    """d output / d x by backpropagating through the network input."""
    shape = np.broadcast_shapes(np.shape(x), np.shape(sigma))
    _, acts = _forward(params, features(x, sigma))
    layers = params.layers
    delta = np.broadcast_to(layers[-1][0], (acts[0].shape[0], layers[-1][0].shape[1]))
    for i in range(len(layers) - 2, -1, -1):
        delta = (delta * (1.0 - acts[i + 1] ** 2)) @ layers[i][0]
    g = delta[:, 0]
    return float(g[0]) if shape == () else g.reshape(shape)


class Batch(NamedTuple):
    """Arrays of equal length: noisy inputs, their noise levels, regression targets, loss weights."""

    x_t: np.ndarray
    sigma: np.ndarray
    target: np.ndarray
    weight: np.ndarray


def loss_and_grad(params: MlpParams, batch: Batch):
    """Weighted mean squared error and its exact gradient wrt the flat parameters.

    ``loss = mean(w * (s(x, sigma) - target)^2)``.
    """
    x_t, sigma, target, weight = (np.asarray(a, dtype=float).reshape(-1) for a in batch)
    n = x_t.size
    if n == 0:
        raise ValueError("empty batch")
    if not (np.all(np.isfinite(x_t)) and np.all(np.isfinite(target)) and np.all(np.isfinite(weight))):
        raise ValueError("batch contains non-finite values")
    if np.any(weight < 0):
        raise ValueError("loss weights must be non-negative")
    out, acts = _forward(params, features(x_t, sigma))
    resid = out - target
    if not np.all(np.isfinite(resid)):
        raise NumericalError("non-finite network output in loss evaluation")
    loss = float(np.mean(weight * resid * resid))

    grad = np.empty(params.layout.param_count)
    delta = (2.0 / n) * (weight * resid)[:, None]
    layers = params.layers
    slices = params.layout.slices()
    for i in range(len(layers) - 1, -1, -1):
        ws, shape, bs = slices[i]
        grad[ws] = (delta.T @ acts[i]).reshape(-1)
        grad[bs] = delta.sum(axis=0)
        if i:
            delta = (delta @ layers[i][0]) * (1.0 - acts[i] ** 2)
    return loss, grad


def per_sample_grads(params: MlpParams, batch: Batch) -> np.ndarray:
    """Rows are ``d/dtheta [w_i (s_i - target_i)^2]`` for each sample."""
    x_t, sigma, target, weight = (np.asarray(a, dtype=float).reshape(-1) for a in batch)
    out, acts = _forward(params, features(x_t, sigma))
    delta = (2.0 * weight * (out - target))[:, None]
    layers = params.layers
    slices = params.layout.slices()
    G = np.empty((x_t.size, params.layout.param_count))
    for i in range(len(layers) - 1, -1, -1):
        ws, shape, bs = slices[i]
        G[:, ws] = (delta[:, :, None] * acts[i][:, None, :]).reshape(x_t.size, -1)
        G[:, bs] = delta
        if i:
            delta = (delta @ layers[i][0]) * (1.0 - acts[i] ** 2)
    return G


# ---------------------------------------------------------------------------
# persistence


def save(params: MlpParams, path) -> None:
    lines = [params.layout.header()] + [repr(float(v)) for v in params.vector]
    Path(path).write_text("\n".join(lines) + "\n")


def load(path, layout: MlpLayout | None = None) -> MlpParams:
    """Read a parameter file; if ``layout`` is given the header must match it."""
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError(f"{path}: empty parameter file")
    head = text[0].split()
    if len(head) < 3 or head[0] != "mlp":
        raise ValueError(f"{path}:1: expected header 'mlp <in> <hidden...> <out>', got {text[0]!r}")
    try:
        widths = [int(v) for v in head[1:]]
    except ValueError:
        raise ValueError(f"{path}:1: non-integer width in header {text[0]!r}") from None
    found = MlpLayout(tuple(widths[1:-1]), n_in=widths[0], n_out=widths[-1])
    if layout is not None and found != layout:
        raise ValueError(f"{path}: header {found.header()!r} does not match requested layout {layout.header()!r}")
    values = []
    for lineno, line in enumerate(text[1:], 2):
        line = line.strip()
        if not line:
            continue
        try:
            values.append(float(line))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: not a number: {line!r}") from None
    if len(values) != found.param_count:
        raise ValueError(f"{path}: expected {found.param_count} parameters, found {len(values)}")
    return MlpParams(found, values)
