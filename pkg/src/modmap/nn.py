"""Minimal dense neural-network engine on numpy arrays.

Covers exactly what the pipeline needs: GeLU MLPs with hand-written
reverse-mode gradients, a bias-corrected Adam optimizer, a one-cycle
cosine learning-rate schedule, and a cosine-distance loss with its
analytic gradient. All tensors are 2-D float arrays (batch x features);
float32 is the pipeline default, float64 is supported for gradient
checking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32

# Safeguard added to each norm inside cosine_distance; vectors whose raw
# norm falls below it are treated as degenerate.
NORM_EPS = 1e-8

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class DegenerateNormError(ValueError):
    """Raised when a vector norm is below the cosine safeguard threshold."""


class NumericError(RuntimeError):
    """Raised when a non-finite value appears where finite math is required."""


def gelu(x):
    """tanh-approximation GeLU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    x = np.asarray(x)
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_grad(x):
    """Exact derivative of the tanh-approximation GeLU."""
    x = np.asarray(x)
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner


@dataclass
class DenseLayer:
    """One affine layer: y = x @ weight.T + bias, weight is (out, in)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight)
        self.bias = np.ascontiguousarray(self.bias)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("weight must be 2-D and bias 1-D")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ValueError(
                f"bias length {self.bias.shape[0]} != weight rows {self.weight.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class Mlp:
    """Dense layers with GeLU between them and an identity output layer."""

    layers: list[DenseLayer]

    def __post_init__(self):
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.in_dim != prev.out_dim:
                raise ValueError(
                    f"layer dims do not chain: {prev.out_dim} -> {cur.in_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim


def init_dense(rng: np.random.Generator, in_dim: int, out_dim: int, dtype=DEFAULT_DTYPE) -> DenseLayer:
    """Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) init for weight and bias."""
    limit = math.sqrt(1.0 / in_dim)
    w = rng.uniform(-limit, limit, size=(out_dim, in_dim)).astype(dtype)
    b = rng.uniform(-limit, limit, size=(out_dim,)).astype(dtype)
    return DenseLayer(w, b)


def build_mlp(rng: np.random.Generator, dims: list[int], dtype=DEFAULT_DTYPE) -> Mlp:
    """Mlp through the given dim chain, e.g. [16, 16, 12, 8, 12]."""
    layers = [init_dense(rng, dims[k], dims[k + 1], dtype) for k in range(len(dims) - 1)]
    return Mlp(layers)


def mlp_forward(net: Mlp, x: np.ndarray):
    """Forward pass over a (batch, in_dim) array.

    Returns (output, cache); the cache holds per-layer inputs and
    pre-activations and is consumed by :func:`mlp_backward`.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(f"input shape {x.shape} incompatible with in_dim {net.in_dim}")
    cache = []
    h = x
    last = len(net.layers) - 1
    for k, layer in enumerate(net.layers):
        z = h @ layer.weight.T + layer.bias
        cache.append((h, z))
        h = z if k == last else gelu(z)
    return h, cache


def mlp_backward(net: Mlp, cache, output_gradient: np.ndarray):
    """Reverse-mode gradients for a forward pass recorded in `cache`.

    `output_gradient` is dLoss/dOutput with the same shape as the forward
    output. Returns (param_grads, input_gradient) where param_grads is a
    list of (dweight, dbias) aligned with net.layers.
    """
    if len(cache) != len(net.layers):
        raise ValueError("cache does not match network depth")
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.layers)
    d = np.asarray(output_gradient)
    last = len(net.layers) - 1
    if d.shape != (cache[last][1].shape):
        raise ValueError(f"output gradient shape {d.shape} != {cache[last][1].shape}")
    for k in range(last, -1, -1):
        h, z = cache[k]
        dz = d if k == last else d * gelu_grad(z)
        dw = dz.T @ h
        db = dz.sum(axis=0)
        grads[k] = (dw, db)
        d = dz @ net.layers[k].weight
    return grads, d


def mlp_parameters(net: Mlp) -> list[np.ndarray]:
    params = []
    for layer in net.layers:
        params.append(layer.weight)
        params.append(layer.bias)
    return params


def cosine_distance(x: np.ndarray, y: np.ndarray):
    """1 - cos(x, y) for two vectors, plus the analytic gradient wrt x.

    Each norm is safeguarded by adding NORM_EPS; vectors whose raw norm is
    below NORM_EPS raise DegenerateNormError instead of returning a
    meaningless score.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D vectors of equal length")
    nx = float(np.linalg.norm(x))
    ny = float(np.linalg.norm(y))
    if nx < NORM_EPS:
        raise DegenerateNormError(f"x norm {nx:.3e} below {NORM_EPS:.0e}")
    if ny < NORM_EPS:
        raise DegenerateNormError(f"y norm {ny:.3e} below {NORM_EPS:.0e}")
    sx = nx + NORM_EPS
    sy = ny + NORM_EPS
    dot = float(x @ y)
    dist = 1.0 - dot / (sx * sy)
    grad = -y / (sx * sy) + (dot / (nx * sx * sx * sy)) * x
    return dist, grad


def rows_cosine_distance(x: np.ndarray, y: np.ndarray):
    """Row-wise safeguarded cosine distance with gradient wrt x.

    Returns (dist (B,), grad_x (B, c), degenerate (B,) bool). Degenerate
    rows (either input below NORM_EPS) get distance 0 and zero gradient;
    callers decide whether to skip or mask them.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError("x and y must be (batch, c) arrays of equal shape")
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    degenerate = (nx < NORM_EPS) | (ny < NORM_EPS)
    sx = nx + NORM_EPS
    sy = ny + NORM_EPS
    dot = np.einsum("ij,ij->i", x, y)
    denom = sx * sy
    dist = 1.0 - dot / denom
    # grad = -y/(sx*sy) + dot/(nx*sx^2*sy) * x
    nx_safe = np.where(nx < NORM_EPS, 1.0, nx)
    coeff = dot / (nx_safe * sx * sx * sy)
    grad = -y / denom[:, None] + coeff[:, None] * x
    if degenerate.any():
        dist = np.where(degenerate, 0.0, dist)
        grad = np.where(degenerate[:, None], 0.0, grad)
    return dist, grad, degenerate


@dataclass
class AdamState:
    """Per-parameter first/second moment buffers plus the step counter."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(params: list[np.ndarray]) -> AdamState:
    return AdamState(
        first_moment=[np.zeros_like(p) for p in params],
        second_moment=[np.zeros_like(p) for p in params],
    )


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    names: list[str] | None = None,
) -> None:
    """Bias-corrected Adam update applied to `params` in place."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if len(params) != len(grads):
        raise ValueError("params and grads length mismatch")
    for idx, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            label = names[idx] if names else f"param[{idx}]"
            raise NumericError(f"non-finite gradient for {label}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        g = g.astype(p.dtype, copy=False)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype, copy=False)


@dataclass(frozen=True)
class OneCycleSchedule:
    """Cosine warm-up to lr_max then cosine decay to lr_final."""

    total_steps: int
    warmup_fraction: float = 0.10
    lr_init: float = 1e-4
    lr_max: float = 5e-4
    lr_final: float = 1e-6

    def __post_init__(self):
        if self.total_steps < 2:
            raise ValueError("total_steps must be >= 2")
        if not (0.0 < self.warmup_fraction < 1.0):
            raise ValueError("warmup_fraction must be in (0, 1)")
        if self.lr_init > self.lr_max:
            raise ValueError("lr_init must be <= lr_max")
        if self.lr_final > self.lr_init:
            raise ValueError("lr_final must be <= lr_init")

    @property
    def warmup_end(self) -> int:
        w = int(round(self.warmup_fraction * self.total_steps))
        return min(max(w, 1), self.total_steps - 1)


def lr_at(schedule: OneCycleSchedule, step: int) -> float:
    """Learning rate at an integer step in [0, total_steps]."""
    if step < 0 or step > schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    w = schedule.warmup_end
    if step <= w:
        phase = step / w
        return schedule.lr_init + (schedule.lr_max - schedule.lr_init) * 0.5 * (
            1.0 - math.cos(math.pi * phase)
        )
    phase = (step - w) / (schedule.total_steps - w)
    return schedule.lr_final + (schedule.lr_max - schedule.lr_final) * 0.5 * (
        1.0 + math.cos(math.pi * phase)
    )
