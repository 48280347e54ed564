"""Feature normalization with selectable scheme, averaging, and statistic.

A layer is described by three independent choices:

* scheme: NON_ADAPTIVE freezes statistics gathered during training (running
  buffers); ADAPTIVE recomputes them from whatever batch is being evaluated.
* averaging: BATCH reduces over the batch axis plus all spatial axes;
  INSTANCE reduces over spatial axes only, one estimate per sample.
* statistic: MEAN_STD centers and scales by sqrt(var + eps); MEAN_SQUARE
  scales by sqrt(mean(x^2) + eps) without centering.

NON_ADAPTIVE + INSTANCE is rejected: per-sample statistics cannot be frozen
into a single running buffer, and non-adaptive use requires stable estimates
that exist only under batch averaging.

The channel axis is always axis 1 and is never reduced. Running buffers are
maintained for BATCH averaging regardless of scheme, so one batch-averaged
checkpoint can later be evaluated both non-adaptively and adaptively.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import ConfigError, StateError
from .tensor import FeatureTensor, _active_tape, _as_array


class Scheme(str, Enum):
    NON_ADAPTIVE = "non_adaptive"
    ADAPTIVE = "adaptive"


class Averaging(str, Enum):
    BATCH = "batch"
    INSTANCE = "instance"


class Statistic(str, Enum):
    MEAN_STD = "mean_std"
    MEAN_SQUARE = "mean_square"


@dataclass(frozen=True)
class NormSpec:
    """Immutable description of one normalization layer's behavior."""

    scheme: Scheme = Scheme.NON_ADAPTIVE
    averaging: Averaging = Averaging.BATCH
    statistic: Statistic = Statistic.MEAN_STD
    epsilon: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "averaging", Averaging(self.averaging))
        object.__setattr__(self, "statistic", Statistic(self.statistic))
        if self.scheme is Scheme.NON_ADAPTIVE and self.averaging is Averaging.INSTANCE:
            raise ConfigError(
                "non-adaptive normalization cannot use instance averaging: "
                "frozen statistics need stable batch-level estimates, and "
                "per-sample statistics are only meaningful when recomputed "
                "at evaluation time"
            )
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if not 0 < self.momentum <= 1:
            raise ConfigError("momentum must lie in (0, 1]")


class NormState:
    """Per-layer learned affine plus running statistics.

    gamma/beta are trainable tensors. running_mean exists only for MEAN_STD;
    running_sq holds the running variance (MEAN_STD) or running mean square
    (MEAN_SQUARE). updates_seen counts how many times the running buffers
    were actually written, so it stays 0 for layers trained purely with
    instance averaging.
    """

    def __init__(self, channels, statistic=Statistic.MEAN_STD, dtype=np.float32):
        statistic = Statistic(statistic)
        channels = int(channels)
        if channels < 1:
            raise ConfigError("need at least one channel")
        self.gamma = FeatureTensor(np.ones(channels, dtype=dtype))
        self.beta = FeatureTensor(np.zeros(channels, dtype=dtype))
        self.statistic = statistic
        self.running_mean = (
            np.zeros(channels, dtype=dtype) if statistic is Statistic.MEAN_STD else None
        )
        self.running_sq = np.ones(channels, dtype=dtype)
        self.updates_seen = 0

    @property
    def channels(self):
        return self.gamma.data.shape[0]


@dataclass
class NormCache:
    """Values saved by the training forward for the backward pass."""

    xhat: np.ndarray
    inv: np.ndarray  # 1 / sqrt(second_moment + eps), broadcast shape
    axes: tuple
    statistic: Statistic
    gamma: np.ndarray
    extras: dict = field(default_factory=dict)


def reduction_axes(averaging, rank):
    """Axes reduced when estimating statistics for an input of this rank."""
    averaging = Averaging(averaging)
    if rank < 2:
        raise ConfigError("normalization needs at least (batch, channels) axes")
    spatial = tuple(range(2, rank))
    if averaging is Averaging.BATCH:
        return (0,) + spatial
    if not spatial:
        raise ConfigError(
            "instance averaging needs at least one spatial axis; a rank-2 "
            "input leaves nothing to average per sample"
        )
    return spatial


def normalize_with_stats(x, mean, second, epsilon, statistic):
    """Shared normalization kernel: no affine, statistics supplied.

    For MEAN_STD `second` is the variance; for MEAN_SQUARE it is the raw
    second moment and `mean` is ignored. Homogeneous of degree 0 in
    (x, sqrt-stats) when epsilon is 0.
    """
    inv = 1.0 / np.sqrt(second + epsilon)
    if Statistic(statistic) is Statistic.MEAN_STD:
        return (x - mean) * inv, inv
    return x * inv, inv


def _compute_stats(xd, axes, statistic):
    if statistic is Statistic.MEAN_STD:
        return xd.mean(axis=axes, keepdims=True), xd.var(axis=axes, keepdims=True)
    return None, np.mean(xd * xd, axis=axes, keepdims=True)


def _affine_shape(rank, channels):
    return (1, channels) + (1,) * (rank - 2)


def _check_channels(xd, state):
    if xd.ndim < 2 or xd.shape[1] != state.channels:
        raise ConfigError(
            f"input with {xd.shape[1] if xd.ndim >= 2 else '?'} channels does not "
            f"match layer width {state.channels}"
        )


def norm_forward_train(x, spec, state):
    """Training-mode forward: batch statistics, running-buffer update.

    Returns (y, cache). y is differentiable with respect to x, gamma, and
    beta, including the dependence of the statistics on x. Running buffers
    (and updates_seen) are written only under BATCH averaging.
    """
    xd = _as_array(x)
    _check_channels(xd, state)
    if spec.statistic is not state.statistic:
        raise ConfigError("spec statistic does not match the layer state")
    axes = reduction_axes(spec.averaging, xd.ndim)
    count = 1
    for a in axes:
        count *= xd.shape[a]
    if spec.averaging is Averaging.BATCH and count == 1:
        warnings.warn(
            "batch averaging over a single value gives degenerate statistics",
            stacklevel=2,
        )

    mean, second = _compute_stats(xd, axes, spec.statistic)
    xhat, inv = normalize_with_stats(xd, mean, second, spec.epsilon, spec.statistic)
    cshape = _affine_shape(xd.ndim, state.channels)
    gamma_d = state.gamma.data
    beta_d = state.beta.data
    y = gamma_d.reshape(cshape) * xhat + beta_d.reshape(cshape)

    if spec.averaging is Averaging.BATCH:
        m = spec.momentum
        if spec.statistic is Statistic.MEAN_STD:
            state.running_mean = (
                (1.0 - m) * state.running_mean + m * mean.reshape(-1)
            ).astype(state.running_sq.dtype, copy=False)
        state.running_sq = ((1.0 - m) * state.running_sq + m * second.reshape(-1)).astype(
            state.running_sq.dtype, copy=False
        )
        state.updates_seen += 1

    cache = NormCache(xhat=xhat, inv=inv, axes=axes, statistic=spec.statistic, gamma=gamma_d)
    out = FeatureTensor(y)
    tape = _active_tape((x, state.gamma, state.beta))
    if tape is None:
        return out, cache

    def backward_fn(g):
        return norm_backward(g, cache, spec)

    return tape.emit("normalize", (x, state.gamma, state.beta), out, backward_fn), cache


def norm_forward_eval(x, spec, state):
    """Evaluation-mode forward; never mutates state.

    NON_ADAPTIVE normalizes with the running buffers (a fixed per-channel
    affine map), ADAPTIVE recomputes statistics from x exactly as the
    training forward would.
    """
    xd = _as_array(x)
    _check_channels(xd, state)
    if spec.statistic is not state.statistic:
        raise ConfigError("spec statistic does not match the layer state")
    cshape = _affine_shape(xd.ndim, state.channels)
    if spec.scheme is Scheme.NON_ADAPTIVE:
        if state.updates_seen < 1:
            raise StateError(
                "running statistics have never been updated; a layer trained "
                "with instance averaging cannot be evaluated non-adaptively"
            )
        mean = None
        if spec.statistic is Statistic.MEAN_STD:
            mean = state.running_mean.reshape(cshape)
        second = state.running_sq.reshape(cshape)
    else:
        axes = reduction_axes(spec.averaging, xd.ndim)
        mean, second = _compute_stats(xd, axes, spec.statistic)
    xhat, _ = normalize_with_stats(xd, mean, second, spec.epsilon, spec.statistic)
    y = state.gamma.data.reshape(cshape) * xhat + state.beta.data.reshape(cshape)
    return FeatureTensor(y)


def norm_backward(grad_y, cache, spec):
    """Gradients of the training forward: (grad_x, grad_gamma, grad_beta).

    Closed forms, with A the reduced axes and n the reduced count:

      MEAN_STD:    gx = gamma*inv * (g - mean_A(g) - xhat * mean_A(g*xhat))
      MEAN_SQUARE: gx = gamma*inv * (g - xhat * mean_A(g*xhat))
      grad_gamma = sum_A(g * xhat),  grad_beta = sum_A(g)
    """
    g = _as_array(grad_y)
    if g.shape != cache.xhat.shape:
        raise ValueError(
            f"gradient shape {g.shape} does not match cached activation "
            f"shape {cache.xhat.shape}"
        )
    axes = cache.axes
    n = 1
    for a in axes:
        n *= g.shape[a]
    cshape = _affine_shape(g.ndim, cache.gamma.shape[0])
    gamma_r = cache.gamma.reshape(cshape)
    sum_gx = (g * cache.xhat).sum(axis=axes, keepdims=True)
    if cache.statistic is Statistic.MEAN_STD:
        sum_g = g.sum(axis=axes, keepdims=True)
        gx = gamma_r * cache.inv * (g - sum_g / n - cache.xhat * (sum_gx / n))
    else:
        gx = gamma_r * cache.inv * (g - cache.xhat * (sum_gx / n))
    reduce_to_channel = tuple(a for a in range(g.ndim) if a != 1)
    grad_gamma = (g * cache.xhat).sum(axis=reduce_to_channel)
    grad_beta = g.sum(axis=reduce_to_channel)
    return gx, grad_gamma, grad_beta


def enumerate_valid_configs(epsilon=1e-5, momentum=0.1):
    """All six valid (scheme, averaging, statistic) combinations.

    Ordered non-adaptive first, then adaptive instance, then adaptive batch,
    with MEAN_STD before MEAN_SQUARE inside each pair.
    """
    combos = [
        (Scheme.NON_ADAPTIVE, Averaging.BATCH, Statistic.MEAN_STD),
        (Scheme.NON_ADAPTIVE, Averaging.BATCH, Statistic.MEAN_SQUARE),
        (Scheme.ADAPTIVE, Averaging.INSTANCE, Statistic.MEAN_STD),
        (Scheme.ADAPTIVE, Averaging.INSTANCE, Statistic.MEAN_SQUARE),
        (Scheme.ADAPTIVE, Averaging.BATCH, Statistic.MEAN_STD),
        (Scheme.ADAPTIVE, Averaging.BATCH, Statistic.MEAN_SQUARE),
    ]
    return [
        NormSpec(scheme=s, averaging=a, statistic=st, epsilon=epsilon, momentum=momentum)
        for s, a, st in combos
    ]


def effective_eval_spec(spec, scheme, averaging=None):
    """Spec actually applied at evaluation time under a scheme override."""
    scheme = Scheme(scheme)
    if scheme is Scheme.NON_ADAPTIVE:
        return replace(spec, scheme=scheme, averaging=Averaging.BATCH)
    return replace(spec, scheme=scheme, averaging=Averaging(averaging or spec.averaging))
