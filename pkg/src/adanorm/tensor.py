"""Dense float tensors with reverse-mode differentiation on an explicit tape.

Ops are free functions. When any input is attached to a Tape, the op records
a node holding the input ids and a closure that maps the output gradient to
per-input gradients; otherwise it is plain numpy with no bookkeeping. Leaves
are registered with Tape.watch, and backward() walks the tape once in reverse
creation order.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DataError

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class FeatureTensor:
    """N-d float array, optionally linked to a node on one Tape."""

    __slots__ = ("data", "tape", "tape_id")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.tape = None
        self.tape_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def copy(self):
        return FeatureTensor(self.data.copy())

    def __repr__(self):
        tail = f", tape_id={self.tape_id}" if self.tape is not None else ""
        return f"FeatureTensor(shape={self.data.shape}, dtype={self.data.dtype}{tail})"


class _Node:
    __slots__ = ("op", "input_ids", "shape", "dtype", "backward_fn")

    def __init__(self, op, input_ids, shape, dtype, backward_fn):
        self.op = op
        self.input_ids = input_ids
        self.shape = shape
        self.dtype = dtype
        self.backward_fn = backward_fn  # None marks a leaf


class Tape:
    """Append-only record of a computation, used as a context manager.

    Leaving the context detaches every watched leaf, so parameters can be
    reused on a fresh tape each step without stale recording.
    """

    def __init__(self):
        self.nodes = []
        self.gradients = {}
        self._watched = []

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        for t in self._watched:
            t.tape = None
            t.tape_id = None
        self._watched = []
        return False

    def watch(self, tensor):
        """Register a leaf. Returns the tensor for chaining."""
        if tensor.tape is self:
            return tensor
        if tensor.tape is not None:
            raise ValueError("tensor is already attached to another tape")
        node = _Node("leaf", (), tensor.data.shape, tensor.data.dtype, None)
        self.nodes.append(node)
        tensor.tape = self
        tensor.tape_id = len(self.nodes) - 1
        self._watched.append(tensor)
        return tensor

    def emit(self, op, inputs, out, backward_fn):
        """Record one op node; attaches `out` to this tape."""
        ids = tuple(
            t.tape_id if isinstance(t, FeatureTensor) and t.tape is self else None
            for t in inputs
        )
        node = _Node(op, ids, out.data.shape, out.data.dtype, backward_fn)
        self.nodes.append(node)
        out.tape = self
        out.tape_id = len(self.nodes) - 1
        return out

    def gradient(self, tensor):
        """Gradient for a watched tensor after backward()."""
        if tensor.tape is not self or tensor.tape_id is None:
            raise ValueError("tensor is not attached to this tape")
        return self.gradients.get(tensor.tape_id)


def _active_tape(tensors):
    tape = None
    for t in tensors:
        if isinstance(t, FeatureTensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("op inputs are recorded on different tapes")
    return tape


def backward(tape, loss):
    """Reverse sweep from a scalar loss node; fills tape.gradients.

    Accepts the loss FeatureTensor or its tape id. Every node is visited at
    most once; leaves not reached from the loss get zero gradients.
    """
    if isinstance(loss, FeatureTensor):
        if loss.tape is not tape:
            raise ValueError("loss tensor is not attached to this tape")
        loss_id = loss.tape_id
    else:
        loss_id = int(loss)
        if not 0 <= loss_id < len(tape.nodes):
            raise ValueError("loss id is not on this tape")
    seed_node = tape.nodes[loss_id]
    if seed_node.shape != ():
        raise ValueError("backward seed must be a scalar node")

    grads = {loss_id: np.ones((), dtype=seed_node.dtype)}
    for nid in range(loss_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.backward_fn is None:
            continue
        input_grads = node.backward_fn(g)
        for iid, ig in zip(node.input_ids, input_grads):
            if iid is None or ig is None:
                continue
            acc = grads.get(iid)
            grads[iid] = ig if acc is None else acc + ig
    for nid, node in enumerate(tape.nodes):
        if node.backward_fn is None and nid not in grads:
            grads[nid] = np.zeros(node.shape, dtype=node.dtype)
    tape.gradients = grads
    return grads


def _as_array(x):
    return x.data if isinstance(x, FeatureTensor) else np.asarray(x)


def _spatial_tuple(value, rank, name):
    if isinstance(value, (tuple, list)):
        vals = tuple(int(v) for v in value)
    else:
        vals = (int(value),) * rank
    if len(vals) != rank:
        raise ConfigError(f"{name} must have one entry per spatial axis")
    return vals


def _conv_columns(xp, kshape, strides):
    """im2col: padded input -> (B * prod(S_out), Cin * prod(K)) matrix."""
    if len(kshape) == 1:
        win = np.lib.stride_tricks.sliding_window_view(xp, kshape[0], axis=2)
        win = win[:, :, :: strides[0], :]  # (B, Cin, S, K)
        b, cin, s, k = win.shape
        mat = win.transpose(0, 2, 1, 3).reshape(b * s, cin * k)
        return mat, (s,)
    win = np.lib.stride_tricks.sliding_window_view(xp, kshape, axis=(2, 3))
    win = win[:, :, :: strides[0], :: strides[1]]  # (B, Cin, Ho, Wo, Kh, Kw)
    b, cin, ho, wo, kh, kw = win.shape
    mat = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, cin * kh * kw)
    return mat, (ho, wo)


def convolve(x, kernel, bias, stride=1, padding=0):
    """Cross-correlation over 1 or 2 spatial axes.

    x: (B, Cin, *S); kernel: (Cout, Cin, *K); bias: (Cout,).
    Output spatial size per axis is (S + 2*pad - K) // stride + 1.
    """
    xd, kd, bd = _as_array(x), _as_array(kernel), _as_array(bias)
    srank = xd.ndim - 2
    if srank not in (1, 2):
        raise ConfigError(f"convolve input must have 1 or 2 spatial axes, got rank {xd.ndim}")
    if kd.ndim != srank + 2:
        raise ConfigError("kernel rank does not match input rank")
    if kd.shape[1] != xd.shape[1]:
        raise ConfigError(
            f"kernel expects {kd.shape[1]} input channels, input has {xd.shape[1]}"
        )
    cout = kd.shape[0]
    if bd.shape != (cout,):
        raise ConfigError("bias must have one entry per output channel")
    strides = _spatial_tuple(stride, srank, "stride")
    pads = _spatial_tuple(padding, srank, "padding")
    if any(s < 1 for s in strides) or any(p < 0 for p in pads):
        raise ConfigError("stride must be >= 1 and padding >= 0")
    out_spatial = tuple(
        (xd.shape[2 + i] + 2 * pads[i] - kd.shape[2 + i]) // strides[i] + 1
        for i in range(srank)
    )
    if any(s < 1 for s in out_spatial):
        raise ConfigError(
            f"output spatial size {out_spatial} collapsed below 1 "
            f"(input {xd.shape[2:]}, kernel {kd.shape[2:]})"
        )

    pad_width = [(0, 0), (0, 0)] + [(p, p) for p in pads]
    xp = np.pad(xd, pad_width) if any(pads) else xd
    mat, sp = _conv_columns(xp, kd.shape[2:], strides)
    w2 = kd.reshape(cout, -1)
    y2 = mat @ w2.T + bd
    b = xd.shape[0]
    y = y2.reshape((b,) + sp + (cout,))
    y = np.moveaxis(y, -1, 1)

    tape = _active_tape((x, kernel, bias))
    out = FeatureTensor(y)
    if tape is None:
        return out

    xp_shape = xp.shape

    def backward_fn(g):
        g2 = np.moveaxis(g, 1, -1).reshape(-1, cout)
        grad_b = g2.sum(axis=0)
        grad_w = (g2.T @ mat).reshape(kd.shape)
        gmat = g2 @ w2
        gxp = np.zeros(xp_shape, dtype=g.dtype)
        if srank == 1:
            (s,) = sp
            k = kd.shape[2]
            gcols = gmat.reshape(b, s, kd.shape[1], k)
            for j in range(k):
                gxp[:, :, j : j + strides[0] * s : strides[0]] += gcols[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, pads[0] : xp_shape[2] - pads[0]] if pads[0] else gxp
        else:
            ho, wo = sp
            kh, kw = kd.shape[2], kd.shape[3]
            gcols = gmat.reshape(b, ho, wo, kd.shape[1], kh, kw)
            for jh in range(kh):
                for jw in range(kw):
                    gxp[
                        :,
                        :,
                        jh : jh + strides[0] * ho : strides[0],
                        jw : jw + strides[1] * wo : strides[1],
                    ] += gcols[:, :, :, :, jh, jw].transpose(0, 3, 1, 2)
            gx = gxp[
                :,
                :,
                pads[0] : xp_shape[2] - pads[0] if pads[0] else xp_shape[2],
                pads[1] : xp_shape[3] - pads[1] if pads[1] else xp_shape[3],
            ]
        return gx, grad_w, grad_b

    return tape.emit("convolve", (x, kernel, bias), out, backward_fn)


def linear(x, weight, bias):
    """Affine map on feature vectors: (B, D) x (Dout, D) + (Dout,)."""
    xd, wd, bd = _as_array(x), _as_array(weight), _as_array(bias)
    if xd.ndim != 2:
        raise ConfigError("linear expects a rank-2 input (batch, features)")
    if wd.ndim != 2 or wd.shape[1] != xd.shape[1]:
        raise ConfigError(
            f"weight shape {wd.shape} does not accept {xd.shape[1]} input features"
        )
    if bd.shape != (wd.shape[0],):
        raise ConfigError("bias must have one entry per output feature")
    y = xd @ wd.T + bd
    tape = _active_tape((x, weight, bias))
    out = FeatureTensor(y)
    if tape is None:
        return out

    def backward_fn(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return tape.emit("linear", (x, weight, bias), out, backward_fn)


def relu(x):
    """Elementwise max(x, 0); the subgradient at 0 is taken as 0."""
    xd = _as_array(x)
    y = np.maximum(xd, 0)
    tape = _active_tape((x,))
    out = FeatureTensor(y)
    if tape is None:
        return out
    mask = xd > 0

    def backward_fn(g):
        return (g * mask,)

    return tape.emit("relu", (x,), out, backward_fn)


def global_avg_pool(x):
    """Mean over all spatial axes: (B, C, *S) -> (B, C)."""
    xd = _as_array(x)
    if xd.ndim < 3:
        raise ConfigError("global_avg_pool needs at least one spatial axis")
    axes = tuple(range(2, xd.ndim))
    size = 1
    for a in axes:
        size *= xd.shape[a]
    if size < 1:
        raise ConfigError("global_avg_pool over an empty spatial extent")
    y = xd.mean(axis=axes)
    tape = _active_tape((x,))
    out = FeatureTensor(y)
    if tape is None:
        return out
    xshape = xd.shape

    def backward_fn(g):
        expand = g.reshape(g.shape + (1,) * len(axes))
        return (np.broadcast_to(expand / size, xshape).astype(g.dtype, copy=False),)

    return tape.emit("global_avg_pool", (x,), out, backward_fn)


def avg_pool2d(x, factor=2):
    """Non-overlapping mean pooling on (B, C, H, W); trailing rows/cols drop."""
    xd = _as_array(x)
    if xd.ndim != 4:
        raise ConfigError("avg_pool2d expects (batch, channels, height, width)")
    f = int(factor)
    if f < 1:
        raise ConfigError("pool factor must be >= 1")
    b, c, h, w = xd.shape
    ho, wo = h // f, w // f
    if ho < 1 or wo < 1:
        raise ConfigError(f"spatial size {h}x{w} collapses below 1 under pool factor {f}")
    xc = xd[:, :, : ho * f, : wo * f]
    y = xc.reshape(b, c, ho, f, wo, f).mean(axis=(3, 5))
    tape = _active_tape((x,))
    out = FeatureTensor(y)
    if tape is None:
        return out

    def backward_fn(g):
        gx = np.zeros_like(xd)
        spread = np.repeat(np.repeat(g, f, axis=2), f, axis=3) / (f * f)
        gx[:, :, : ho * f, : wo * f] = spread
        return (gx,)

    return tape.emit("avg_pool2d", (x,), out, backward_fn)


def concat(tensors, axis=1):
    """Concatenate along one axis; gradient splits back by input sizes."""
    if not tensors:
        raise ValueError("concat needs at least one input")
    datas = [_as_array(t) for t in tensors]
    y = np.concatenate(datas, axis=axis)
    tape = _active_tape(tensors)
    out = FeatureTensor(y)
    if tape is None:
        return out
    sizes = [d.shape[axis] for d in datas]
    bounds = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(sizes))
        )

    return tape.emit("concat", tuple(tensors), out, backward_fn)


def slice_axis(x, axis, start, stop):
    """View x[..., start:stop, ...] along `axis` as a differentiable op."""
    xd = _as_array(x)
    n = xd.shape[axis]
    if not (0 <= start < stop <= n):
        raise ValueError(f"slice [{start}:{stop}] out of bounds for axis size {n}")
    index = [slice(None)] * xd.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    y = xd[index]
    tape = _active_tape((x,))
    out = FeatureTensor(y.copy())
    if tape is None:
        return out

    def backward_fn(g):
        gx = np.zeros_like(xd)
        gx[index] = g
        return (gx,)

    return tape.emit("slice_axis", (x,), out, backward_fn)


def multiply(a, b):
    """Elementwise product of two same-shape tensors."""
    ad, bd = _as_array(a), _as_array(b)
    if ad.shape != bd.shape:
        raise ConfigError("multiply expects matching shapes")
    y = ad * bd
    tape = _active_tape((a, b))
    out = FeatureTensor(y)
    if tape is None:
        return out

    def backward_fn(g):
        return g * bd, g * ad

    return tape.emit("multiply", (a, b), out, backward_fn)


def reduce_sum(x):
    """Sum of all elements, as a scalar tensor."""
    xd = _as_array(x)
    y = xd.sum()
    tape = _active_tape((x,))
    out = FeatureTensor(np.asarray(y, dtype=xd.dtype))
    if tape is None:
        return out
    xshape, xdtype = xd.shape, xd.dtype

    def backward_fn(g):
        return (np.full(xshape, g, dtype=xdtype),)

    return tape.emit("reduce_sum", (x,), out, backward_fn)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmaxed logits against integer labels.

    logits: (B, K) with labels (B,), or (B, K, T) with labels (B, T); the
    mean runs over batch and, when present, timesteps. Stabilized by max
    subtraction.
    """
    zd = _as_array(logits)
    lab = np.asarray(labels)
    if zd.ndim == 2:
        if lab.shape != (zd.shape[0],):
            raise ConfigError(f"labels shape {lab.shape} does not match logits {zd.shape}")
        flat = zd
        flat_lab = lab.reshape(-1)
    elif zd.ndim == 3:
        if lab.shape != (zd.shape[0], zd.shape[2]):
            raise ConfigError(f"labels shape {lab.shape} does not match logits {zd.shape}")
        flat = np.moveaxis(zd, 1, 2).reshape(-1, zd.shape[1])
        flat_lab = lab.reshape(-1)
    else:
        raise ConfigError("logits must be (batch, classes) or (batch, classes, time)")
    k = flat.shape[1]
    if k < 2:
        raise ConfigError("need at least two classes")
    if not np.issubdtype(lab.dtype, np.integer):
        raise DataError("labels must be integers")
    if flat_lab.size and (flat_lab.min() < 0 or flat_lab.max() >= k):
        raise DataError(f"label outside [0, {k})")

    shifted = flat - flat.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    denom = expz.sum(axis=1, keepdims=True)
    logp = shifted - np.log(denom)
    n = flat.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, flat_lab].mean()

    tape = _active_tape((logits,))
    out = FeatureTensor(np.asarray(loss, dtype=zd.dtype))
    if tape is None:
        return out

    def backward_fn(g):
        p = expz / denom
        p[rows, flat_lab] -= 1.0
        p *= g / n
        if zd.ndim == 2:
            return (p.astype(zd.dtype, copy=False),)
        gz = p.reshape(zd.shape[0], zd.shape[2], zd.shape[1])
        return (np.moveaxis(gz, 2, 1).astype(zd.dtype, copy=False),)

    return tape.emit("softmax_cross_entropy", (logits,), out, backward_fn)


def moment_stats(x, axes):
    """Mean, population variance, and mean square over `axes`.

    Returns plain (untaped) tensors; the identity mean_square = var + mean**2
    holds up to rounding.
    """
    xd = _as_array(x)
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    else:
        axes = tuple(int(a) for a in axes)
    if len(set(axes)) != len(axes):
        raise ValueError("duplicate reduction axes")
    n = 1
    for a in axes:
        if not 0 <= a < xd.ndim:
            raise ValueError(f"axis {a} out of range for rank {xd.ndim}")
        n *= xd.shape[a]
    if n < 1:
        raise DataError("empty reduction")
    mean = xd.mean(axis=axes)
    var = xd.var(axis=axes)
    mean_sq = np.mean(xd * xd, axis=axes)
    return FeatureTensor(mean), FeatureTensor(var), FeatureTensor(mean_sq)


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient estimate of scalar f at x, coordinatewise."""
    if h <= 0:
        raise ValueError("step size must be positive")
    xd = _as_array(x)
    grad = np.zeros_like(xd)
    flat = xd.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(_as_array(f(FeatureTensor(xd.copy()))))
        flat[i] = orig - h
        fm = float(_as_array(f(FeatureTensor(xd.copy()))))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b):
    """Norm-based relative difference used by the gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
