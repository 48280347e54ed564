"""Spot-check analytic gradients against central finite differences.

    python demos/02_gradient_check.py

The test suite runs hundreds of randomized shapes; this demo walks three
representative cases slowly enough to read: a convolution, a
normalization layer, and a full tiny model end to end.
"""

import numpy as np

from adanorm.models import Mode, ModelConfig, SensorArch, build_model
from adanorm.normalization import NormSpec, NormState, norm_forward_train
from adanorm.tensor import (
    FeatureTensor,
    Tape,
    backward,
    convolve,
    finite_diff_grad,
    multiply,
    reduce_sum,
    relative_error,
    softmax_cross_entropy,
)

rng = np.random.default_rng(11)
H = 1e-5


def report(name, analytic, numeric):
    err = relative_error(analytic, numeric)
    print(f"  {name:<12s} rel err {err:.3e}")
    return err


print("1d convolution, stride 2, same padding:")
x = rng.standard_normal((2, 3, 9))
w = rng.standard_normal((4, 3, 3)) * 0.5
b = rng.standard_normal(4) * 0.1
proj = rng.standard_normal((2, 4, 5))  # random linear functional -> scalar loss


def conv_loss(xt, wt, bt):
    return reduce_sum(multiply(convolve(xt, wt, bt, stride=2, padding=1),
                               FeatureTensor(proj)))


# tape ids are only live inside the tape context, so pull gradients there
with Tape() as tape:
    xt = tape.watch(FeatureTensor(x.copy()))
    wt = tape.watch(FeatureTensor(w.copy()))
    bt = tape.watch(FeatureTensor(b.copy()))
    grads = backward(tape, conv_loss(xt, wt, bt))
    got = {"input": grads[xt.tape_id], "weight": grads[wt.tape_id],
           "bias": grads[bt.tape_id]}

partials = (
    ("input", x, lambda v: conv_loss(v, FeatureTensor(w), FeatureTensor(b))),
    ("weight", w, lambda v: conv_loss(FeatureTensor(x), v, FeatureTensor(b))),
    ("bias", b, lambda v: conv_loss(FeatureTensor(x), FeatureTensor(w), v)),
)
for name, arr, partial in partials:
    fd = finite_diff_grad(partial, FeatureTensor(arr.copy()), H)
    report(name, got[name], fd)

print()
print("adaptive instance normalization (statistics depend on the input,")
print("so the chain rule runs through the moments too):")
spec = NormSpec("adaptive", "instance", "mean_std")
x = rng.standard_normal((3, 2, 12))
proj = rng.standard_normal(x.shape)


def norm_loss(xt):
    state = NormState(2, spec.statistic, dtype=np.float64)
    y, _ = norm_forward_train(xt, spec, state)
    return reduce_sum(multiply(y, FeatureTensor(proj)))


with Tape() as tape:
    xt = tape.watch(FeatureTensor(x.copy()))
    grads = backward(tape, norm_loss(xt))
    got_input = grads[xt.tape_id]
fd = finite_diff_grad(norm_loss, FeatureTensor(x.copy()), H)
report("input", got_input, fd)

def floored_error(a, b, floor=1e-6):
    # conv biases that feed a mean-subtracting norm layer get an exactly
    # zero gradient; both sides then sit at the fd noise floor and a raw
    # relative error would read 100%. Floor the denominator instead.
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


print()
print("full tiny sensor model, every parameter:")
cfg = ModelConfig(
    task="sensor_seq",
    input_channels=2,
    num_classes=3,
    sensor=SensorArch(1, 1, 1, 3, 4, 3),
    seed=7,
    dtype="float64",
)
model = build_model(cfg)
x = rng.standard_normal((2, 2, 10))
labels = rng.integers(0, 3, size=(2, 10))

params = model.named_parameters()
with Tape() as tape:
    xt = tape.watch(FeatureTensor(x.copy()))
    for _, p in params:
        tape.watch(p)
    loss = softmax_cross_entropy(model.forward(xt, Mode.TRAIN), labels)
    grads = backward(tape, loss)
    analytic = {name: grads[p.tape_id] for name, p in params}

worst = 0.0
for name, p in params:
    def at(v, p=p):
        keep = p.data
        p.data = v.data
        try:
            out = model.forward(FeatureTensor(x.copy()), Mode.TRAIN)
            return softmax_cross_entropy(out, labels)
        finally:
            p.data = keep

    fd = finite_diff_grad(at, FeatureTensor(p.data.copy()), H)
    err = floored_error(analytic[name], fd)
    print(f"  {name:<36s} rel err {err:.3e}")
    worst = max(worst, err)

print(f"\nworst parameter rel err: {worst:.3e}")
print("(biases of convs that feed a norm layer have exactly zero gradient;")
print(" the error there is measured against a floored denominator)")
