"""Adam, learning-rate schedules, early stopping, and the training loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, TrainingError
from .models import Mode
from .normalization import Averaging
from .rng import STREAM_SHUFFLE, make_rng

# Validation-accuracy improvements below this threshold count as no
# improvement, for both early stopping and plateau decay.
IMPROVEMENT_DELTA = 1e-4

EVAL_SCHEMES = ("non_adaptive", "adaptive_batch", "adaptive_instance")


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kwargs):
        state = cls(**kwargs)
        for name, p in params:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, in place on the parameter tensors.

    params: iterable of (name, FeatureTensor); grads: name -> ndarray.
    Non-finite gradients abort with the offending parameter named.
    """
    state.t += 1
    b1c = 1.0 - state.beta1**state.t
    b2c = 1.0 - state.beta2**state.t
    for name, p in params:
        g = np.asarray(grads[name], dtype=p.data.dtype)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        step = lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)
        p.data = p.data - step


@dataclass(frozen=True)
class LrSchedule:
    """Either fixed breakpoints (epoch -> lr) or decay-on-plateau."""

    mode: str = "fixed"
    breakpoints: tuple = ((0, 5e-4), (35, 5e-5))
    base_lr: float = 5e-4
    factor: float = 0.1
    patience: int = 5

    def __post_init__(self):
        if self.mode not in ("fixed", "plateau"):
            raise ConfigError(f"unknown schedule mode {self.mode!r}")
        epochs = [e for e, _ in self.breakpoints]
        if self.mode == "fixed":
            if not self.breakpoints or epochs[0] != 0:
                raise ConfigError("fixed schedule needs a breakpoint at epoch 0")
            if sorted(epochs) != epochs or len(set(epochs)) != len(epochs):
                raise ConfigError("breakpoint epochs must be strictly increasing")
        if self.base_lr <= 0 or not 0 < self.factor < 1 or self.patience < 1:
            raise ConfigError("invalid plateau parameters")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    schedule: LrSchedule = field(default_factory=LrSchedule)
    batch_size: int = 32
    early_stop_patience: int = 10
    seed: int = 0
    eval_scheme: str = "non_adaptive"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.early_stop_patience < 1:
            raise ConfigError("epochs, batch size, and patience must be >= 1")
        if self.eval_scheme not in EVAL_SCHEMES:
            raise ConfigError(f"unknown eval scheme {self.eval_scheme!r}")


def schedule_lr(config, epoch, val_history):
    """Learning rate for `epoch`, given validation accuracies so far.

    Fixed mode ignores the history; plateau mode replays it, multiplying the
    rate by `factor` each time `patience` epochs pass without a significant
    improvement.
    """
    sched = config.schedule
    if sched.mode == "fixed":
        lr = sched.breakpoints[0][1]
        for e, value in sched.breakpoints:
            if epoch >= e:
                lr = value
        return lr
    lr = sched.base_lr
    best = -np.inf
    wait = 0
    for acc in val_history:
        if acc > best + IMPROVEMENT_DELTA:
            best = acc
            wait = 0
        else:
            wait += 1
            if wait >= sched.patience:
                lr *= sched.factor
                wait = 0
    return lr


class EarlyStop(NamedTuple):
    stop: bool
    best_epoch: int


def early_stop_check(val_history, patience):
    """Stop once `patience` epochs pass without significant improvement.

    best_epoch is the first epoch reaching the best accuracy seen.
    """
    if patience < 1:
        raise ConfigError("patience must be >= 1")
    if not len(val_history):
        return EarlyStop(False, -1)
    best = -np.inf
    best_epoch = 0
    wait = 0
    stop = False
    for i, acc in enumerate(val_history):
        if acc > best + IMPROVEMENT_DELTA:
            best = acc
            best_epoch = i
            wait = 0
        else:
            wait += 1
            if wait >= patience:
                stop = True
                break
    return EarlyStop(stop, best_epoch)


def _scheme_mode(scheme):
    if scheme == "non_adaptive":
        return Mode.EVAL_NON_ADAPTIVE, None
    if scheme == "adaptive_batch":
        return Mode.EVAL_ADAPTIVE, Averaging.BATCH
    if scheme == "adaptive_instance":
        return Mode.EVAL_ADAPTIVE, Averaging.INSTANCE
    raise ConfigError(f"unknown eval scheme {scheme!r}")


def _batches(n, batch_size, order=None):
    idx = np.arange(n) if order is None else np.asarray(order)
    for start in range(0, n, batch_size):
        yield idx[start : start + batch_size]


def evaluate(model, dataset, scheme, batch_size=64):
    """Accuracy under an evaluation scheme; batches never straddle groups.

    Adaptive statistics are computed per mini-batch, and mini-batches are
    drawn within one extraneous group at a time, so recomputed statistics
    always describe a single nuisance source. Sequence outputs score each
    timestep; flat outputs score each sample.
    """
    mode, averaging = _scheme_mode(scheme)
    correct = 0
    total = 0
    for _, indices in sorted(dataset.group_indices().items()):
        for batch in _batches(len(indices), batch_size, indices):
            logits = model.forward(dataset.tensors[batch], mode, averaging=averaging)
            pred = np.argmax(logits.data, axis=1)
            truth = dataset.labels[batch]
            correct += int((pred == truth).sum())
            total += truth.size
    if total == 0:
        raise TrainingError("evaluation set is empty")
    return correct / total


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_acc: float
    wall_ms: float


def train(model, train_set, val_set, config):
    """Train with Adam; returns (best_model, history).

    Deterministic given the config seed: shuffles draw from per-epoch
    derived streams, so two runs produce identical histories and
    checkpoints (wall_ms excluded). The best model by validation accuracy
    is a snapshot; a non-finite loss aborts with the last good snapshot
    attached to the raised TrainingError.
    """
    params = model.named_parameters()
    adam = AdamState.for_params(params)
    history = []
    val_accs = []
    best_acc = -np.inf
    best_model = None

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = schedule_lr(config, epoch, val_accs)
        order = make_rng(config.seed, STREAM_SHUFFLE, epoch).permutation(len(train_set))
        loss_sum = 0.0
        seen = 0
        for batch in _batches(len(train_set), config.batch_size, order):
            x = T.FeatureTensor(train_set.tensors[batch])
            labels = train_set.labels[batch]
            with T.Tape() as tape:
                for _, p in params:
                    tape.watch(p)
                tape.watch(x)
                logits = model.forward(x, Mode.TRAIN)
                loss = T.softmax_cross_entropy(logits, labels)
                loss_value = float(loss.data)
                if not np.isfinite(loss_value):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}",
                        best_model=best_model,
                        history=history,
                    )
                grads = T.backward(tape, loss)
                gdict = {name: grads[p.tape_id] for name, p in params}
            adam_step(params, gdict, adam, lr)
            loss_sum += loss_value * len(batch)
            seen += len(batch)

        val_acc = evaluate(model, val_set, config.eval_scheme, config.batch_size)
        val_accs.append(val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_model = model.copy()
        wall_ms = (time.perf_counter() - t0) * 1000.0
        history.append(EpochRecord(epoch, lr, loss_sum / max(seen, 1), val_acc, wall_ms))
        if early_stop_check(val_accs, config.early_stop_patience).stop:
            break

    return (best_model if best_model is not None else model.copy()), history
