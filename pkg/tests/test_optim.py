"""Adam updates, schedules, early stopping, evaluation, and the train loop."""

import io
import math

import numpy as np
import pytest

from adanorm.data import KIND_SEQUENCE, TaggedDataset
from adanorm.errors import ConfigError, TrainingError
from adanorm.models import build_model, checkpoint_write
from adanorm.optim import (
    AdamState,
    EpochRecord,
    LrSchedule,
    TrainConfig,
    adam_step,
    early_stop_check,
    evaluate,
    schedule_lr,
    train,
)
from adanorm.rng import make_rng
from adanorm.tensor import FeatureTensor

from conftest import tiny_model_config


# --------------------------------------------------------------------- adam


def scalar_adam_reference(grads, lr):
    """Straight-line transcription of the update rule for one scalar."""
    m = v = 0.0
    p = 0.0
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat = m / (1.0 - 0.9**t)
        v_hat = v / (1.0 - 0.999**t)
        p -= lr * m_hat / (math.sqrt(v_hat) + 1e-8)
    return p


def run_adam(grad_seq, lr):
    p = FeatureTensor(np.zeros(1, dtype=np.float64))
    params = [("p", p)]
    state = AdamState.for_params(params)
    for g in grad_seq:
        adam_step(params, {"p": np.asarray([g], dtype=np.float64)}, state, lr)
    return float(p.data[0]), state


def test_adam_matches_scalar_reference():
    rng = make_rng(31, 1)
    for _ in range(5):
        grads = rng.standard_normal(40)
        lr = float(10 ** rng.uniform(-4, -1))
        got, state = run_adam(grads, lr)
        want = scalar_adam_reference(grads, lr)
        assert got == pytest.approx(want, abs=1e-12)
        assert state.t == 40
        assert np.all(state.v["p"] >= 0.0)


def test_adam_two_unit_steps_move_two_lr():
    got, _ = run_adam([1.0, 1.0], lr=0.1)
    # bias correction makes each early step very nearly lr in size
    assert got == pytest.approx(-0.2, abs=1e-6)


def test_adam_first_step_magnitude_is_lr():
    for g in (-3.0, 0.2, 40.0):
        got, _ = run_adam([g], lr=0.05)
        assert got == pytest.approx(-np.sign(g) * 0.05, rel=1e-5)


def test_adam_zero_gradients_leave_parameters_alone():
    got, state = run_adam([0.0] * 10, lr=0.1)
    assert got == 0.0
    assert state.t == 10


def test_adam_rejects_non_finite_gradient():
    p = FeatureTensor(np.zeros(2))
    params = [("block.w", p)]
    state = AdamState.for_params(params)
    with pytest.raises(TrainingError, match="block.w"):
        adam_step(params, {"block.w": np.asarray([1.0, np.nan])}, state, 0.1)


# ---------------------------------------------------------------- schedules


def test_fixed_schedule_breakpoints():
    cfg = TrainConfig(schedule=LrSchedule(mode="fixed",
                                          breakpoints=((0, 5e-4), (35, 5e-5))))
    assert schedule_lr(cfg, 0, []) == 5e-4
    assert schedule_lr(cfg, 34, []) == 5e-4
    assert schedule_lr(cfg, 35, []) == 5e-5
    assert schedule_lr(cfg, 100, []) == 5e-5


def test_schedule_validation():
    with pytest.raises(ConfigError, match="mode"):
        LrSchedule(mode="cosine")
    with pytest.raises(ConfigError, match="epoch 0"):
        LrSchedule(mode="fixed", breakpoints=((5, 1e-3),))
    with pytest.raises(ConfigError, match="increasing"):
        LrSchedule(mode="fixed", breakpoints=((0, 1e-3), (10, 1e-4), (10, 1e-5)))
    with pytest.raises(ConfigError, match="plateau"):
        LrSchedule(mode="plateau", factor=1.5)
    with pytest.raises(ConfigError, match="plateau"):
        LrSchedule(mode="plateau", patience=0)


def plateau_config(patience=2):
    return TrainConfig(
        schedule=LrSchedule(mode="plateau", base_lr=1e-3, factor=0.1,
                            patience=patience)
    )


def test_plateau_keeps_lr_while_improving():
    cfg = plateau_config()
    assert schedule_lr(cfg, 5, [0.1, 0.2, 0.3, 0.4]) == 1e-3


def test_plateau_decays_once_per_stall():
    cfg = plateau_config(patience=3)
    # one stall of exactly patience length -> one decay
    assert schedule_lr(cfg, 4, [0.5, 0.5, 0.5, 0.5]) == pytest.approx(1e-4)
    # five flat epochs with patience 2 -> two decays
    cfg = plateau_config(patience=2)
    assert schedule_lr(cfg, 5, [0.5] * 5) == pytest.approx(1e-5)


def test_plateau_ignores_sub_threshold_improvement():
    cfg = plateau_config(patience=2)
    history = [0.5, 0.5 + 5e-5, 0.5 + 9e-5]  # gains below the 1e-4 threshold
    assert schedule_lr(cfg, 3, history) == pytest.approx(1e-4)


# -------------------------------------------------------------- early stop


def test_early_stop_traces():
    assert early_stop_check([0.1, 0.2, 0.3], 3) == (False, 2)
    assert early_stop_check([0.5, 0.5, 0.5, 0.5], 3) == (True, 0)
    assert early_stop_check([0.5, 0.6, 0.6, 0.6, 0.6], 3) == (True, 1)
    assert early_stop_check([], 3) == (False, -1)
    with pytest.raises(ConfigError):
        early_stop_check([0.5], 0)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(eval_scheme="frozen")


# --------------------------------------------------------------- evaluation


class StubModel:
    """Predicts the class encoded in the input; records batch contents."""

    def __init__(self, classes, timesteps=None):
        self.classes = classes
        self.timesteps = timesteps
        self.batches = []

    def forward(self, x, mode, averaging=None):
        x = np.asarray(x.data if hasattr(x, "data") else x)
        self.batches.append(x[:, 0].copy())
        codes = x[:, 0].astype(int)
        logits = np.eye(self.classes)[codes]  # (B, K)
        if self.timesteps is not None:
            logits = np.repeat(logits[:, :, None], self.timesteps, axis=2)
        return FeatureTensor(logits)


def coded_dataset(labels, groups, classes=3):
    labels = np.asarray(labels)
    tensors = labels.astype(np.float64)[:, None]  # value encodes the label
    return TaggedDataset(tensors, labels, np.asarray(groups), classes,
                         max(groups) + 1, KIND_SEQUENCE)


def test_evaluate_scores_perfect_stub():
    ds = coded_dataset([0, 1, 2, 1], [0, 0, 1, 1])
    model = StubModel(classes=3)
    assert evaluate(model, ds, "adaptive_batch") == 1.0


def test_evaluate_batches_never_straddle_groups():
    # sample i carries code i, so batch contents identify their group
    ds = coded_dataset(list(range(8)), [0] * 3 + [1] * 5, classes=8)
    model = StubModel(classes=8)
    evaluate(model, ds, "adaptive_batch", batch_size=4)
    seen = [sorted(int(v) for v in b) for b in model.batches]
    # group 0 fills one short batch; group 1 splits 4+1, never mixing groups
    assert seen == [[0, 1, 2], [3, 4, 5, 6], [7]]


def test_evaluate_scores_each_timestep():
    # stub repeats one prediction across 4 timesteps; labels agree on half
    labels = np.asarray([[0, 0, 1, 1], [2, 2, 2, 2]])
    tensors = np.asarray([[0.0], [2.0]])
    ds = TaggedDataset(tensors, labels, np.zeros(2, dtype=int), 3, 1, KIND_SEQUENCE)
    model = StubModel(classes=3, timesteps=4)
    assert evaluate(model, ds, "non_adaptive") == pytest.approx(0.75)


def test_evaluate_rejects_empty_dataset():
    ds = TaggedDataset(np.zeros((0, 1)), np.zeros((0,)), np.zeros(0), 2, 1,
                       KIND_SEQUENCE)
    with pytest.raises(TrainingError, match="empty"):
        evaluate(StubModel(2), ds, "non_adaptive")


def test_evaluate_rejects_unknown_scheme():
    ds = coded_dataset([0, 1], [0, 0])
    with pytest.raises(ConfigError, match="scheme"):
        evaluate(StubModel(3), ds, "running")


# -------------------------------------------------------------- train loop


def two_class_windows(n_per_class=48, window=64, seed=2):
    """Separable by waveform frequency, one class per window.

    Channels hold a quadrature pair so every timestep carries class
    evidence, and rows interleave the classes so contiguous eval batches
    are class-mixed (adaptive statistics on a class-pure batch would
    normalize the class difference away, which is a property test of its
    own, not a convergence smoke).
    """
    rng = make_rng(seed, 9)
    t = np.arange(window) / window
    xs, ys = [], []
    for cls, cycles in enumerate((2.0, 16.0)):
        base = np.stack([np.sin(2 * np.pi * cycles * t),
                         np.cos(2 * np.pi * cycles * t)])
        for _ in range(n_per_class):
            wave = base + 0.05 * rng.standard_normal((2, window))
            xs.append(wave)
            ys.append(np.full(window, cls))
    xs = np.asarray(xs, dtype=np.float32)
    ys = np.asarray(ys)
    order = np.argsort(np.tile(np.arange(n_per_class), 2), kind="stable")
    groups = np.zeros(len(xs), dtype=int)
    return TaggedDataset(xs[order], ys[order], groups, 2, 1, KIND_SEQUENCE)


def quick_config(**kwargs):
    base = dict(
        epochs=12,
        batch_size=16,
        schedule=LrSchedule(mode="fixed", breakpoints=((0, 5e-3),)),
        early_stop_patience=30,
        eval_scheme="adaptive_batch",
        seed=0,
    )
    base.update(kwargs)
    return TrainConfig(**base)


def separable_model(seed=1):
    return build_model(tiny_model_config(seed=seed, input_channels=2,
                                         num_classes=2))


def test_train_fits_separable_toy_set():
    ds = two_class_windows()
    best, history = train(separable_model(), ds, ds, quick_config())
    # 72 optimizer steps; reaches a clean plateau two epochs before the end
    assert history[-1].val_acc >= 0.999
    assert evaluate(best, ds, "adaptive_batch") >= 0.999
    assert history[-1].val_acc > history[0].val_acc


def test_train_zero_lr_changes_nothing():
    ds = two_class_windows(n_per_class=12)
    model = separable_model()
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    cfg = quick_config(epochs=3,
                       schedule=LrSchedule(mode="fixed", breakpoints=((0, 0.0),)))
    best, history = train(model, ds, ds, cfg)
    for name, p in model.named_parameters():
        assert np.array_equal(p.data, before[name]), name
    accs = {h.val_acc for h in history}
    assert len(accs) == 1


def test_train_is_seed_reproducible():
    ds = two_class_windows(n_per_class=16)
    runs = []
    for _ in range(2):
        best, history = train(separable_model(seed=3), ds, ds,
                              quick_config(epochs=2))
        buf = io.BytesIO()
        checkpoint_write(best, buf)
        curve = [(h.epoch, h.lr, h.train_loss, h.val_acc) for h in history]
        runs.append((buf.getvalue(), curve))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]


def test_train_history_and_best_model_agree(tiny_trained, tiny_splits):
    best, history = tiny_trained
    assert [h.epoch for h in history] == list(range(len(history)))
    best_acc = max(h.val_acc for h in history)
    replayed = evaluate(best, tiny_splits["val"], "non_adaptive")
    assert replayed == pytest.approx(best_acc, abs=1e-12)


def test_train_early_stops_on_flat_validation():
    ds = two_class_windows(n_per_class=12)
    cfg = quick_config(
        epochs=10,
        early_stop_patience=1,
        schedule=LrSchedule(mode="fixed", breakpoints=((0, 0.0),)),
    )
    _, history = train(separable_model(), ds, ds, cfg)
    # constant accuracy: epoch 0 sets the best, epoch 1 exhausts patience
    assert len(history) == 2


def test_train_aborts_on_non_finite_loss():
    ds = two_class_windows(n_per_class=12)
    ds.tensors[0, 0, 0] = np.nan
    with pytest.raises(TrainingError, match="non-finite loss") as exc:
        train(separable_model(), ds, ds, quick_config())
    assert exc.value.best_model is None
    assert exc.value.history == []


def test_epoch_record_fields():
    rec = EpochRecord(0, 1e-3, 0.5, 0.9, 12.0)
    assert (rec.epoch, rec.lr, rec.train_loss, rec.val_acc) == (0, 1e-3, 0.5, 0.9)
