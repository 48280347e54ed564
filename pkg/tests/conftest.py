"""Shared fixtures: one acceptance suite per session, tiny reusable models.

The acceptance criteria share trained models and datasets through a
single ReproSuite instance so the expensive trainings happen once. Each
criterion's outcome line is echoed in the terminal summary, where pytest
does not capture it.
"""

import numpy as np
import pytest

from adanorm.data import (
    generate_synthetic_sensor,
    split_by_extraneous,
    standardize_per_dim,
    window_dataset,
)
from adanorm.models import ModelConfig, SensorArch, build_model
from adanorm.optim import LrSchedule, TrainConfig, train
from adanorm.repro import ReproSuite

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def suite():
    return ReproSuite()


@pytest.fixture(scope="session")
def record_criterion():
    def _record(result):
        ACCEPTANCE_LINES.append(f"{result.criterion} {result.status}: {result.note}")
        return result

    return _record


@pytest.fixture(scope="session")
def tiny_splits():
    """Small 4-subject corpus: train on 0-1, validate on 2, test on 3."""
    rec = generate_synthetic_sensor(
        classes=3,
        subjects=4,
        channels=2,
        steps_per_recording=260,
        recordings_per_subject=3,
        severity=0.6,
        seed=5,
        window=64,
    )
    tr, va, te = split_by_extraneous(rec, (0, 1), (2,), (3,))
    train_w, stats = standardize_per_dim(window_dataset(tr, 64, 32))
    val_w = standardize_per_dim(window_dataset(va, 64, 64), stats)[0]
    test_w = standardize_per_dim(window_dataset(te, 64, 64), stats)[0]
    pooled = standardize_per_dim(window_dataset(rec, 64, 48), stats)[0]
    return dict(recordings=rec, train=train_w, val=val_w, test=test_w,
                pooled=pooled, stats=stats)


def tiny_model_config(seed=1, **kwargs):
    base = dict(
        task="sensor_seq",
        input_channels=2,
        num_classes=3,
        sensor=SensorArch(1, 1, 1, 3, 6, 5),
        seed=seed,
    )
    base.update(kwargs)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_trained(tiny_splits):
    """A briefly trained tiny model shared by diagnostics/probe tests."""
    model = build_model(tiny_model_config())
    tc = TrainConfig(
        epochs=3,
        batch_size=16,
        schedule=LrSchedule(mode="fixed", breakpoints=((0, 1e-3),)),
        early_stop_patience=5,
        eval_scheme="non_adaptive",
        seed=0,
    )
    best, history = train(model, tiny_splits["train"], tiny_splits["val"], tc)
    return best, history
