"""Config-driven dataset and training pipelines shared by the CLI."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import subprocess

import numpy as np

from . import __version__
from .data import (
    corrupt_dataset,
    generate_synthetic_sensor,
    load_idx,
    split_by_extraneous,
    standardize_per_dim,
    window_dataset,
)
from .errors import ConfigError


def synthetic_recordings(cfg):
    d = cfg.dataset
    return generate_synthetic_sensor(
        classes=d["classes"],
        subjects=d["subjects"],
        channels=d["channels"],
        steps_per_recording=d["steps_per_recording"],
        recordings_per_subject=d["recordings_per_subject"],
        severity=d["severity"],
        seed=cfg.seed,
        window=d["window"],
        noise_level=d["noise_level"],
    )


def synthetic_splits(cfg):
    """Recordings -> per-split window datasets, standardized by train stats."""
    d = cfg.dataset
    recs = synthetic_recordings(cfg)
    train_r, val_r, test_r = split_by_extraneous(recs, d["train_ids"], d["val_ids"], d["test_ids"])
    train = window_dataset(train_r, d["window"], d["train_stride"])
    val = window_dataset(val_r, d["window"], d["eval_stride"])
    test = window_dataset(test_r, d["window"], d["eval_stride"])
    train, stats = standardize_per_dim(train)
    val, _ = standardize_per_dim(val, stats)
    test, _ = standardize_per_dim(test, stats)
    return train, val, test, stats


def idx_splits(cfg):
    """IDX train/test pair; optional corruption copies of the test set."""
    d = cfg.dataset
    full = load_idx(d["train_images"], d["train_labels"])
    test = load_idx(d["test_images"], d["test_labels"])
    if d["train_limit"]:
        full = full.subset(np.arange(min(d["train_limit"], len(full))))
    if d["test_limit"]:
        test = test.subset(np.arange(min(d["test_limit"], len(test))))
    # deterministic tail of the training set becomes validation
    n_val = max(1, len(full) // 10)
    train = full.subset(np.arange(0, len(full) - n_val))
    val = full.subset(np.arange(len(full) - n_val, len(full)))
    corrupted = None
    if d["corruptions"]:
        corrupted = corrupt_dataset(test, d["corruptions"], seed=d["corruption_seed"])
    return train, val, test, corrupted


def load_splits(cfg):
    if cfg.dataset["source"] == "synthetic":
        train, val, test, _ = synthetic_splits(cfg)
        return train, val, test, None
    return idx_splits(cfg)


def _git_describe(cwd):
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, cwd=cwd, timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.TimeoutExpired):
        pass
    return "unknown"


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, config_text, seed, inputs=(), outputs=(), extra=None):
    """Reproducibility record written next to every command's outputs."""
    manifest = {
        "command": command,
        "tool_version": __version__,
        "git_describe": _git_describe(os.getcwd()),
        "seed": seed,
        "config": config_text,
        "input_digests": {str(p): file_digest(p) for p in inputs if os.path.exists(str(p))},
        "outputs": [str(p) for p in outputs],
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "val_acc", "wall_ms"])
        for rec in history:
            w.writerow([rec.epoch, repr(rec.lr), repr(rec.train_loss),
                        repr(rec.val_acc), repr(rec.wall_ms)])
    return path


def write_dataset_manifest(dataset, path):
    """Per-sample CSV: index, class, extraneous id, split tag if present."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "class", "extraneous_id", "split"])
        split = dataset.provenance.get("split_tags")
        for i in range(len(dataset)):
            label = dataset.labels[i]
            if label.ndim:  # per-timestep labels: report the majority class
                label = np.bincount(label).argmax()
            w.writerow([i, int(label), int(dataset.extraneous[i]),
                        split[i] if split else ""])
    return path


def eval_rows(model, test_set, schemes, evaluate_fn, batch_size):
    """One (scheme, averaging, statistic, accuracy) row per requested scheme."""
    rows = []
    stat = model.config.norm.statistic.value
    for scheme in schemes:
        if scheme == "non_adaptive":
            updates = [l.state.updates_seen for _, l in model.norm_layers()]
            if updates and min(updates) < 1:
                raise ConfigError(
                    "checkpoint was trained with instance averaging and "
                    "cannot be evaluated non-adaptively"
                )
            scheme_name, averaging = "non_adaptive", "batch"
        elif scheme == "adaptive_batch":
            scheme_name, averaging = "adaptive", "batch"
        else:
            scheme_name, averaging = "adaptive", "instance"
        acc = evaluate_fn(model, test_set, scheme, batch_size)
        rows.append((scheme_name, averaging, stat, acc))
    return rows


def write_eval_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "averaging", "statistic", "accuracy"])
        for scheme, averaging, stat, acc in rows:
            w.writerow([scheme, averaging, stat, repr(float(acc))])
    return path
