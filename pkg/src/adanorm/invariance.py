"""Probing whether features still encode the extraneous variable.

A trained network's intermediate features are extracted, then a fresh
decoder is trained to predict the extraneous id from them. High decoding
accuracy means the features still carry the nuisance identity; accuracy near
chance means the representation is invariant to it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .data import KIND_IMAGE, KIND_SEQUENCE, TaggedDataset
from .errors import ConfigError, DataError
from .models import (
    AvgPool,
    Conv,
    GlobalAvgPool,
    Linear,
    Model,
    NormLayer,
    ReLU,
    Sequential,
)
from .normalization import NormSpec
from .optim import LrSchedule, TrainConfig, evaluate, train
from .optim import _scheme_mode  # shared scheme -> (mode, averaging) mapping
from .rng import STREAM_PROBE_INIT, STREAM_PROBE_SPLIT, make_rng

# The probe decoder always normalizes conventionally; only the features
# under study change between runs.
PROBE_NORM = NormSpec(scheme="non_adaptive", averaging="batch", statistic="mean_std")


@dataclass
class FeatureBank:
    """Extracted features plus everything needed to reproduce them."""

    features: np.ndarray
    extraneous: np.ndarray
    extraneous_count: int
    layer_id: str
    eval_scheme: str
    model_digest: str

    def __post_init__(self):
        if self.features.shape[0] != self.extraneous.shape[0]:
            raise DataError("features and extraneous ids must align on axis 0")


def model_digest(model):
    """Stable content hash of a model's parameters and buffers."""
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    for name, b in model.named_buffers():
        h.update(name.encode())
        h.update(np.ascontiguousarray(b).tobytes())
    return h.hexdigest()


def extract_features(model, dataset, layer="penultimate", eval_scheme="non_adaptive",
                     batch_size=64):
    """Capture one layer's output over a dataset under an evaluation scheme.

    Batches stay within one extraneous group, so adaptive schemes estimate
    statistics per nuisance source, mirroring deployment.
    """
    mode, averaging = _scheme_mode(eval_scheme)
    name = model.penultimate if layer == "penultimate" else layer
    model.layer(name)  # existence check
    chunks = []
    ids = []
    caps = {}
    for _, indices in sorted(dataset.group_indices().items()):
        for start in range(0, len(indices), batch_size):
            batch = indices[start : start + batch_size]
            model.forward(dataset.tensors[batch], mode, averaging=averaging,
                          capture_outputs=(name,), captured_out=caps)
            ids.append(dataset.extraneous[batch])
    for block in caps.get(name, []):
        chunks.append(block)
    if not chunks:
        raise DataError(f"layer {name!r} produced no captures")
    return FeatureBank(
        np.concatenate(chunks, axis=0),
        np.concatenate(ids, axis=0),
        dataset.extraneous_count,
        name,
        eval_scheme,
        model_digest(model),
    )


@dataclass(frozen=True)
class DecoderConfig:
    input_shape: tuple
    extraneous_count: int
    scale: str = "small"  # "small" | "full"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.scale not in ("small", "full"):
            raise ConfigError(f"unknown decoder scale {self.scale!r}")
        if self.extraneous_count < 2:
            raise ConfigError("decoding needs at least 2 extraneous values")
        if len(self.input_shape) not in (1, 2, 3):
            raise ConfigError("decoder input must be flat, (C, T), or (C, H, W)")


def _fc_stack(rng, widths, out_dim, dtype, with_norm=True):
    layers = []
    for i in range(1, len(widths)):
        layers.append((f"fc{i - 1}", Linear(widths[i - 1], widths[i], rng, dtype=dtype)))
        if with_norm:
            layers.append((f"fcnorm{i - 1}", NormLayer(PROBE_NORM, widths[i], dtype=dtype)))
        layers.append((f"fcrelu{i - 1}", ReLU()))
    layers.append(("out", Linear(widths[-1], out_dim, rng, dtype=dtype)))
    return layers


def build_decoder(input_shape, extraneous_count, scale="small", seed=0, dtype="float32"):
    """Decoder matched to the feature shape.

    Sequence features (C, T): conv stack, global pooling, FC head
    (full: 4 convs of 64 + 3 FC; small: 2 convs of 32 + 2 FC).
    Spatial features (C, H, W): 2 convs + 3 FC (small: 1 conv + 2 FC).
    Flat features (C,): 5 FC layers (small: 3).
    """
    config = DecoderConfig(tuple(int(d) for d in input_shape), int(extraneous_count), scale, seed, dtype)
    return build_decoder_from_config(config)


def build_decoder_from_config(config):
    rng = make_rng(config.seed, STREAM_PROBE_INIT)
    np_dtype = np.dtype(config.dtype)
    shape = config.input_shape
    big = config.scale == "full"
    layers = []
    if len(shape) == 2:
        c_in = shape[0]
        width = 64 if big else 32
        n_conv = 4 if big else 2
        for i in range(n_conv):
            layers.append((f"conv{i}", Conv(c_in, width, 3, rng, padding=1, dtype=np_dtype, spatial_rank=1)))
            layers.append((f"norm{i}", NormLayer(PROBE_NORM, width, dtype=np_dtype)))
            layers.append((f"relu{i}", ReLU()))
            c_in = width
        layers.append(("gap", GlobalAvgPool()))
        fc_widths = [width, width, width] if big else [width, width]
        layers.extend(_fc_stack(rng, fc_widths, config.extraneous_count, np_dtype))
    elif len(shape) == 3:
        c_in = shape[0]
        width = 64 if big else 32
        n_conv = 2 if big else 1
        for i in range(n_conv):
            layers.append((f"conv{i}", Conv(c_in, width, 3, rng, padding=1, dtype=np_dtype, spatial_rank=2)))
            layers.append((f"norm{i}", NormLayer(PROBE_NORM, width, dtype=np_dtype)))
            layers.append((f"relu{i}", ReLU()))
            layers.append((f"pool{i}", AvgPool(2)))
            c_in = width
        layers.append(("gap", GlobalAvgPool()))
        fc_widths = [width, width, width] if big else [width, width]
        layers.extend(_fc_stack(rng, fc_widths, config.extraneous_count, np_dtype))
    else:
        d = shape[0]
        hidden = [128] * 4 if big else [64] * 2
        layers.extend(_fc_stack(rng, [d] + hidden, config.extraneous_count, np_dtype))
    root = Sequential(layers)
    penultimate = layers[-2][0] if len(layers) >= 2 else layers[-1][0]
    return Model(config, root, penultimate)


def stratified_split(extraneous, seed, fractions=(0.6, 0.2, 0.2), min_per_group=5):
    """Per-group 60/20/20 index split, proportions kept within one sample."""
    extraneous = np.asarray(extraneous)
    train_idx, val_idx, test_idx = [], [], []
    for gid in np.unique(extraneous):
        idx = np.nonzero(extraneous == gid)[0]
        n = len(idx)
        if n < min_per_group:
            raise DataError(
                f"extraneous group {int(gid)} has {n} sample(s); need >= {min_per_group}"
            )
        perm = make_rng(seed, STREAM_PROBE_SPLIT, int(gid)).permutation(n)
        idx = idx[perm]
        n_train = max(1, int(round(fractions[0] * n)))
        n_val = max(1, int(round(fractions[1] * n)))
        n_train = min(n_train, n - 2)
        n_val = min(n_val, n - n_train - 1)
        train_idx.append(idx[:n_train])
        val_idx.append(idx[n_train : n_train + n_val])
        test_idx.append(idx[n_train + n_val :])
    return (
        np.concatenate(train_idx),
        np.concatenate(val_idx),
        np.concatenate(test_idx),
    )


@dataclass
class InvarianceResult:
    decode_acc: float
    chance: float
    test_count: int
    best_epoch: int
    layer_id: str
    eval_scheme: str


def _bank_dataset(bank):
    kind = KIND_IMAGE if bank.features.ndim == 4 else KIND_SEQUENCE
    if bank.features.ndim == 2:
        kind = KIND_IMAGE  # flat features behave like per-sample data
    return TaggedDataset(
        bank.features,
        bank.extraneous,
        bank.extraneous,
        bank.extraneous_count,
        bank.extraneous_count,
        kind,
        {"feature_layer": bank.layer_id, "eval_scheme": bank.eval_scheme},
    )


def default_probe_config(seed):
    return TrainConfig(
        epochs=15,
        schedule=LrSchedule(mode="plateau", base_lr=5e-4, factor=0.1, patience=3),
        batch_size=64,
        early_stop_patience=6,
        seed=seed,
        eval_scheme="non_adaptive",
    )


def run_invariance(bank, seed, train_config=None, scale="small"):
    """Train a decoder on 60% of the bank, report test accuracy vs chance."""
    if train_config is None:
        train_config = default_probe_config(seed)
    ds = _bank_dataset(bank)
    tr, va, te = stratified_split(bank.extraneous, seed)
    decoder = build_decoder(bank.features.shape[1:], bank.extraneous_count,
                            scale=scale, seed=seed)
    best, history = train(decoder, ds.subset(tr), ds.subset(va), train_config)
    acc = evaluate(best, ds.subset(te), "non_adaptive", train_config.batch_size)
    from .optim import early_stop_check

    best_epoch = early_stop_check([h.val_acc for h in history], train_config.early_stop_patience).best_epoch
    return InvarianceResult(
        decode_acc=float(acc),
        chance=1.0 / bank.extraneous_count,
        test_count=len(te),
        best_epoch=best_epoch,
        layer_id=bank.layer_id,
        eval_scheme=bank.eval_scheme,
    )
