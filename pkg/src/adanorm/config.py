"""Experiment configuration: strict INI-style files, canonical emission.

Unknown sections or keys are rejected, every key has a default, and
emit(parse(text)) is a fixed point: parsing the canonical text and emitting
it again reproduces the same string byte for byte.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .models import ImageArch, ModelConfig, SensorArch
from .normalization import NormSpec
from .optim import EVAL_SCHEMES, LrSchedule, TrainConfig


def _parse_int_list(text):
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(v.strip()) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _parse_breakpoints(text):
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            e, lr = part.split(":")
            out.append((int(e), float(lr)))
        except ValueError:
            raise ConfigError(f"expected epoch:lr pairs, got {part!r}") from None
    if not out:
        raise ConfigError("schedule breakpoints must not be empty")
    return tuple(out)


def _parse_corruptions(text):
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            kind, sev = part.split(":")
            out.append((kind.strip(), int(sev)))
        except ValueError:
            raise ConfigError(f"expected kind:severity pairs, got {part!r}") from None
    return tuple(out)


def _fmt_int_list(values):
    return ",".join(str(v) for v in values)


def _fmt_breakpoints(values):
    return ",".join(f"{e}:{lr!r}" for e, lr in values)


def _fmt_corruptions(values):
    return ",".join(f"{k}:{s}" for k, s in values)


def _parse_str_list(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


# key -> (default, parse, format)
_SCHEMA = {
    "experiment": {
        "seed": (0, int, str),
        "out_dir": ("runs/exp", str, str),
    },
    "dataset": {
        "source": ("synthetic", str, str),
        "classes": (5, int, str),
        "subjects": (8, int, str),
        "channels": (6, int, str),
        "steps_per_recording": (1225, int, str),
        "recordings_per_subject": (6, int, str),
        "severity": (0.8, float, repr),
        "noise_level": (0.1, float, repr),
        "window": (200, int, str),
        "train_stride": (25, int, str),
        "eval_stride": (200, int, str),
        "train_ids": ((0, 1, 2, 3, 4, 5), _parse_int_list, _fmt_int_list),
        "val_ids": ((6,), _parse_int_list, _fmt_int_list),
        "test_ids": ((7,), _parse_int_list, _fmt_int_list),
        "train_images": ("", str, str),
        "train_labels": ("", str, str),
        "test_images": ("", str, str),
        "test_labels": ("", str, str),
        "train_limit": (0, int, str),
        "test_limit": (0, int, str),
        "corruptions": ((), _parse_corruptions, _fmt_corruptions),
        "corruption_seed": (0, int, str),
    },
    "model": {
        "task": ("sensor_seq", str, str),
        "input_channels": (6, int, str),
        "num_classes": (5, int, str),
        "seed": (0, int, str),
        "dtype": ("float32", str, str),
        "per_channel_blocks": (5, int, str),
        "merged_blocks": (6, int, str),
        "convs_per_block": (4, int, str),
        "per_channel_growth": (32, int, str),
        "merged_growth": (128, int, str),
        "kernel_size": (3, int, str),
        "stage_widths": ((16, 32, 64), _parse_int_list, _fmt_int_list),
        "convs_per_stage": (2, int, str),
        "pool_factor": (2, int, str),
    },
    "norm": {
        "scheme": ("non_adaptive", str, str),
        "averaging": ("batch", str, str),
        "statistic": ("mean_std", str, str),
        "epsilon": (1e-5, float, repr),
        "momentum": (0.1, float, repr),
    },
    "train": {
        "epochs": (50, int, str),
        "batch_size": (32, int, str),
        "schedule": ("fixed", str, str),
        "breakpoints": (((0, 5e-4), (35, 5e-5)), _parse_breakpoints, _fmt_breakpoints),
        "base_lr": (5e-4, float, repr),
        "factor": (0.1, float, repr),
        "patience": (5, int, str),
        "early_stop_patience": (10, int, str),
        "eval_scheme": ("non_adaptive", str, str),
    },
    "eval": {
        "schemes": (("non_adaptive", "adaptive_batch"), _parse_str_list, lambda v: ",".join(v)),
    },
}


@dataclass
class ExperimentConfig:
    seed: int
    out_dir: str
    dataset: dict
    model: ModelConfig
    train: TrainConfig
    eval_schemes: tuple
    raw: dict = field(repr=False, default_factory=dict)


def _read_sections(path):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser[section].items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[(section, key)] = raw
    return values


def _materialize(values):
    out = {}
    for section, keys in _SCHEMA.items():
        for key, (default, parse, _fmt) in keys.items():
            if (section, key) in values:
                raw = values[(section, key)]
                try:
                    out[(section, key)] = parse(raw)
                except ConfigError:
                    raise
                except (TypeError, ValueError) as exc:
                    raise ConfigError(
                        f"bad value for {key} in [{section}]: {raw!r} ({exc})"
                    ) from None
            else:
                out[(section, key)] = default
    return out


def build_experiment(values, base_dir="."):
    """Assemble validated config objects from materialized key/values."""
    g = lambda s, k: values[(s, k)]

    norm = NormSpec(
        scheme=g("norm", "scheme"),
        averaging=g("norm", "averaging"),
        statistic=g("norm", "statistic"),
        epsilon=g("norm", "epsilon"),
        momentum=g("norm", "momentum"),
    )
    model = ModelConfig(
        task=g("model", "task"),
        input_channels=g("model", "input_channels"),
        num_classes=g("model", "num_classes"),
        norm=norm,
        sensor=SensorArch(
            per_channel_blocks=g("model", "per_channel_blocks"),
            merged_blocks=g("model", "merged_blocks"),
            convs_per_block=g("model", "convs_per_block"),
            per_channel_growth=g("model", "per_channel_growth"),
            merged_growth=g("model", "merged_growth"),
            kernel_size=g("model", "kernel_size"),
        ),
        image=ImageArch(
            stage_widths=g("model", "stage_widths"),
            convs_per_stage=g("model", "convs_per_stage"),
            pool_factor=g("model", "pool_factor"),
        ),
        seed=g("model", "seed"),
        dtype=g("model", "dtype"),
    )
    train_cfg = TrainConfig(
        epochs=g("train", "epochs"),
        schedule=LrSchedule(
            mode=g("train", "schedule"),
            breakpoints=g("train", "breakpoints"),
            base_lr=g("train", "base_lr"),
            factor=g("train", "factor"),
            patience=g("train", "patience"),
        ),
        batch_size=g("train", "batch_size"),
        early_stop_patience=g("train", "early_stop_patience"),
        seed=g("experiment", "seed"),
        eval_scheme=g("train", "eval_scheme"),
    )
    schemes = g("eval", "schemes")
    for s in schemes:
        if s not in EVAL_SCHEMES:
            raise ConfigError(f"unknown eval scheme {s!r}")
    if norm.averaging.value == "instance" and "non_adaptive" in schemes:
        raise ConfigError(
            "a model trained with instance averaging never updates running "
            "statistics and cannot be evaluated non-adaptively"
        )
    if norm.averaging.value == "instance" and train_cfg.eval_scheme == "non_adaptive":
        raise ConfigError(
            "validation under the non_adaptive scheme is impossible with "
            "instance averaging; pick adaptive_instance or adaptive_batch"
        )

    dataset = {key: values[("dataset", key)] for key in _SCHEMA["dataset"]}
    if dataset["source"] not in ("synthetic", "idx"):
        raise ConfigError(f"unknown dataset source {dataset['source']!r}")
    if dataset["source"] == "synthetic":
        ids = dataset["train_ids"] + dataset["val_ids"] + dataset["test_ids"]
        if len(set(ids)) != len(ids):
            raise ConfigError("train/val/test extraneous id sets overlap")
        if dataset["window"] > dataset["steps_per_recording"]:
            raise ConfigError("window exceeds recording length")
    else:
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            p = dataset[key]
            if not p:
                raise ConfigError(f"dataset source idx requires {key}")
            full = p if os.path.isabs(p) else os.path.join(base_dir, p)
            if not os.path.exists(full):
                raise ConfigError(f"referenced file does not exist: {full}")
            dataset[key] = full
    return ExperimentConfig(
        seed=g("experiment", "seed"),
        out_dir=g("experiment", "out_dir"),
        dataset=dataset,
        model=model,
        train=train_cfg,
        eval_schemes=tuple(schemes),
        raw=dict(values),
    )


def parse_config(path):
    """Parse and validate an experiment config file."""
    values = _materialize(_read_sections(path))
    return build_experiment(values, base_dir=os.path.dirname(os.path.abspath(path)))


def canonical_text(config):
    """Deterministic full rendering: every key, schema order, defaults filled."""
    values = config.raw
    buf = io.StringIO()
    for si, (section, keys) in enumerate(_SCHEMA.items()):
        if si:
            buf.write("\n")
        buf.write(f"[{section}]\n")
        for key, (default, _parse, fmt) in keys.items():
            value = values.get((section, key), default)
            buf.write(f"{key} = {fmt(value)}\n")
    return buf.getvalue()


def parse_config_text(text, base_dir="."):
    """Parse config from a string (used for canonical round trips)."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config text: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser[section].items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[(section, key)] = raw
    return build_experiment(_materialize(values), base_dir=base_dir)
