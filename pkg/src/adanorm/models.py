"""Model assembly: layer tree, two reference architectures, checkpoints.

The sensor network processes each input channel through its own stack of
densely connected conv blocks, concatenates the per-channel embeddings, runs
merged dense blocks over the combination, and maps to per-timestep class
scores with a width-1 convolution. The image network is a plain
conv/norm/relu CNN with stage pooling, global average pooling, and a linear
head.

Forward modes:
  TRAIN               batch statistics, running-buffer updates, differentiable
  EVAL_NON_ADAPTIVE   frozen running statistics (requires batch-averaged training)
  EVAL_ADAPTIVE       statistics recomputed from the evaluated batch
An averaging override lets an adaptive evaluation pick batch or instance
averaging independently of how the layer was configured.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, asdict
from enum import Enum

import numpy as np

from . import tensor as T
from .container import read_container, write_container
from .errors import ConfigError, FormatError
from .normalization import (
    Averaging,
    NormSpec,
    Scheme,
    Statistic,
    effective_eval_spec,
    normalize_with_stats,
    norm_forward_eval,
    norm_forward_train,
    NormState,
    _affine_shape,
)
from .rng import STREAM_INIT, make_rng


class Mode(str, Enum):
    TRAIN = "train"
    EVAL_NON_ADAPTIVE = "eval_non_adaptive"
    EVAL_ADAPTIVE = "eval_adaptive"


class _Ctx:
    """Per-forward bookkeeping passed down the layer tree."""

    __slots__ = ("mode", "averaging", "capture_inputs", "capture_outputs", "captured", "stat_overrides")

    def __init__(self, mode, averaging=None, capture_inputs=(), capture_outputs=(), stat_overrides=None):
        self.mode = Mode(mode)
        self.averaging = Averaging(averaging) if averaging is not None else None
        self.capture_inputs = frozenset(capture_inputs)
        self.capture_outputs = frozenset(capture_outputs)
        self.captured = {}
        self.stat_overrides = stat_overrides or {}

    def grab(self, name, value, store):
        if name in store:
            self.captured.setdefault(name, []).append(np.array(T._as_array(value)))


class Layer:
    name = ""

    def forward(self, x, ctx):
        raise NotImplementedError

    def children(self):
        return ()

    def params(self):
        return ()

    def buffers(self):
        return ()


class Sequential(Layer):
    def __init__(self, named_children):
        self._children = list(named_children)

    def forward(self, x, ctx):
        for _, child in self._children:
            x = child.forward(x, ctx)
        return x

    def children(self):
        return tuple(self._children)


class Conv(Layer):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0, dtype=np.float32, spatial_rank=1):
        kshape = (out_channels, in_channels) + (kernel_size,) * spatial_rank
        fan_in = in_channels * kernel_size**spatial_rank
        scale = np.sqrt(2.0 / fan_in)
        self.weight = T.FeatureTensor((rng.standard_normal(kshape) * scale).astype(dtype))
        self.bias = T.FeatureTensor(np.zeros(out_channels, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def forward(self, x, ctx):
        return T.convolve(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def params(self):
        return (("weight", self.weight), ("bias", self.bias))


class Linear(Layer):
    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        scale = np.sqrt(2.0 / in_features)
        self.weight = T.FeatureTensor((rng.standard_normal((out_features, in_features)) * scale).astype(dtype))
        self.bias = T.FeatureTensor(np.zeros(out_features, dtype=dtype))

    def forward(self, x, ctx):
        return T.linear(x, self.weight, self.bias)

    def params(self):
        return (("weight", self.weight), ("bias", self.bias))


class ReLU(Layer):
    def forward(self, x, ctx):
        y = T.relu(x)
        ctx.grab(self.name, y, ctx.capture_outputs)
        return y


class AvgPool(Layer):
    def __init__(self, factor=2):
        self.factor = factor

    def forward(self, x, ctx):
        return T.avg_pool2d(x, self.factor)


class GlobalAvgPool(Layer):
    def forward(self, x, ctx):
        y = T.global_avg_pool(x)
        ctx.grab(self.name, y, ctx.capture_outputs)
        return y


class NormLayer(Layer):
    """Normalization with runtime scheme resolution and diagnostic hooks."""

    def __init__(self, spec, channels, dtype=np.float32):
        self.spec = spec
        self.state = NormState(channels, spec.statistic, dtype=dtype)

    def forward(self, x, ctx):
        ctx.grab(self.name, x, ctx.capture_inputs)
        if self.name in ctx.stat_overrides:
            return self._forward_with_override(x, ctx.stat_overrides[self.name])
        if ctx.mode is Mode.TRAIN:
            y, _ = norm_forward_train(x, self.spec, self.state)
            return y
        scheme = Scheme.NON_ADAPTIVE if ctx.mode is Mode.EVAL_NON_ADAPTIVE else Scheme.ADAPTIVE
        eff = effective_eval_spec(self.spec, scheme, ctx.averaging)
        return norm_forward_eval(x, eff, self.state)

    def _forward_with_override(self, x, stats):
        mean, second = stats
        xd = T._as_array(x)
        cshape = _affine_shape(xd.ndim, self.state.channels)
        mean_r = None if mean is None else np.asarray(mean, dtype=xd.dtype).reshape(cshape)
        second_r = np.asarray(second, dtype=xd.dtype).reshape(cshape)
        xhat, _ = normalize_with_stats(xd, mean_r, second_r, self.spec.epsilon, self.spec.statistic)
        y = self.state.gamma.data.reshape(cshape) * xhat + self.state.beta.data.reshape(cshape)
        return T.FeatureTensor(y)

    def params(self):
        return (("gamma", self.state.gamma), ("beta", self.state.beta))

    def buffers(self):
        out = []
        if self.state.running_mean is not None:
            out.append(("running_mean", self.state.running_mean))
        out.append(("running_sq", self.state.running_sq))
        return tuple(out)


class DenseBlock(Layer):
    """Densely connected conv units; emits the last unit's output.

    Unit i consumes the concatenation of the block input and the outputs of
    all earlier units, so each conv sees an ever wider input while the block
    output stays at the growth width.
    """

    def __init__(self, units):
        self._children = list(units)

    def forward(self, x, ctx):
        feats = [x]
        out = x
        for _, unit in self._children:
            inp = feats[0] if len(feats) == 1 else T.concat(feats, axis=1)
            out = unit.forward(inp, ctx)
            feats.append(out)
        return out

    def children(self):
        return tuple(self._children)


class PerChannelTrunk(Layer):
    """Runs one stack per input channel and concatenates the embeddings."""

    def __init__(self, stacks):
        self._children = list(stacks)

    def forward(self, x, ctx):
        outs = []
        for i, (_, stack) in enumerate(self._children):
            xi = T.slice_axis(x, 1, i, i + 1)
            outs.append(stack.forward(xi, ctx))
        return T.concat(outs, axis=1)

    def children(self):
        return tuple(self._children)


@dataclass(frozen=True)
class SensorArch:
    per_channel_blocks: int = 5
    merged_blocks: int = 6
    convs_per_block: int = 4
    per_channel_growth: int = 32
    merged_growth: int = 128
    kernel_size: int = 3


@dataclass(frozen=True)
class ImageArch:
    stage_widths: tuple = (16, 32, 64)
    convs_per_stage: int = 2
    pool_factor: int = 2


@dataclass(frozen=True)
class ModelConfig:
    task: str = "sensor_seq"  # "sensor_seq" | "image"
    input_channels: int = 6
    num_classes: int = 5
    norm: NormSpec = field(default_factory=NormSpec)
    sensor: SensorArch = field(default_factory=SensorArch)
    image: ImageArch = field(default_factory=ImageArch)
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.task not in ("sensor_seq", "image"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.input_channels < 1 or self.num_classes < 2:
            raise ConfigError("need >= 1 input channel and >= 2 classes")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        s = self.sensor
        if min(s.per_channel_blocks, s.merged_blocks, s.convs_per_block, s.per_channel_growth, s.merged_growth) < 1:
            raise ConfigError("sensor architecture counts must be >= 1")
        if s.kernel_size < 1 or s.kernel_size % 2 == 0:
            raise ConfigError("kernel size must be odd so padding can preserve length")
        im = self.image
        if len(im.stage_widths) < 1 or min(im.stage_widths) < 1 or im.convs_per_stage < 1 or im.pool_factor < 1:
            raise ConfigError("image architecture counts must be >= 1")


class Model:
    """A named layer tree plus the config that built it."""

    def __init__(self, config, root, penultimate):
        self.config = config
        self.root = root
        self.penultimate = penultimate
        self._by_name = {}
        self._assign_names(root, "")
        if penultimate not in self._by_name:
            raise ConfigError(f"penultimate layer {penultimate!r} is not in the tree")

    def _assign_names(self, layer, prefix):
        layer.name = prefix
        self._by_name[prefix] = layer
        for key, child in layer.children():
            child_name = f"{prefix}.{key}" if prefix else key
            self._assign_names(child, child_name)

    def layer(self, name):
        if name == "penultimate":
            name = self.penultimate
        if name not in self._by_name:
            raise ConfigError(f"no layer named {name!r}")
        return self._by_name[name]

    def layer_names(self):
        return [n for n in self._by_name if n]

    def norm_layers(self):
        return [(n, l) for n, l in self._by_name.items() if isinstance(l, NormLayer)]

    def named_parameters(self):
        out = []
        for name, layer in self._by_name.items():
            for pname, p in layer.params():
                out.append((f"{name}.{pname}" if name else pname, p))
        return out

    def named_buffers(self):
        out = []
        for name, layer in self._by_name.items():
            for bname, b in layer.buffers():
                out.append((f"{name}.{bname}" if name else bname, b))
        return out

    @property
    def parameter_count(self):
        return sum(p.data.size for _, p in self.named_parameters())

    def forward(self, x, mode, averaging=None, capture_inputs=(), capture_outputs=(), stat_overrides=None, captured_out=None):
        ctx = _Ctx(mode, averaging, capture_inputs, capture_outputs, stat_overrides)
        y = self.root.forward(x if isinstance(x, T.FeatureTensor) else T.FeatureTensor(x), ctx)
        if captured_out is not None:
            for k, chunks in ctx.captured.items():
                captured_out.setdefault(k, []).extend(chunks)
        return y

    def copy(self):
        return copy.deepcopy(self)

    def dense_blocks_per_path(self):
        """Dense blocks crossed on any input-to-output path (sensor task)."""
        if self.config.task != "sensor_seq":
            raise ConfigError("path count is defined for the sensor network")
        trunk = self.layer("trunk")
        _, first_stack = trunk.children()[0]
        per_channel = sum(isinstance(c, DenseBlock) for _, c in first_stack.children())
        merged = sum(isinstance(c, DenseBlock) for _, c in self.layer("merged").children())
        return per_channel + merged


def _unit(in_ch, growth, kernel, rng, spec, dtype, spatial_rank=1):
    pad = kernel // 2
    return Sequential(
        [
            ("conv", Conv(in_ch, growth, kernel, rng, padding=pad, dtype=dtype, spatial_rank=spatial_rank)),
            ("norm", NormLayer(spec, growth, dtype=dtype)),
            ("relu", ReLU()),
        ]
    )


def _dense_block(in_ch, growth, n_units, kernel, rng, spec, dtype):
    units = []
    width = in_ch
    for i in range(n_units):
        units.append((f"unit{i}", _unit(width, growth, kernel, rng, spec, dtype)))
        width += growth
    return DenseBlock(units)


def build_sensor_densenet(config):
    """Per-channel dense trunks, merged dense blocks, width-1 conv head."""
    if config.task != "sensor_seq":
        raise ConfigError("config task is not sensor_seq")
    arch = config.sensor
    dtype = np.dtype(config.dtype)
    rng = make_rng(config.seed, STREAM_INIT)
    spec = config.norm

    stacks = []
    for d in range(config.input_channels):
        blocks = []
        width = 1
        for b in range(arch.per_channel_blocks):
            blocks.append(
                (f"block{b}", _dense_block(width, arch.per_channel_growth, arch.convs_per_block, arch.kernel_size, rng, spec, dtype))
            )
            width = arch.per_channel_growth
        stacks.append((f"ch{d}", Sequential(blocks)))
    trunk = PerChannelTrunk(stacks)

    merged_blocks = []
    width = config.input_channels * arch.per_channel_growth
    for b in range(arch.merged_blocks):
        merged_blocks.append(
            (f"block{b}", _dense_block(width, arch.merged_growth, arch.convs_per_block, arch.kernel_size, rng, spec, dtype))
        )
        width = arch.merged_growth
    merged = Sequential(merged_blocks)

    head = Conv(width, config.num_classes, 1, rng, dtype=dtype, spatial_rank=1)
    root = Sequential([("trunk", trunk), ("merged", merged), ("head", head)])
    last_block = arch.merged_blocks - 1
    last_unit = arch.convs_per_block - 1
    penultimate = f"merged.block{last_block}.unit{last_unit}.relu"
    return Model(config, root, penultimate)


def build_image_cnn(config):
    """Conv/norm/relu stages with pooling, then global pooling and a linear head."""
    if config.task != "image":
        raise ConfigError("config task is not image")
    arch = config.image
    dtype = np.dtype(config.dtype)
    rng = make_rng(config.seed, STREAM_INIT)
    spec = config.norm

    stages = []
    width = config.input_channels
    for si, out_w in enumerate(arch.stage_widths):
        units = []
        for ci in range(arch.convs_per_stage):
            units.append((f"unit{ci}", _unit(width, out_w, 3, rng, spec, dtype, spatial_rank=2)))
            width = out_w
        units.append(("pool", AvgPool(arch.pool_factor)))
        stages.append((f"stage{si}", Sequential(units)))
    body = Sequential(stages)
    gap = GlobalAvgPool()
    head = Linear(width, config.num_classes, rng, dtype=dtype)
    root = Sequential([("body", body), ("gap", gap), ("head", head)])
    return Model(config, root, penultimate="gap")


def build_model(config):
    if config.task == "sensor_seq":
        return build_sensor_densenet(config)
    return build_image_cnn(config)


def model_forward(model, x, mode, **kwargs):
    """Functional alias for Model.forward."""
    return model.forward(x, mode, **kwargs)


def _config_to_json(config):
    if isinstance(config, ModelConfig):
        d = asdict(config)
        d["norm"] = {
            "scheme": config.norm.scheme.value,
            "averaging": config.norm.averaging.value,
            "statistic": config.norm.statistic.value,
            "epsilon": config.norm.epsilon,
            "momentum": config.norm.momentum,
        }
        d["image"]["stage_widths"] = list(config.image.stage_widths)
        d["kind"] = "model"
        return json.dumps(d, sort_keys=True, separators=(",", ":"))
    d = dict(config.__dict__)
    d["input_shape"] = list(d["input_shape"])
    d["kind"] = "decoder"
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def _config_from_json(text):
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint config is not valid JSON: {exc}") from None
    kind = d.pop("kind", None)
    if kind == "model":
        d["norm"] = NormSpec(**d["norm"])
        d["sensor"] = SensorArch(**d["sensor"])
        d["image"]["stage_widths"] = tuple(d["image"]["stage_widths"])
        d["image"] = ImageArch(**d["image"])
        return ModelConfig(**d)
    if kind == "decoder":
        from .invariance import DecoderConfig

        d["input_shape"] = tuple(d["input_shape"])
        return DecoderConfig(**d)
    raise FormatError(f"unknown checkpoint config kind {kind!r}")


def checkpoint_write(model, path_or_file):
    """Serialize config, parameters, running buffers, and update counters."""
    records = []
    for name, p in model.named_parameters():
        records.append((name, b"TENS", p.data))
    for name, b in model.named_buffers():
        records.append((name, b"TENS", b))
    for name, layer in model.norm_layers():
        counter = np.asarray(layer.state.updates_seen, dtype=np.int64)
        records.append((f"{name}.updates_seen", b"TENS", counter))
    return write_container(path_or_file, _config_to_json(model.config), records)


def checkpoint_read(path_or_file):
    """Rebuild the model from a checkpoint; restores buffers and counters."""
    config_text, records = read_container(path_or_file)
    config = _config_from_json(config_text)
    if hasattr(config, "task"):
        model = build_model(config)
    else:
        from .invariance import build_decoder_from_config

        model = build_decoder_from_config(config)

    by_name = {name: (kind, arr) for name, kind, arr in records}
    if len(by_name) != len(records):
        raise FormatError("duplicate record names in checkpoint")
    expected = set()
    for name, p in model.named_parameters():
        expected.add(name)
        if name not in by_name:
            raise FormatError(f"checkpoint is missing parameter {name!r}")
        _, arr = by_name[name]
        if arr.shape != p.data.shape:
            raise FormatError(f"parameter {name!r} has shape {arr.shape}, expected {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=False)
    for lname, layer in model.norm_layers():
        if layer.state.running_mean is not None:
            key = f"{lname}.running_mean"
            expected.add(key)
            layer.state.running_mean = by_name[key][1].astype(layer.state.running_sq.dtype, copy=False) if key in by_name else _missing(key)
        key = f"{lname}.running_sq"
        expected.add(key)
        layer.state.running_sq = by_name[key][1].astype(layer.state.running_sq.dtype, copy=False) if key in by_name else _missing(key)
        key = f"{lname}.updates_seen"
        expected.add(key)
        if key not in by_name:
            _missing(key)
        counter = by_name[key][1]
        if counter.size != 1:
            raise FormatError(f"record {key!r} must hold a single counter")
        layer.state.updates_seen = int(counter.reshape(-1)[0])
    unknown = set(by_name) - expected
    if unknown:
        raise FormatError(f"checkpoint contains unknown records: {sorted(unknown)[:3]}")
    return model


def _missing(key):
    raise FormatError(f"checkpoint is missing record {key!r}")
