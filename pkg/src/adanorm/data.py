"""Datasets tagged with an extraneous identity, plus generators and loaders.

Every sample carries (tensor, class label(s), extraneous_id). The extraneous
id names the nuisance source a sample came from: a synthetic subject, a
corruption kind, or 0 when there is only one source. Splitting by extraneous
id is how held-out-source experiments are built.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .container import read_container, write_container
from .errors import ConfigError, DataError, FormatError
from .rng import (
    STREAM_CORRUPT,
    STREAM_RECORDING,
    STREAM_SUBJECT,
    STREAM_TEMPLATES,
    make_rng,
)

KIND_SEQUENCE = "sequence"
KIND_IMAGE = "image"


@dataclass
class TaggedDataset:
    """Homogeneous sample store: tensors (N, ...), labels, extraneous ids.

    labels are (N,) for per-sample classes or (N, T) for per-timestep
    classes. extraneous is always (N,) of int ids in [0, extraneous_count).
    """

    tensors: np.ndarray
    labels: np.ndarray
    extraneous: np.ndarray
    class_count: int
    extraneous_count: int
    kind: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tensors = np.asarray(self.tensors)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.extraneous = np.asarray(self.extraneous, dtype=np.int64)
        n = self.tensors.shape[0]
        if self.labels.shape[0] != n or self.extraneous.shape != (n,):
            raise DataError("tensors, labels, and extraneous ids must align on axis 0")
        if self.kind not in (KIND_SEQUENCE, KIND_IMAGE):
            raise DataError(f"unknown dataset kind {self.kind!r}")
        if n:
            if self.labels.min() < 0 or self.labels.max() >= self.class_count:
                raise DataError("class label outside [0, class_count)")
            if self.extraneous.min() < 0 or self.extraneous.max() >= self.extraneous_count:
                raise DataError("extraneous id outside [0, extraneous_count)")

    def __len__(self):
        return self.tensors.shape[0]

    def __getitem__(self, i):
        return self.tensors[i], self.labels[i], self.extraneous[i]

    def subset(self, indices):
        indices = np.asarray(indices)
        return TaggedDataset(
            self.tensors[indices],
            self.labels[indices],
            self.extraneous[indices],
            self.class_count,
            self.extraneous_count,
            self.kind,
            dict(self.provenance),
        )

    def group_indices(self):
        """Sorted extraneous id -> index array, for ids present."""
        return {int(g): np.nonzero(self.extraneous == g)[0] for g in np.unique(self.extraneous)}


def window_series(series, labels, window=200, stride=25):
    """Cut one recording into overlapping windows.

    series: (D, T); labels: (T,). Returns a list of ((D, window), (window,))
    pairs, floor((T - window) / stride) + 1 of them.
    """
    series = np.asarray(series)
    labels = np.asarray(labels)
    if series.ndim != 2 or labels.shape != (series.shape[1],):
        raise DataError("expected series (D, T) with per-timestep labels (T,)")
    if window < 1 or stride < 1:
        raise ConfigError("window and stride must be >= 1")
    t = series.shape[1]
    if t < window:
        raise DataError(f"recording length {t} is shorter than window {window}")
    out = []
    for start in range(0, t - window + 1, stride):
        out.append((series[:, start : start + window].copy(), labels[start : start + window].copy()))
    return out


def window_dataset(dataset, window=200, stride=25):
    """Window every recording in a sequence dataset, keeping its tags."""
    if dataset.kind != KIND_SEQUENCE:
        raise ConfigError("windowing applies to sequence datasets")
    tensors, labels, extr = [], [], []
    for i in range(len(dataset)):
        for w, lw in window_series(dataset.tensors[i], dataset.labels[i], window, stride):
            tensors.append(w)
            labels.append(lw)
            extr.append(dataset.extraneous[i])
    prov = dict(dataset.provenance)
    prov["windowed"] = {"window": window, "stride": stride}
    return TaggedDataset(
        np.stack(tensors),
        np.stack(labels),
        np.asarray(extr),
        dataset.class_count,
        dataset.extraneous_count,
        KIND_SEQUENCE,
        prov,
    )


def standardize_per_dim(dataset, stats=None):
    """Shift/scale each sensor dimension; returns (dataset, (mean, scale)).

    With stats=None the statistics come from this dataset (use the training
    split); pass the returned tuple to transform other splits identically.
    Dimensions with tiny variance keep scale 1. A dataset is standardized at
    most once, enforced through its provenance.
    """
    if dataset.kind != KIND_SEQUENCE:
        raise ConfigError("per-dimension standardization applies to sequence datasets")
    if dataset.provenance.get("standardized"):
        raise DataError("dataset is already standardized")
    x = dataset.tensors
    if stats is None:
        mean = x.mean(axis=(0, 2))
        std = x.std(axis=(0, 2))
        scale = np.where(std < 1e-8, 1.0, std)
    else:
        mean, scale = stats
        mean = np.asarray(mean)
        scale = np.asarray(scale)
    out = (x - mean[None, :, None]) / scale[None, :, None]
    prov = dict(dataset.provenance)
    prov["standardized"] = True
    ds = TaggedDataset(
        out.astype(x.dtype, copy=False),
        dataset.labels,
        dataset.extraneous,
        dataset.class_count,
        dataset.extraneous_count,
        dataset.kind,
        prov,
    )
    return ds, (mean, scale)


@dataclass
class SubjectModel:
    """Per-subject recording transform; identity at severity 0.

    Severity sets transform magnitudes deterministically; the subject's
    seed only picks directions (per-channel signs, the mixing direction,
    the lag). Tying magnitude to severity alone keeps the train/test
    shift comparable across seeds, where magnitude-random draws would
    make the benchmark's difficulty itself a high-variance quantity.
    """

    gains: np.ndarray
    offsets: np.ndarray
    mixing: np.ndarray
    lag: int
    noise: float

    @classmethod
    def from_seed(cls, subject_id, seed, severity, channels, noise_level=0.1,
                  gain_sigma=0.8, offset_sigma=2.0, mixing_bound=0.5, max_lag=12):
        rng = make_rng(seed, STREAM_SUBJECT, subject_id)
        gains = np.exp(gain_sigma * severity * rng.choice((-1.0, 1.0), channels))
        offsets = offset_sigma * severity * rng.choice((-1.0, 1.0), channels)
        p = rng.standard_normal((channels, channels))
        p /= np.linalg.norm(p, 2)
        mixing = np.eye(channels) + mixing_bound * severity * p
        lag = int(round(severity * rng.integers(-max_lag, max_lag + 1)))
        noise = noise_level * (1.0 + severity)
        return cls(gains, offsets, mixing, lag, noise)

    def apply(self, series, rng):
        x = self.gains[:, None] * series + self.offsets[:, None]
        x = self.mixing @ x
        if self.lag:
            x = np.roll(x, self.lag, axis=1)
        return x + self.noise * rng.standard_normal(x.shape)


class _ClassTemplates:
    """Per-class, per-channel sums of three sinusoids with a slow envelope."""

    def __init__(self, classes, channels, seed, window=200):
        rng = make_rng(seed, STREAM_TEMPLATES)
        # Each class owns a disjoint frequency band, so class identity is
        # carried by waveform shape rather than by per-channel amplitude;
        # shape survives per-sample standardization, amplitude does not.
        # Bands sit high enough that one conv kernel spans a full period.
        base = 10.0 + 4.0 * np.arange(classes, dtype=np.float64)
        self.omega = 2.0 * np.pi * rng.uniform(
            base[:, None, None], base[:, None, None] + 4.0, (classes, channels, 3)
        ) / window
        self.phase = rng.uniform(0.0, 2.0 * np.pi, (classes, channels, 3))
        self.amp = rng.uniform(0.5, 1.2, (classes, channels, 3))
        self.env_omega = 2.0 * np.pi * rng.uniform(0.5, 2.0, classes) / window
        self.env_phase = rng.uniform(0.0, 2.0 * np.pi, classes)

    def evaluate(self, cls, t):
        waves = self.amp[cls][:, :, None] * np.sin(
            self.omega[cls][:, :, None] * t[None, None, :] + self.phase[cls][:, :, None]
        )
        env = 1.0 + 0.3 * np.sin(self.env_omega[cls] * t + self.env_phase[cls])
        return waves.sum(axis=1) * env[None, :]


def _segment_plan(rng, classes, total):
    """One segment per class in permuted order, boundaries jittered.

    Every recording carries every class with near-equal duration, so the
    class composition of any recording subset matches the population and
    held-out moment estimates are not polluted by composition noise.
    """
    order = rng.permutation(classes)
    cuts = np.linspace(0, total, classes + 1)
    jitter = total / classes / 4.0
    cuts[1:-1] += rng.uniform(-jitter, jitter, classes - 1)
    cuts = np.round(cuts).astype(int)
    return [(int(order[i]), int(cuts[i]), int(cuts[i + 1])) for i in range(classes)]


def generate_synthetic_sensor(classes, subjects, channels, steps_per_recording,
                              recordings_per_subject, severity, seed,
                              window=200, noise_level=0.1):
    """Multichannel labeled recordings with per-subject nuisance transforms.

    Each recording covers every class once, in permuted order with
    jittered segment boundaries, evaluated from shared class templates and
    run through the subject's transform. severity 0 makes every subject
    transform the identity, so train/test subject splits carry no shift.
    """
    if classes < 2 or subjects < 1 or channels < 1:
        raise ConfigError("need >= 2 classes, >= 1 subject, >= 1 channel")
    if steps_per_recording < window:
        raise ConfigError("recordings must be at least one window long")
    if not 0.0 <= severity <= 1.0:
        raise ConfigError("severity must lie in [0, 1]")
    templates = _ClassTemplates(classes, channels, seed, window)
    tensors, labels, extr = [], [], []
    for s in range(subjects):
        subject = SubjectModel.from_seed(s, seed, severity, channels, noise_level)
        for r in range(recordings_per_subject):
            rng = make_rng(seed, STREAM_RECORDING, s, r)
            sig = np.zeros((channels, steps_per_recording))
            lab = np.zeros(steps_per_recording, dtype=np.int64)
            for cls, a, b in _segment_plan(rng, classes, steps_per_recording):
                # Segment-local time: a class sounds the same wherever its
                # segment lands, so recording composition cannot shift the
                # class-conditional feature distribution.
                sig[:, a:b] = templates.evaluate(cls, np.arange(b - a, dtype=np.float64))
                lab[a:b] = cls
            x = subject.apply(sig, rng)
            tensors.append(x.astype(np.float32))
            labels.append(lab)
            extr.append(s)
    prov = {
        "generator": {
            "classes": classes,
            "subjects": subjects,
            "channels": channels,
            "steps_per_recording": steps_per_recording,
            "recordings_per_subject": recordings_per_subject,
            "severity": severity,
            "seed": seed,
            "window": window,
            "noise_level": noise_level,
        }
    }
    return TaggedDataset(
        np.stack(tensors), np.stack(labels), np.asarray(extr),
        classes, subjects, KIND_SEQUENCE, prov,
    )


# Severity tables, index = severity - 1.
GAUSSIAN_NOISE_SIGMA = (0.04, 0.08, 0.12, 0.18, 0.26)
SHOT_NOISE_SCALE = (250.0, 100.0, 50.0, 25.0, 12.0)
IMPULSE_FRACTION = (0.01, 0.03, 0.06, 0.10, 0.17)
BRIGHTNESS_DELTA = (0.1, 0.2, 0.3, 0.4, 0.5)
CONTRAST_SCALE = (0.75, 0.6, 0.45, 0.3, 0.15)
BLUR_SIGMA = (0.5, 0.75, 1.0, 1.5, 2.0)
PIXELATE_FACTOR = (0.6, 0.5, 0.4, 0.3, 0.25)
SATURATE_WEIGHT = (0.3, 0.5, 1.5, 2.0, 3.0)

CORRUPTION_KINDS = (
    "gaussian_noise",
    "shot_noise",
    "impulse",
    "brightness",
    "contrast",
    "gaussian_blur",
    "pixelate",
    "saturate",
)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ConfigError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ConfigError("corruption severity must lie in 1..5")


def _pixelate(img, factor):
    c, h, w = img.shape
    th = max(1, int(np.floor(h * factor)))
    tw = max(1, int(np.floor(w * factor)))
    out = img.copy()
    row_blocks = np.array_split(np.arange(h), th)
    col_blocks = np.array_split(np.arange(w), tw)
    for rb in row_blocks:
        for cb in col_blocks:
            block = img[:, rb[0] : rb[-1] + 1, cb[0] : cb[-1] + 1]
            out[:, rb[0] : rb[-1] + 1, cb[0] : cb[-1] + 1] = block.mean(axis=(1, 2), keepdims=True)
    return out


def corrupt_image(img, spec):
    """Apply one corruption to a (C, H, W) image in [0, 1]; output stays in [0, 1].

    Noise draws are deterministic given (spec.kind, spec.severity, spec.seed);
    derive per-sample seeds when corrupting a dataset in parallel.
    """
    x = np.asarray(img)
    if x.ndim != 3:
        raise DataError("expected a (channels, height, width) image")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise DataError("image values must lie in [0, 1]")
    dtype = x.dtype
    x = x.astype(np.float64)
    i = spec.severity - 1
    rng = make_rng(spec.seed, STREAM_CORRUPT, CORRUPTION_KINDS.index(spec.kind), spec.severity)

    if spec.kind == "gaussian_noise":
        y = x + GAUSSIAN_NOISE_SIGMA[i] * rng.standard_normal(x.shape)
    elif spec.kind == "shot_noise":
        scale = SHOT_NOISE_SCALE[i]
        y = rng.poisson(x * scale) / scale
    elif spec.kind == "impulse":
        y = x.copy()
        mask = rng.random(x.shape[1:]) < IMPULSE_FRACTION[i]
        salt = rng.random(x.shape[1:]) < 0.5
        y[:, mask & salt] = 1.0
        y[:, mask & ~salt] = 0.0
    elif spec.kind == "brightness":
        y = x + BRIGHTNESS_DELTA[i]
    elif spec.kind == "contrast":
        m = x.mean(axis=(1, 2), keepdims=True)
        y = (x - m) * CONTRAST_SCALE[i] + m
    elif spec.kind == "gaussian_blur":
        sigma = BLUR_SIGMA[i]
        # truncate=3.0 gives kernel radius round(3 * sigma)
        y = gaussian_filter1d(x, sigma, axis=1, mode="nearest", truncate=3.0)
        y = gaussian_filter1d(y, sigma, axis=2, mode="nearest", truncate=3.0)
    elif spec.kind == "pixelate":
        y = _pixelate(x, PIXELATE_FACTOR[i])
    else:  # saturate
        m = x.mean(axis=0, keepdims=True)
        y = m + SATURATE_WEIGHT[i] * (x - m)
    return np.clip(y, 0.0, 1.0).astype(dtype)


def corrupt_dataset(dataset, specs, seed=0, threads=1):
    """Corrupted copies of an image dataset, one extraneous id per spec.

    Each (kind, severity) in `specs` produces a full corrupted copy of the
    dataset tagged with its own extraneous id. Per-sample seeds are derived
    from `seed` and the sample index, so results are bit-identical for any
    worker count.
    """
    if dataset.kind != KIND_IMAGE:
        raise ConfigError("corruption applies to image datasets")
    if not specs:
        raise ConfigError("corrupt_dataset needs at least one (kind, severity) spec")
    n = len(dataset)
    blocks = []
    kinds = []
    for kind, severity in specs:
        kinds.append(f"{kind}:{severity}")
        out = np.empty_like(dataset.tensors)

        def work(idx, kind=kind, severity=severity, out=out):
            s = CorruptionSpec(kind, severity, seed=(seed << 20) + idx)
            out[idx] = corrupt_image(dataset.tensors[idx], s)

        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(work, range(n)))
        else:
            for idx in range(n):
                work(idx)
        blocks.append(out)
    prov = dict(dataset.provenance)
    prov["corruptions"] = kinds
    return TaggedDataset(
        np.concatenate(blocks),
        np.concatenate([dataset.labels] * len(specs)),
        np.repeat(np.arange(len(specs), dtype=np.int64), n),
        dataset.class_count,
        len(specs),
        KIND_IMAGE,
        prov,
    )


def split_by_extraneous(dataset, train_ids, val_ids, test_ids):
    """Route samples by extraneous id into three datasets.

    The id sets must be disjoint and refer to existing ids; samples under
    ids named by none of the sets are dropped.
    """
    sets = [set(int(i) for i in ids) for ids in (train_ids, val_ids, test_ids)]
    for a in range(3):
        for b in range(a + 1, 3):
            overlap = sets[a] & sets[b]
            if overlap:
                raise ConfigError(f"extraneous id sets overlap: {sorted(overlap)}")
    known = set(range(dataset.extraneous_count))
    for ids in sets:
        bad = ids - known
        if bad:
            raise ConfigError(f"unknown extraneous ids {sorted(bad)}")
    out = []
    for ids in sets:
        mask = np.isin(dataset.extraneous, sorted(ids))
        out.append(dataset.subset(np.nonzero(mask)[0]))
    return tuple(out)


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_exact(fh, n, what, path):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"{path}: truncated while reading {what} ({len(data)}/{n} bytes)")
    return data


def load_idx(images_path, labels_path):
    """Load an IDX image/label file pair into an image dataset.

    Pixels are scaled to [0, 1] float32 with an explicit channel axis.
    Magic-number, truncation, and image/label count violations raise
    FormatError.
    """
    with open(images_path, "rb") as fh:
        magic = struct.unpack(">i", _read_exact(fh, 4, "magic", images_path))[0]
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(
                f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}",
                offset=0,
            )
        n, rows, cols = struct.unpack(">iii", _read_exact(fh, 12, "dimensions", images_path))
        raw = _read_exact(fh, n * rows * cols, "pixel payload", images_path)
        extra = fh.read(1)
        if extra:
            raise FormatError(f"{images_path}: {len(extra)}+ trailing bytes after payload")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols)
    with open(labels_path, "rb") as fh:
        magic = struct.unpack(">i", _read_exact(fh, 4, "magic", labels_path))[0]
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(
                f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}",
                offset=0,
            )
        (ln,) = struct.unpack(">i", _read_exact(fh, 4, "count", labels_path))
        if ln != n:
            raise FormatError(f"label count {ln} does not match image count {n}")
        labels = np.frombuffer(_read_exact(fh, ln, "label payload", labels_path), dtype=np.uint8)
    tensors = (images.astype(np.float32) / 255.0)[:, None, :, :]
    digests = {
        str(images_path): _file_digest(images_path),
        str(labels_path): _file_digest(labels_path),
    }
    return TaggedDataset(
        tensors,
        labels.astype(np.int64),
        np.zeros(n, dtype=np.int64),
        int(labels.max()) + 1 if n else 1,
        1,
        KIND_IMAGE,
        {"source": digests},
    )


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_dataset(dataset, path_or_file):
    """Cache a dataset in the shared container format."""
    meta = {
        "kind": "dataset",
        "data_kind": dataset.kind,
        "class_count": dataset.class_count,
        "extraneous_count": dataset.extraneous_count,
        "provenance": dataset.provenance,
    }
    records = [
        ("tensors", b"DSET", dataset.tensors),
        ("labels", b"DSET", dataset.labels),
        ("extraneous", b"DSET", dataset.extraneous),
    ]
    return write_container(path_or_file, json.dumps(meta, sort_keys=True, separators=(",", ":")), records)


def load_dataset(path_or_file):
    config_text, records = read_container(path_or_file)
    try:
        meta = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"dataset metadata is not valid JSON: {exc}") from None
    if meta.get("kind") != "dataset":
        raise FormatError(f"container holds {meta.get('kind')!r}, not a dataset")
    arrays = {}
    for name, kind, arr in records:
        if kind != b"DSET":
            raise FormatError(f"unexpected record kind {kind!r} in dataset container")
        arrays[name] = arr
    missing = {"tensors", "labels", "extraneous"} - set(arrays)
    if missing:
        raise FormatError(f"dataset container is missing records: {sorted(missing)}")
    return TaggedDataset(
        arrays["tensors"],
        arrays["labels"],
        arrays["extraneous"],
        meta["class_count"],
        meta["extraneous_count"],
        meta["data_kind"],
        meta.get("provenance", {}),
    )
