"""Measuring how well normalized features match their statistics.

The central question: after normalizing with some statistics, do held-out
features actually have mean 0 and std 1 per filter? Two statistics sources
are supported:

* TRAIN_RUNNING: the layer's running buffers, i.e. what a frozen
  (non-adaptive) deployment would use.
* FromReference(subset): moments recomputed on a reference subset, i.e. what
  an adaptive deployment estimating statistics from held-out data would use.

Measured moments exclude the learned affine (gamma/beta); those are applied
only when propagating activations to deeper layers, matching how the network
itself would run. The half-split protocol estimates statistics on one half
of each extraneous group and measures the other half.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, StateError
from .models import Mode
from .normalization import Averaging, Statistic, normalize_with_stats, reduction_axes
from .rng import STREAM_HALF_SPLIT, make_rng

TRAIN_RUNNING = "train_running"


@dataclass(frozen=True)
class FromReference:
    """Recompute statistics on this reference subset."""

    reference: object


@dataclass
class MomentReport:
    """Per-filter moments of normalized features for one layer."""

    layer_id: str
    means: np.ndarray
    stds: np.ndarray
    mode: str
    group_id: object  # extraneous id, or "ALL"
    sample_count: int

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        if self.means.shape != self.stds.shape or self.means.ndim != 1:
            raise DataError("means and stds must be aligned 1-d arrays")
        if self.sample_count < 2:
            raise DataError("moment estimates need at least 2 samples")

    @property
    def filter_count(self):
        return self.means.shape[0]


class _MomentAccumulator:
    """Streaming per-channel count/sum/sum-of-squares."""

    def __init__(self):
        self.n = 0
        self.s = None
        self.sq = None

    def add(self, values):
        axes = tuple(a for a in range(values.ndim) if a != 1)
        count = values.size // values.shape[1]
        s = values.sum(axis=axes, dtype=np.float64)
        sq = (values.astype(np.float64) ** 2).sum(axis=axes)
        if self.s is None:
            self.s, self.sq = s, sq
        else:
            self.s += s
            self.sq += sq
        self.n += count

    def moments(self):
        mean = self.s / self.n
        var = np.maximum(self.sq / self.n - mean**2, 0.0)
        return mean, np.sqrt(var)


def _select_layers(model, layers):
    norm = dict(model.norm_layers())
    if layers is None:
        return [(n, l) for n, l in model.norm_layers()]
    out = []
    for name in layers:
        if name not in norm:
            raise DataError(f"{name!r} is not a normalization layer")
        out.append((name, norm[name]))
    return out


def _stats_of(values, statistic):
    """Batch-style statistics of a captured activation block (float64)."""
    values = values.astype(np.float64)
    axes = reduction_axes(Averaging.BATCH, values.ndim)
    if Statistic(statistic) is Statistic.MEAN_STD:
        return values.mean(axis=axes), values.var(axis=axes)
    return None, np.mean(values * values, axis=axes)


def collect_normalized_moments(model, dataset, stats_source, layers=None,
                               batch_size=64, group_id="ALL"):
    """Per-filter moments of normalized layer inputs over a dataset.

    Returns one MomentReport per selected normalization layer. The network
    propagates activations with the same statistics that are being measured,
    so deeper layers see exactly what the corresponding deployment would
    produce.
    """
    if len(dataset) == 0:
        raise DataError("cannot diagnose an empty dataset")
    selected = _select_layers(model, layers)
    names = [n for n, _ in selected]

    if isinstance(stats_source, FromReference):
        ref = stats_source.reference
        if len(ref) < 1:
            raise DataError("reference subset is empty")
        # One whole-subset batch, so captured inputs see exactly the
        # statistics the layers used to propagate.
        ref_caps = {}
        model.forward(ref.tensors, Mode.EVAL_ADAPTIVE, averaging=Averaging.BATCH,
                      capture_inputs=names, captured_out=ref_caps)
        overrides = {}
        for name, layer in selected:
            block = np.concatenate(ref_caps[name], axis=0)
            overrides[name] = _stats_of(block, layer.spec.statistic)
        mode_label = "adaptive_group_stats"

        caps = {}
        model.forward(dataset.tensors, Mode.EVAL_ADAPTIVE, averaging=Averaging.BATCH,
                      capture_inputs=names, stat_overrides=overrides, captured_out=caps)
    elif stats_source == TRAIN_RUNNING:
        overrides = {}
        for name, layer in selected:
            if layer.state.updates_seen < 1:
                raise StateError(
                    f"layer {name!r} has no running statistics to diagnose"
                )
            if layer.spec.statistic is Statistic.MEAN_STD:
                overrides[name] = (layer.state.running_mean, layer.state.running_sq)
            else:
                overrides[name] = (None, layer.state.running_sq)
        mode_label = "train_running"
        caps = {}
        for start in range(0, len(dataset), batch_size):
            model.forward(dataset.tensors[start : start + batch_size],
                          Mode.EVAL_NON_ADAPTIVE, capture_inputs=names,
                          captured_out=caps)
    else:
        raise DataError(f"unknown statistics source {stats_source!r}")

    reports = []
    for name, layer in selected:
        acc = _MomentAccumulator()
        mean, second = overrides[name]
        for block in caps[name]:
            cshape = (1, block.shape[1]) + (1,) * (block.ndim - 2)
            mean_r = None if mean is None else np.asarray(mean, dtype=np.float64).reshape(cshape)
            second_r = np.asarray(second, dtype=np.float64).reshape(cshape)
            xhat, _ = normalize_with_stats(block.astype(np.float64), mean_r, second_r,
                                           layer.spec.epsilon, layer.spec.statistic)
            acc.add(xhat)
        m, s = acc.moments()
        reports.append(MomentReport(name, m, s, mode_label, group_id, len(dataset)))
    return reports


def half_split_protocol(model, dataset, seed, layers=None):
    """Reference-normalize each extraneous group against its own half.

    For every group: shuffle, estimate statistics on the first half, measure
    the second half. Returns the per-layer reports for every group,
    group-major. Groups need at least 2 samples.
    """
    reports = []
    for gid, indices in sorted(dataset.group_indices().items()):
        if len(indices) < 2:
            raise DataError(f"extraneous group {gid} has {len(indices)} sample(s), need >= 2")
        perm = make_rng(seed, STREAM_HALF_SPLIT, gid).permutation(len(indices))
        shuffled = indices[perm]
        half = len(indices) // 2
        ref = dataset.subset(shuffled[:half])
        eval_part = dataset.subset(shuffled[half:])
        reports.extend(
            collect_normalized_moments(
                model, eval_part, FromReference(ref), layers=layers, group_id=int(gid)
            )
        )
    return reports


def concentration_metric(reports, tau_mean=0.1, tau_std=0.15):
    """Fractions of filters with |mean| < tau_mean and |std - 1| < tau_std.

    Accepts one report or a list; filters pool across reports.
    """
    if isinstance(reports, MomentReport):
        reports = [reports]
    if not reports:
        raise DataError("no reports to summarize")
    means = np.concatenate([r.means for r in reports])
    stds = np.concatenate([r.stds for r in reports])
    frac_mean_ok = float(np.mean(np.abs(means) < tau_mean))
    frac_std_ok = float(np.mean(np.abs(stds - 1.0) < tau_std))
    return frac_mean_ok, frac_std_ok


MEAN_RANGE = (-1.5, 1.5)
STD_RANGE = (0.0, 3.0)


@dataclass
class Histogram:
    """Uniform-bin counts plus explicit under/overflow."""

    edges: np.ndarray
    counts: np.ndarray
    underflow: int
    overflow: int

    @classmethod
    def from_values(cls, values, lo, hi, bins=50):
        values = np.asarray(values, dtype=np.float64)
        if bins < 1 or not hi > lo:
            raise DataError("need bins >= 1 and hi > lo")
        edges = np.linspace(lo, hi, bins + 1)
        counts, _ = np.histogram(values, bins=edges)
        under = int((values < lo).sum())
        over = int((values > hi).sum())
        # np.histogram puts values == hi into the last bin and drops
        # everything outside [lo, hi]; the two extra rows keep totals exact.
        return cls(edges, counts.astype(np.int64), under, over)

    @property
    def total(self):
        return int(self.counts.sum()) + self.underflow + self.overflow


def _hist_csv_path(out_dir, report, metric):
    safe_layer = report.layer_id.replace(".", "-")
    return os.path.join(out_dir, f"hist_{report.mode}_g{report.group_id}_{safe_layer}_{metric}.csv")


def _write_hist_csv(path, hist):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "count"])
        w.writerow(["-inf", repr(float(hist.edges[0])), hist.underflow])
        for i in range(len(hist.counts)):
            w.writerow([repr(float(hist.edges[i])), repr(float(hist.edges[i + 1])), int(hist.counts[i])])
        w.writerow([repr(float(hist.edges[-1])), "inf", hist.overflow])


def _hist_svg(hist, title):
    """Minimal standalone bar chart, 800x400 viewport."""
    width, height = 800, 400
    ml, mr, mt, mb = 50, 20, 30, 40
    plot_w, plot_h = width - ml - mr, height - mt - mb
    peak = max(int(hist.counts.max()) if len(hist.counts) else 0, 1)
    nbins = len(hist.counts)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
    ]
    bw = plot_w / nbins
    for i, count in enumerate(hist.counts):
        if count == 0:
            continue
        h = plot_h * (int(count) / peak)
        x = ml + i * bw
        y = mt + plot_h - h
        parts.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{bw:.2f}" height="{h:.2f}" fill="#4878a8"/>'
        )
    parts.append(
        f'<line x1="{ml}" y1="{mt + plot_h}" x2="{ml + plot_w}" y2="{mt + plot_h}" stroke="black"/>'
    )
    parts.append(
        f'<text x="{ml}" y="{height - 10}" font-size="12">{hist.edges[0]:g}</text>'
    )
    parts.append(
        f'<text x="{ml + plot_w}" y="{height - 10}" text-anchor="end" font-size="12">{hist.edges[-1]:g}</text>'
    )
    parts.append(f'<text x="5" y="{mt + 5}" font-size="12">{peak}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def emit_report(reports, out_dir, bins=50, svg=False):
    """Write per-report histogram CSVs, a summary CSV, and optional SVGs.

    Means histogram over [-1.5, 1.5], stds over [0, 3], `bins` uniform bins
    plus explicit underflow/overflow rows so counts always sum to the filter
    count. Returns the written paths, deterministically ordered.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    summary_rows = []
    for report in reports:
        for metric, values, (lo, hi) in (
            ("mean", report.means, MEAN_RANGE),
            ("std", report.stds, STD_RANGE),
        ):
            hist = Histogram.from_values(values, lo, hi, bins)
            path = _hist_csv_path(out_dir, report, metric)
            _write_hist_csv(path, hist)
            paths.append(path)
            if svg:
                svg_path = path[:-4] + ".svg"
                title = f"{report.mode} group {report.group_id} {report.layer_id} {metric}"
                with open(svg_path, "w") as fh:
                    fh.write(_hist_svg(hist, title))
                paths.append(svg_path)
        frac_mean_ok, frac_std_ok = concentration_metric(report)
        summary_rows.append(
            [report.layer_id, report.mode, report.group_id, report.sample_count,
             report.filter_count, repr(frac_mean_ok), repr(frac_std_ok)]
        )
    summary_path = os.path.join(out_dir, "summary.csv")
    with open(summary_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "mode", "group", "sample_count", "filters",
                    "frac_mean_ok", "frac_std_ok"])
        w.writerows(summary_rows)
    paths.append(summary_path)
    return paths
