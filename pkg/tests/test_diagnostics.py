"""Moment diagnostics: accumulators, protocols, histograms, and reports."""

import csv
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from adanorm.diagnostics import (
    MEAN_RANGE,
    STD_RANGE,
    TRAIN_RUNNING,
    FromReference,
    Histogram,
    MomentReport,
    collect_normalized_moments,
    concentration_metric,
    emit_report,
    half_split_protocol,
)
from adanorm.errors import DataError, StateError
from adanorm.models import build_model

from conftest import tiny_model_config


# ------------------------------------------------------------ moment report


def test_moment_report_validation():
    rep = MomentReport("L", [0.0, 0.1], [1.0, 0.9], "m", "ALL", 10)
    assert rep.filter_count == 2
    with pytest.raises(DataError, match="aligned"):
        MomentReport("L", [0.0, 0.1], [1.0], "m", "ALL", 10)
    with pytest.raises(DataError, match="2 samples"):
        MomentReport("L", [0.0], [1.0], "m", "ALL", 1)


def test_concentration_hand_values():
    rep = MomentReport("L", [0.0, 0.05, 0.2], [1.0, 1.2, 0.5], "m", "ALL", 9)
    fm, fs = concentration_metric(rep)
    assert fm == pytest.approx(2 / 3)
    assert fs == pytest.approx(1 / 3)
    # custom taus and pooling across reports
    fm, fs = concentration_metric([rep, rep], tau_mean=0.25, tau_std=0.3)
    assert fm == 1.0
    assert fs == pytest.approx(2 / 3)
    with pytest.raises(DataError):
        concentration_metric([])


# ------------------------------------------------------- collection protocol


def test_self_reference_moments_vanish(tiny_trained, tiny_splits):
    """Statistics estimated on the measured data itself center it exactly.

    The float32 model leaves ~1e-6 of propagation rounding; the float64
    variant pins the identity to 1e-12.
    """
    model, _ = tiny_trained
    ds = tiny_splits["test"]
    reports = collect_normalized_moments(model, ds, FromReference(ds))
    assert len(reports) == len(model.norm_layers())
    for rep in reports:
        assert np.all(np.abs(rep.means) < 1e-5), rep.layer_id
        # epsilon keeps normalized stds at or slightly below 1
        assert np.all(rep.stds <= 1.0 + 1e-6), rep.layer_id
        assert rep.mode == "adaptive_group_stats"
        assert rep.sample_count == len(ds)

    f64 = build_model(tiny_model_config(seed=8, dtype="float64"))
    reports = collect_normalized_moments(
        f64, tiny_splits["test"], FromReference(tiny_splits["test"])
    )
    for rep in reports:
        assert np.all(np.abs(rep.means) < 1e-12), rep.layer_id
        assert np.all(rep.stds <= 1.0 + 1e-12), rep.layer_id


def test_train_running_is_batch_size_invariant(tiny_trained, tiny_splits):
    model, _ = tiny_trained
    ds = tiny_splits["test"]
    a = collect_normalized_moments(model, ds, TRAIN_RUNNING, batch_size=16)
    b = collect_normalized_moments(model, ds, TRAIN_RUNNING, batch_size=64)
    for ra, rb in zip(a, b):
        assert ra.layer_id == rb.layer_id
        assert np.allclose(ra.means, rb.means, atol=1e-12)
        assert np.allclose(ra.stds, rb.stds, atol=1e-12)


def test_layer_selection_and_errors(tiny_trained, tiny_splits):
    model, _ = tiny_trained
    ds = tiny_splits["test"]
    names = [n for n, _ in model.norm_layers()]
    reports = collect_normalized_moments(model, ds, TRAIN_RUNNING, layers=names[:2])
    assert [r.layer_id for r in reports] == names[:2]
    with pytest.raises(DataError, match="not a normalization layer"):
        collect_normalized_moments(model, ds, TRAIN_RUNNING, layers=["head.weight"])
    with pytest.raises(DataError, match="empty"):
        collect_normalized_moments(model, ds.subset(np.arange(0)), TRAIN_RUNNING)
    with pytest.raises(DataError, match="statistics source"):
        collect_normalized_moments(model, ds, "fresh")


def test_untrained_model_has_no_running_stats(tiny_splits):
    model = build_model(tiny_model_config(seed=8))
    with pytest.raises(StateError, match="running statistics"):
        collect_normalized_moments(model, tiny_splits["test"], TRAIN_RUNNING)


def test_half_split_reports_per_group(tiny_trained, tiny_splits):
    model, _ = tiny_trained
    pooled = tiny_splits["pooled"]  # four subjects
    layer_count = len(model.norm_layers())
    reports = half_split_protocol(model, pooled, seed=3)
    assert len(reports) == 4 * layer_count
    assert sorted({r.group_id for r in reports}) == [0, 1, 2, 3]
    again = half_split_protocol(model, pooled, seed=3)
    for ra, rb in zip(reports, again):
        assert np.array_equal(ra.means, rb.means)
    other = half_split_protocol(model, pooled, seed=4)
    assert any(
        not np.allclose(ra.means, rb.means) for ra, rb in zip(reports, other)
    )


def test_half_split_needs_two_samples_per_group(tiny_trained, tiny_splits):
    model, _ = tiny_trained
    pooled = tiny_splits["pooled"]
    keep = np.concatenate([np.nonzero(pooled.extraneous == 0)[0],
                           np.nonzero(pooled.extraneous == 1)[0][:1]])
    broken = pooled.subset(keep)
    with pytest.raises(DataError, match="need >= 2"):
        half_split_protocol(model, broken, seed=0)


# ----------------------------------------------------------------- histogram


def test_histogram_conserves_counts():
    values = np.asarray([-2.0, -1.5, 0.0, 0.2, 1.5, 9.0])
    hist = Histogram.from_values(values, -1.5, 1.5, bins=3)
    # -2 underflows, 9 overflows, 1.5 lands in the last bin    (numpy rule)
    assert hist.underflow == 1
    assert hist.overflow == 1
    assert hist.counts.sum() == 4
    assert hist.total == len(values)
    assert hist.counts.tolist() == [1, 2, 1]


def test_histogram_validation():
    with pytest.raises(DataError):
        Histogram.from_values([0.0], 0.0, 0.0)
    with pytest.raises(DataError):
        Histogram.from_values([0.0], 0.0, 1.0, bins=0)


# ------------------------------------------------------------------- reports


@pytest.fixture()
def small_reports():
    rng = np.random.default_rng(5)
    return [
        MomentReport("merged.block0.unit0.norm", rng.normal(0, 0.05, 30),
                     rng.normal(1, 0.05, 30), TRAIN_RUNNING, "ALL", 40),
        MomentReport("trunk.ch0.block0.unit0.norm", rng.normal(0.4, 0.3, 30),
                     rng.normal(1, 0.4, 30), TRAIN_RUNNING, 2, 40),
    ]


def test_emit_report_writes_csvs(tmp_path, small_reports):
    paths = emit_report(small_reports, str(tmp_path), bins=10)
    assert len(paths) == 2 * len(small_reports) + 1
    # layer dots are sanitized so each report maps to one flat file
    mean_path = str(tmp_path / "hist_train_running_gALL_merged-block0-unit0-norm_mean.csv")
    assert mean_path in paths
    with open(mean_path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["bin_left", "bin_right", "count"]
    assert rows[1][0] == "-inf"
    assert rows[-1][1] == "inf"
    total = sum(int(r[2]) for r in rows[1:])
    assert total == 30
    lo = float(rows[2][0])
    hi = float(rows[-2][1])
    assert (lo, hi) == MEAN_RANGE

    with open(tmp_path / "summary.csv", newline="") as fh:
        srows = list(csv.reader(fh))
    assert srows[0][:3] == ["layer", "mode", "group"]
    assert len(srows) == 1 + len(small_reports)
    for row in srows[1:]:
        assert 0.0 <= float(row[5]) <= 1.0
        assert 0.0 <= float(row[6]) <= 1.0


def test_emit_report_svg_well_formed(tmp_path, small_reports):
    paths = emit_report(small_reports[:1], str(tmp_path), bins=8, svg=True)
    svg_paths = [p for p in paths if p.endswith(".svg")]
    assert len(svg_paths) == 2
    for path in svg_paths:
        root = ET.parse(path).getroot()
        assert root.tag.endswith("svg")
        assert root.attrib["width"] == "800"
        assert root.attrib["height"] == "400"
        bars = [e for e in root.iter() if e.tag.endswith("rect")]
        assert len(bars) >= 2  # background plus at least one bin

    std_path = str(tmp_path / "hist_train_running_gALL_merged-block0-unit0-norm_std.csv")
    with open(std_path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert float(rows[2][0]) == STD_RANGE[0]
