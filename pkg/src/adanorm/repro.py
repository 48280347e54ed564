"""Self-contained acceptance suite: one method per shipped guarantee.

Each criterion method builds (or reuses from the in-process cache) the
fixed benchmark it needs, measures the quantity the guarantee is stated
over, and returns a CriterionResult with the measured numbers in the
note. `run_all` executes A1..A8 in order. Everything is seeded, so two
runs on the same machine produce identical numbers.

The benchmark scale is deliberately small: six-channel synthetic sensor
recordings, eight simulated subjects, five classes, and a two-block
dense model. That is enough structure for the adaptation effects to be
large and stable while keeping the full suite in the minutes range.
"""

from __future__ import annotations

import dataclasses
import io
import os
import time

import numpy as np

from . import data as data_mod
from .data import (
    TaggedDataset,
    corrupt_dataset,
    generate_synthetic_sensor,
    load_idx,
    split_by_extraneous,
    standardize_per_dim,
    window_dataset,
)
from .diagnostics import (
    TRAIN_RUNNING,
    collect_normalized_moments,
    concentration_metric,
    half_split_protocol,
)
from .errors import FormatError
from .invariance import (
    FeatureBank,
    extract_features,
    model_digest,
    run_invariance,
)
from .models import (
    ImageArch,
    Mode,
    ModelConfig,
    SensorArch,
    build_model,
    checkpoint_read,
    checkpoint_write,
)
from .normalization import (
    Averaging,
    NormSpec,
    NormState,
    Scheme,
    Statistic,
    enumerate_valid_configs,
    norm_forward_eval,
    norm_forward_train,
)
from .optim import LrSchedule, TrainConfig, evaluate, train
from .rng import make_rng
from .tensor import (
    FeatureTensor,
    Tape,
    backward,
    concat,
    convolve,
    finite_diff_grad,
    global_avg_pool,
    linear,
    moment_stats,
    multiply,
    reduce_sum,
    relative_error,
    relu,
    slice_axis,
    softmax_cross_entropy,
)

FD_STEP = 1e-5
OP_TOL = 1e-4
MODEL_TOL = 1e-3
CHANCE_SIGMA = 3.0

BENCH_DATA = dict(
    classes=5,
    subjects=8,
    channels=6,
    steps_per_recording=1225,
    recordings_per_subject=30,
    window=200,
    noise_level=0.1,
)
# Recordings per subject used for training windows; the rest exist only to
# densify held-out moment diagnostics, where estimator noise would
# otherwise dominate the concentration metric.
TRAIN_RECORDINGS = 6
TRAIN_STRIDE = 50
EVAL_STRIDE = 200
PROBE_STRIDE = 100
BENCH_SEEDS = (0, 1, 2)
# Forward-only passes that re-center running stats after training. The
# best-validation snapshot usually predates the final epochs, so its EMA
# buffers were accumulated under different weights; at momentum 0.1 a few
# passes at frozen weights leave <0.1% of that stale history.
STAT_PASSES = 3

FASHION_ENV = "ADANORM_FASHION_MNIST"
FASHION_FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


@dataclasses.dataclass
class CriterionResult:
    """Outcome of one acceptance criterion.

    passed is True/False for executed criteria and None when the
    criterion was skipped (only A8, when the optional image corpus is
    not on disk).
    """

    criterion: str
    passed: bool | None
    note: str
    seconds: float = 0.0

    @property
    def status(self) -> str:
        if self.passed is None:
            return "SKIP"
        return "PASS" if self.passed else "FAIL"


def _bench_model_config(seed: int) -> ModelConfig:
    return ModelConfig(
        task="sensor_seq",
        input_channels=BENCH_DATA["channels"],
        num_classes=BENCH_DATA["classes"],
        sensor=SensorArch(
            per_channel_blocks=1,
            merged_blocks=1,
            convs_per_block=2,
            per_channel_growth=6,
            merged_growth=20,
            kernel_size=11,
        ),
        seed=seed,
    )


def _bench_train_config(seed: int, eval_scheme: str) -> TrainConfig:
    return TrainConfig(
        epochs=16,
        batch_size=32,
        schedule=LrSchedule(mode="fixed", breakpoints=((0, 5e-3), (12, 5e-4))),
        early_stop_patience=16,
        eval_scheme=eval_scheme,
        seed=seed,
    )


def _norm_spec_for(averaging: str) -> NormSpec:
    if averaging == "batch":
        return NormSpec(Scheme.NON_ADAPTIVE, Averaging.BATCH, Statistic.MEAN_STD)
    return NormSpec(Scheme.ADAPTIVE, Averaging.INSTANCE, Statistic.MEAN_STD)


class ReproSuite:
    """Runs the acceptance criteria with shared, cached intermediates.

    Datasets and trained models are cached per (severity, seed) so the
    criteria that reuse the same artifacts (A2/A3/A5 lean on A4's
    trainings) pay for them once. `seed` offsets every internal stream;
    the default of 0 reproduces the published numbers.
    """

    def __init__(self, out_dir=None, seed: int = 0, threads: int = 1):
        self.out_dir = out_dir
        self.seed = int(seed)
        self.threads = max(1, int(threads))
        self._datasets: dict = {}
        self._models: dict = {}

    # ---------------------------------------------------------------- data

    def dataset(self, severity: float, seed: int) -> dict:
        """Benchmark splits for one (severity, seed) cell.

        Returns train/val/test window datasets (train stride 50, eval
        stride 200), a densely windowed copy of the test group for
        moment diagnostics, a stride-100 all-subject window set for
        feature probing, and the per-dim standardization stats.

        Training sees only the first TRAIN_RECORDINGS recordings of each
        training subject; held-out subjects contribute all of theirs so
        the diagnostic moment estimates are not noise-limited.
        """
        key = (round(float(severity), 6), int(seed))
        if key in self._datasets:
            return self._datasets[key]
        recordings = generate_synthetic_sensor(
            severity=severity, seed=self.seed + seed, **BENCH_DATA
        )
        n = BENCH_DATA["subjects"]
        per = BENCH_DATA["recordings_per_subject"]

        def rows(subjects, recs):
            return [s * per + r for s in subjects for r in recs]

        first = range(TRAIN_RECORDINGS)
        train_rec = recordings.subset(rows(range(n - 2), first))
        val_rec = recordings.subset(rows([n - 2], first))
        test_rec = recordings.subset(rows([n - 1], range(per)))
        probe_rec = recordings.subset(rows(range(n), first))

        window = BENCH_DATA["window"]
        train = window_dataset(train_rec, window, TRAIN_STRIDE)
        train, stats = standardize_per_dim(train)
        val = standardize_per_dim(window_dataset(val_rec, window, EVAL_STRIDE), stats)[0]
        test = standardize_per_dim(window_dataset(test_rec, window, EVAL_STRIDE), stats)[0]
        diag = standardize_per_dim(window_dataset(test_rec, window, TRAIN_STRIDE), stats)[0]
        probe = standardize_per_dim(
            window_dataset(probe_rec, window, PROBE_STRIDE), stats
        )[0]
        out = dict(train=train, val=val, test=test, diag=diag, probe=probe, stats=stats)
        self._datasets[key] = out
        return out

    def trained(self, averaging: str, severity: float, seed: int):
        """Model trained on the benchmark cell, plus its history."""
        key = (averaging, round(float(severity), 6), int(seed))
        if key in self._models:
            return self._models[key]
        splits = self.dataset(severity, seed)
        cfg = dataclasses.replace(
            _bench_model_config(self.seed + seed), norm=_norm_spec_for(averaging)
        )
        model = build_model(cfg)
        eval_scheme = "non_adaptive" if averaging == "batch" else "adaptive_instance"
        tc = _bench_train_config(self.seed + seed, eval_scheme)
        model, history = train(model, splits["train"], splits["val"], tc)
        if averaging == "batch":
            # Only frozen-stat eval reads the running buffers, and only
            # batch-averaged models are ever evaluated that way.
            self._recalibrate(model, splits["train"], tc.batch_size)
        self._models[key] = (model, history)
        return self._models[key]

    @staticmethod
    def _recalibrate(model, train_set, batch_size):
        for _ in range(STAT_PASSES):
            for start in range(0, len(train_set), batch_size):
                xb = train_set.tensors[start : start + batch_size]
                model.forward(FeatureTensor(xb), Mode.TRAIN)

    def test_accuracy(self, averaging: str, severity: float, seed: int, scheme: str):
        model, _ = self.trained(averaging, severity, seed)
        splits = self.dataset(severity, seed)
        return evaluate(model, splits["test"], scheme)

    # ------------------------------------------------------------ A1: grads

    def a1_gradient_fidelity(self) -> CriterionResult:
        """Analytic gradients against central finite differences (64-bit)."""
        t0 = time.perf_counter()
        rng = make_rng(self.seed, 11)
        worst_ops = 0.0
        shapes = 0

        def check(build, arrays):
            nonlocal worst_ops, shapes
            with Tape() as tape:
                ts = [tape.watch(FeatureTensor(a.copy())) for a in arrays]
                loss = build(*ts)
                grads = backward(tape, loss)
                got = [grads[t.tape_id] for t in ts]
            for i, a in enumerate(arrays):
                def partial(xt, i=i):
                    args = [
                        xt if j == i else FeatureTensor(arrays[j].copy())
                        for j in range(len(arrays))
                    ]
                    return build(*args)

                fd = finite_diff_grad(partial, FeatureTensor(a.copy()), FD_STEP)
                worst_ops = max(worst_ops, relative_error(got[i], fd))
            shapes += 1

        def rnd(*shape):
            return rng.standard_normal(shape).astype(np.float64)

        def proj(shape):
            r = rng.standard_normal(shape)
            return lambda t: reduce_sum(multiply(t, FeatureTensor(r)))

        for _ in range(8):
            b, ci, co, s, k = (
                int(rng.integers(1, 4)),
                int(rng.integers(1, 4)),
                int(rng.integers(1, 4)),
                int(rng.integers(5, 10)),
                int(rng.integers(1, 3)) * 2 + 1,
            )
            stride = int(rng.integers(1, 3))
            pad = k // 2
            out_s = (s + 2 * pad - k) // stride + 1
            p = proj((b, co, out_s))
            check(
                lambda x, w, bias, p=p, stride=stride, pad=pad: p(
                    convolve(x, w, bias, stride=stride, padding=pad)
                ),
                [rnd(b, ci, s), rnd(co, ci, k) * 0.5, rnd(co) * 0.1],
            )
        for _ in range(6):
            b, ci, co, h, w = (
                int(rng.integers(1, 3)),
                int(rng.integers(1, 3)),
                int(rng.integers(1, 4)),
                int(rng.integers(4, 8)),
                int(rng.integers(4, 8)),
            )
            k = 3
            p = proj((b, co, h, w))
            check(
                lambda x, wt, bias, p=p: p(convolve(x, wt, bias, stride=1, padding=1)),
                [rnd(b, ci, h, w), rnd(co, ci, k, k) * 0.4, rnd(co) * 0.1],
            )
        for _ in range(8):
            b, fi, fo = (
                int(rng.integers(1, 6)),
                int(rng.integers(1, 7)),
                int(rng.integers(1, 7)),
            )
            p = proj((b, fo))
            check(
                lambda x, w, bias, p=p: p(linear(x, w, bias)),
                [rnd(b, fi), rnd(fo, fi) * 0.5, rnd(fo) * 0.1],
            )
        for _ in range(8):
            shape = tuple(int(rng.integers(2, 5)) for _ in range(int(rng.integers(1, 4))))
            x = rnd(*shape)
            x += np.sign(x) * 0.2  # keep coordinates away from the kink
            p = proj(shape)
            check(lambda t, p=p: p(relu(t)), [x])
        for _ in range(6):
            b, c, s = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(3, 9))
            p = proj((b, c))
            check(lambda t, p=p: p(global_avg_pool(t)), [rnd(b, c, s)])
        for _ in range(6):
            b, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
            sa, sb = int(rng.integers(2, 6)), int(rng.integers(2, 6))
            p = proj((b, c * 2, sa))
            check(
                lambda u, v, p=p: p(concat([u, v], axis=1)),
                [rnd(b, c, sa), rnd(b, c, sa)],
            )
            p2 = proj((b, c, 2))
            check(lambda t, p2=p2: p2(slice_axis(t, 2, 1, 3)), [rnd(b, c, sb + 3)])
        for _ in range(8):
            b, k = int(rng.integers(2, 7)), int(rng.integers(2, 6))
            labels = rng.integers(0, k, size=b)
            check(
                lambda t, labels=labels: softmax_cross_entropy(
                    t, np.asarray(labels)
                ),
                [rnd(b, k)],
            )

        for spec in enumerate_valid_configs():
            for _ in range(12):
                if int(rng.integers(0, 2)):
                    shape = (int(rng.integers(2, 5)), int(rng.integers(1, 4)),
                             int(rng.integers(3, 8)))
                else:
                    shape = (int(rng.integers(2, 4)), int(rng.integers(1, 3)),
                             int(rng.integers(3, 6)), int(rng.integers(3, 6)))
                c = shape[1]
                x = rnd(*shape)
                gamma = rnd(c) * 0.3 + 1.0
                beta = rnd(c) * 0.3
                p = proj(shape)

                def build(xt, gt, bt, spec=spec, p=p):
                    state = NormState(
                        xt.data.shape[1], spec.statistic, dtype=np.float64
                    )
                    state.gamma = gt
                    state.beta = bt
                    y, _ = norm_forward_train(xt, spec, state)
                    return p(y)

                check(build, [x, gamma, beta])

        worst_model = self._a1_full_model(rng)
        dt = time.perf_counter() - t0
        ok = worst_ops < OP_TOL and worst_model < MODEL_TOL
        note = (
            f"{shapes} shapes, worst op/norm rel err {worst_ops:.3e} "
            f"(tol {OP_TOL:.0e}); full model worst {worst_model:.3e} "
            f"(tol {MODEL_TOL:.0e})"
        )
        return CriterionResult("A1", ok, note, dt)

    def _a1_full_model(self, rng) -> float:
        cfg = ModelConfig(
            task="sensor_seq",
            input_channels=2,
            num_classes=3,
            sensor=SensorArch(1, 1, 2, 3, 4, 3),
            seed=self.seed + 7,
            dtype="float64",
        )
        model = build_model(cfg)
        x = rng.standard_normal((2, 2, 12))
        labels = rng.integers(0, 3, size=(2, 12))

        def loss_value():
            out = model.forward(FeatureTensor(x.copy()), Mode.TRAIN)
            return softmax_cross_entropy(out, labels)

        params = model.named_parameters()
        with Tape() as tape:
            xt = tape.watch(FeatureTensor(x.copy()))
            for _, p in params:
                tape.watch(p)
            out = model.forward(xt, Mode.TRAIN)
            loss = softmax_cross_entropy(out, labels)
            grads = backward(tape, loss)
            got = {name: grads[p.tape_id] for name, p in params}
            got["__input__"] = grads[xt.tape_id]

        # Conv biases that feed a mean-subtracting norm layer have an exactly
        # zero gradient (a constant channel shift is removed by the mean), so
        # both sides sit at the fd noise floor (~machine eps / h). Flooring
        # the denominator keeps those comparisons from reading as 100% error.
        def floored(a, b, floor=1e-6):
            a = np.asarray(a, np.float64)
            b = np.asarray(b, np.float64)
            denom = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
            return float(np.linalg.norm(a - b) / denom)

        worst = 0.0
        for name, p in params:
            def f(pt, p=p):
                keep = p.data
                p.data = pt.data
                try:
                    return loss_value()
                finally:
                    p.data = keep

            fd = finite_diff_grad(f, FeatureTensor(p.data.copy()), FD_STEP)
            worst = max(worst, floored(got[name], fd))

        def f_in(xt):
            out = model.forward(xt, Mode.TRAIN)
            return softmax_cross_entropy(out, labels)

        fd = finite_diff_grad(f_in, FeatureTensor(x.copy()), FD_STEP)
        worst = max(worst, floored(got["__input__"], fd))
        return worst

    # ----------------------------------------------------- A2/A3: diagnostics

    def _concentration(self, model, dataset, source, seed=0):
        if source == TRAIN_RUNNING:
            reports = collect_normalized_moments(model, dataset, TRAIN_RUNNING)
        else:
            reports = half_split_protocol(model, dataset, seed=seed)
        return concentration_metric(reports)

    def a2_matched_concentration(self) -> CriterionResult:
        """Frozen-stat moments concentrate on matched-distribution data."""
        t0 = time.perf_counter()
        model, _ = self.trained("batch", 0.0, 0)
        splits = self.dataset(0.0, 0)
        fm, fs = self._concentration(model, splits["diag"], TRAIN_RUNNING)
        ok = fm >= 0.95 and fs >= 0.95
        note = f"frac_mean_ok={fm:.3f}, frac_std_ok={fs:.3f} (need >=0.95 each)"
        return CriterionResult("A2", ok, note, time.perf_counter() - t0)

    def a3_shift_detection(self) -> CriterionResult:
        """Shift de-concentrates frozen stats; half-split restores them."""
        t0 = time.perf_counter()
        base_model, _ = self.trained("batch", 0.0, 0)
        base = self._concentration(base_model, self.dataset(0.0, 0)["diag"], TRAIN_RUNNING)
        model, _ = self.trained("batch", 0.8, 0)
        diag = self.dataset(0.8, 0)["diag"]
        fm_shift, fs_shift = self._concentration(model, diag, TRAIN_RUNNING)
        drop = base[0] - fm_shift
        fm_half, fs_half = self._concentration(model, diag, "half_split", seed=self.seed)
        ok = drop >= 0.2 and fm_half >= 0.95 and fs_half >= 0.90
        note = (
            f"frac_mean_ok {base[0]:.3f}->{fm_shift:.3f} (drop {drop:.3f}, need >=0.2); "
            f"half-split mean {fm_half:.3f} (>=0.95), std {fs_half:.3f} (>=0.90)"
        )
        return CriterionResult("A3", ok, note, time.perf_counter() - t0)

    # ------------------------------------------------- A4/A5: accuracy gaps

    def _seed_avg(self, averaging, severity, scheme):
        return float(
            np.mean(
                [self.test_accuracy(averaging, severity, s, scheme) for s in BENCH_SEEDS]
            )
        )

    def a4_shift_recovery(self) -> CriterionResult:
        """Adaptive eval beats frozen stats by >=5 points under shift."""
        t0 = time.perf_counter()
        na = self._seed_avg("batch", 0.8, "non_adaptive")
        ab = self._seed_avg("batch", 0.8, "adaptive_batch")
        ai = self._seed_avg("instance", 0.8, "adaptive_instance")
        ok = (ai - na) >= 0.05 and (ab - na) >= 0.05
        note = (
            f"non_adaptive={na:.3f}, adaptive_batch={ab:.3f} (+{ab - na:.3f}), "
            f"adaptive_instance={ai:.3f} (+{ai - na:.3f}); need both gaps >=0.05"
        )
        return CriterionResult("A4", ok, note, time.perf_counter() - t0)

    def a5_no_shift_parity(self) -> CriterionResult:
        """Without shift, frozen stats give up at most 2 points."""
        t0 = time.perf_counter()
        na = self.test_accuracy("batch", 0.0, 0, "non_adaptive")
        ai = self.test_accuracy("instance", 0.0, 0, "adaptive_instance")
        ok = na >= ai - 0.02
        note = f"non_adaptive={na:.3f}, adaptive_instance={ai:.3f}; need na >= ai-0.02"
        return CriterionResult("A5", ok, note, time.perf_counter() - t0)

    # ------------------------------------------------------ A6: invariance

    def _probe_bank(self, averaging, severity, seed) -> FeatureBank:
        model, _ = self.trained(averaging, severity, seed)
        splits = self.dataset(severity, seed)
        scheme = "non_adaptive" if averaging == "batch" else "adaptive_instance"
        return extract_features(model, splits["probe"], "penultimate", scheme)

    def a6_extraneous_decoding(self) -> CriterionResult:
        """Instance-normalized features hide the extraneous id better."""
        t0 = time.perf_counter()
        accs = {"batch": [], "instance": []}
        chance = 1.0 / BENCH_DATA["subjects"]
        test_counts = []
        for s in BENCH_SEEDS:
            for averaging in ("batch", "instance"):
                bank = self._probe_bank(averaging, 0.8, s)
                res = run_invariance(bank, seed=self.seed + s)
                accs[averaging].append(res.decode_acc)
                test_counts.append(res.test_count)
        na_avg = float(np.mean(accs["batch"]))
        ai_avg = float(np.mean(accs["instance"]))

        bank = self._probe_bank("batch", 0.8, 0)
        rng = make_rng(self.seed, 61)
        control_bank = FeatureBank(
            features=rng.standard_normal(bank.features.shape).astype(np.float32),
            extraneous=bank.extraneous,
            extraneous_count=bank.extraneous_count,
            layer_id="random_control",
            eval_scheme="none",
            model_digest="control",
        )
        control = run_invariance(control_bank, seed=self.seed)
        sigma = np.sqrt(chance * (1 - chance) / control.test_count)
        control_ok = abs(control.decode_acc - chance) <= CHANCE_SIGMA * sigma

        ok = (
            ai_avg < na_avg
            and na_avg >= chance
            and ai_avg >= chance
            and control_ok
        )
        note = (
            f"decode acc: non_adaptive={na_avg:.3f}, adaptive_instance={ai_avg:.3f} "
            f"(chance {chance:.3f}); control={control.decode_acc:.3f} "
            f"within {CHANCE_SIGMA:.0f} sigma ({sigma:.3f}) of chance: {control_ok}"
        )
        return CriterionResult("A6", ok, note, time.perf_counter() - t0)

    # ----------------------------------------------------- A7: exact oracles

    def a7_exactness(self) -> CriterionResult:
        """Bit-exact and closed-form guarantees."""
        t0 = time.perf_counter()
        failures = []
        rng = make_rng(self.seed, 71)

        for spec in enumerate_valid_configs():
            x = rng.standard_normal((4, 3, 10)).astype(np.float32)
            state = NormState(3, spec.statistic)
            state.gamma = FeatureTensor(
                rng.standard_normal(3).astype(np.float32) * 0.2 + 1.0
            )
            state.beta = FeatureTensor(rng.standard_normal(3).astype(np.float32))
            y_train, _ = norm_forward_train(FeatureTensor(x.copy()), spec, state)
            eval_spec = dataclasses.replace(spec, scheme=Scheme.ADAPTIVE)
            y_eval = norm_forward_eval(FeatureTensor(x.copy()), eval_spec, state)
            if not np.array_equal(y_train.data, y_eval.data):
                failures.append(f"train/adaptive-eval mismatch for {spec}")

        for _ in range(5):
            x = rng.standard_normal((6, 4, 9))
            mean, var, msq = moment_stats(FeatureTensor(x), axes=(0, 2))
            gap = np.max(np.abs(msq.data - (var.data + mean.data**2)))
            if gap > 1e-10:
                failures.append(f"second-moment identity gap {gap:.2e}")

        cfg = ModelConfig(
            task="sensor_seq",
            input_channels=2,
            num_classes=3,
            sensor=SensorArch(1, 1, 2, 3, 4, 3),
            seed=self.seed + 72,
        )
        model = build_model(cfg)
        buf = io.BytesIO()
        checkpoint_write(model, buf)
        raw = buf.getvalue()
        model2 = checkpoint_read(io.BytesIO(raw))
        buf2 = io.BytesIO()
        checkpoint_write(model2, buf2)
        if buf2.getvalue() != raw:
            failures.append("checkpoint bytes changed across a read/write cycle")

        from .config import canonical_text, parse_config_text

        text = canonical_text(parse_config_text("[experiment]\nseed = 3\n"))
        if canonical_text(parse_config_text(text)) != text:
            failures.append("canonical config text is not a fixed point")

        import tempfile

        good_labels = b"\x00\x00\x08\x01" + (2).to_bytes(4, "big") + bytes(2)
        cases = {
            "bad magic": (b"\x00\x00\x09\x03" + bytes(12), good_labels),
            "truncated payload": (
                b"\x00\x00\x08\x03"
                + (2).to_bytes(4, "big") * 3
                + b"\x01\x02\x03",
                good_labels,
            ),
            "count mismatch": (
                b"\x00\x00\x08\x03"
                + (1).to_bytes(4, "big")
                + (2).to_bytes(4, "big") * 2
                + bytes(4),
                b"\x00\x00\x08\x01" + (5).to_bytes(4, "big") + bytes(5),
            ),
        }
        with tempfile.TemporaryDirectory() as tmp:
            for label, (img, lab) in cases.items():
                ipath = os.path.join(tmp, "images.idx")
                lpath = os.path.join(tmp, "labels.idx")
                with open(ipath, "wb") as fh:
                    fh.write(img)
                with open(lpath, "wb") as fh:
                    fh.write(lab)
                try:
                    load_idx(ipath, lpath)
                    failures.append(f"malformed input accepted: {label}")
                except FormatError:
                    pass

        rep1 = self._tiny_training_digest()
        rep2 = self._tiny_training_digest()
        if rep1 != rep2:
            failures.append("fixed-seed training is not bit-reproducible")

        ok = not failures
        note = "all exactness oracles hold" if ok else "; ".join(failures)
        return CriterionResult("A7", ok, note, time.perf_counter() - t0)

    def _tiny_training_digest(self):
        recordings = generate_synthetic_sensor(
            classes=3,
            subjects=3,
            channels=2,
            steps_per_recording=260,
            recordings_per_subject=2,
            severity=0.0,
            seed=self.seed + 73,
            window=64,
        )
        train_rec, val_rec, _ = split_by_extraneous(recordings, (0, 1), (2,), ())
        train_set = window_dataset(train_rec, 64, 32)
        train_set, stats = standardize_per_dim(train_set)
        val_set = standardize_per_dim(window_dataset(val_rec, 64, 64), stats)[0]
        cfg = ModelConfig(
            task="sensor_seq",
            input_channels=2,
            num_classes=3,
            sensor=SensorArch(1, 1, 1, 3, 6, 5),
            seed=self.seed + 74,
        )
        model = build_model(cfg)
        tc = TrainConfig(
            epochs=2,
            batch_size=16,
            schedule=LrSchedule(mode="fixed", breakpoints=((0, 1e-3),)),
            early_stop_patience=5,
            eval_scheme="non_adaptive",
            seed=self.seed + 75,
        )
        model, history = train(model, train_set, val_set, tc)
        buf = io.BytesIO()
        checkpoint_write(model, buf)
        curve = tuple((h.epoch, h.lr, h.train_loss, h.val_acc) for h in history)
        return (buf.getvalue(), curve)

    # --------------------------------------------------- A8: optional images

    def fashion_dir(self):
        root = os.environ.get(FASHION_ENV, "")
        if not root:
            return None
        if all(os.path.exists(os.path.join(root, f)) for f in FASHION_FILES):
            return root
        return None

    def a8_image_smoke(self) -> CriterionResult:
        """Optional: real-image corpus smoke test, skipped when absent."""
        t0 = time.perf_counter()
        root = self.fashion_dir()
        if root is None:
            note = (
                f"image corpus not found (set {FASHION_ENV} to a directory "
                f"holding {', '.join(FASHION_FILES)}); skipped"
            )
            return CriterionResult("A8", None, note, time.perf_counter() - t0)

        train_full = load_idx(
            os.path.join(root, FASHION_FILES[0]), os.path.join(root, FASHION_FILES[1])
        )
        test_full = load_idx(
            os.path.join(root, FASHION_FILES[2]), os.path.join(root, FASHION_FILES[3])
        )
        train_set = train_full.subset(np.arange(6000))
        val_set = train_full.subset(np.arange(6000, 7000))
        test_set = test_full.subset(np.arange(1000))

        cfg = ModelConfig(
            task="image",
            input_channels=1,
            num_classes=10,
            image=ImageArch(stage_widths=(12, 24, 48), convs_per_stage=1),
            seed=self.seed + 81,
        )
        model = build_model(cfg)
        tc = TrainConfig(
            epochs=5,
            batch_size=64,
            schedule=LrSchedule(mode="fixed", breakpoints=((0, 1e-3),)),
            early_stop_patience=5,
            eval_scheme="non_adaptive",
            seed=self.seed + 82,
        )
        model, _ = train(model, train_set, val_set, tc)
        clean_acc = evaluate(model, test_set, "non_adaptive")

        specs = [(kind, 3) for kind in data_mod.CORRUPTION_KINDS]
        corrupted = corrupt_dataset(test_set, specs, seed=self.seed + 83, threads=self.threads)
        frozen = evaluate(model, corrupted, "non_adaptive")
        adaptive = evaluate(model, corrupted, "adaptive_batch")
        ok = clean_acc >= 0.80 and adaptive >= frozen
        note = (
            f"clean acc={clean_acc:.3f} (need >=0.80); corrupted: "
            f"non_adaptive={frozen:.3f}, adaptive_batch={adaptive:.3f} "
            f"(need adaptive >= non_adaptive)"
        )
        return CriterionResult("A8", ok, note, time.perf_counter() - t0)

    # --------------------------------------------------------------- runner

    def run_all(self, include=None) -> list[CriterionResult]:
        steps = [
            ("A1", self.a1_gradient_fidelity),
            ("A2", self.a2_matched_concentration),
            ("A3", self.a3_shift_detection),
            ("A4", self.a4_shift_recovery),
            ("A5", self.a5_no_shift_parity),
            ("A6", self.a6_extraneous_decoding),
            ("A7", self.a7_exactness),
            ("A8", self.a8_image_smoke),
        ]
        results = []
        for name, fn in steps:
            if include is not None and name not in include:
                continue
            results.append(fn())
        return results
