"""Command-line entry point.

    adanorm <command> --config PATH [--out DIR] [--seed N] [--threads N]

Commands: gen-data, train, eval, diagnose, invariance, repro. Exit codes:
0 success, 1 validation error (bad config, bad format, bad data), 2 runtime
error. --threads (or the ADANORM_THREADS environment variable) caps the
worker count; the default of 1 keeps runs bit-reproducible.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from . import config as config_mod
from . import diagnostics, invariance, models, optim, pipeline, repro
from .data import save_dataset
from .errors import AdanormError, ConfigError, DataError, FormatError, StateError

COMMANDS = ("gen-data", "train", "eval", "diagnose", "invariance", "repro")


def _resolve_threads(arg):
    if arg is not None:
        return max(1, int(arg))
    env = os.environ.get("ADANORM_THREADS", "")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"ADANORM_THREADS must be an integer, got {env!r}") from None
    return 1


def _cmd_gen_data(cfg, out_dir):
    if cfg.dataset["source"] != "synthetic":
        raise ConfigError(
            "gen-data materializes synthetic datasets; idx files already "
            "exist on disk and are loaded lazily by train/eval"
        )
    recs = pipeline.synthetic_recordings(cfg)
    ds_path = os.path.join(out_dir, "dataset.anrm")
    save_dataset(recs, ds_path)
    man_csv = pipeline.write_dataset_manifest(recs, os.path.join(out_dir, "manifest.csv"))
    pipeline.write_manifest(
        out_dir, "gen-data", config_mod.canonical_text(cfg), cfg.seed,
        outputs=[ds_path, man_csv],
        extra={"samples": len(recs), "classes": recs.class_count,
               "extraneous_values": recs.extraneous_count},
    )
    print(f"wrote {ds_path} ({len(recs)} recordings)")
    return 0


def _cmd_train(cfg, out_dir):
    train_set, val_set, test_set, _ = pipeline.load_splits(cfg)
    model = models.build_model(cfg.model)
    best, history = optim.train(model, train_set, val_set, cfg.train)
    ckpt_path = os.path.join(out_dir, "checkpoint.anrm")
    models.checkpoint_write(best, ckpt_path)
    hist_path = pipeline.write_history_csv(history, os.path.join(out_dir, "history.csv"))
    pipeline.write_manifest(
        out_dir, "train", config_mod.canonical_text(cfg), cfg.seed,
        outputs=[ckpt_path, hist_path],
        extra={"epochs_run": len(history),
               "best_val_acc": max(h.val_acc for h in history)},
    )
    print(f"trained {len(history)} epochs, best val acc "
          f"{max(h.val_acc for h in history):.4f}, wrote {ckpt_path}")
    return 0


def _find_checkpoint(cfg, out_dir):
    for candidate in (os.path.join(out_dir, "checkpoint.anrm"),
                      os.path.join(cfg.out_dir, "checkpoint.anrm")):
        if os.path.exists(candidate):
            return candidate
    raise ConfigError(
        f"no checkpoint found at {os.path.join(out_dir, 'checkpoint.anrm')}; "
        "run the train command first"
    )


def _cmd_eval(cfg, out_dir):
    ckpt_path = _find_checkpoint(cfg, out_dir)
    model = models.checkpoint_read(ckpt_path)
    _, _, test_set, corrupted = pipeline.load_splits(cfg)
    target = corrupted if corrupted is not None else test_set
    rows = pipeline.eval_rows(model, target, cfg.eval_schemes, optim.evaluate,
                              cfg.train.batch_size)
    csv_path = pipeline.write_eval_csv(rows, os.path.join(out_dir, "eval.csv"))
    pipeline.write_manifest(
        out_dir, "eval", config_mod.canonical_text(cfg), cfg.seed,
        inputs=[ckpt_path], outputs=[csv_path],
    )
    for scheme, averaging, stat, acc in rows:
        print(f"{scheme:<12s} {averaging:<9s} {stat:<12s} {acc:.4f}")
    return 0


def _cmd_diagnose(cfg, out_dir):
    ckpt_path = _find_checkpoint(cfg, out_dir)
    model = models.checkpoint_read(ckpt_path)
    _, _, test_set, corrupted = pipeline.load_splits(cfg)
    target = corrupted if corrupted is not None else test_set
    reports = []
    updates = [l.state.updates_seen for _, l in model.norm_layers()]
    if updates and min(updates) >= 1:
        reports.extend(diagnostics.collect_normalized_moments(
            model, target, diagnostics.TRAIN_RUNNING))
    reports.extend(diagnostics.half_split_protocol(model, target, cfg.seed))
    paths = diagnostics.emit_report(reports, out_dir, svg=True)
    pipeline.write_manifest(
        out_dir, "diagnose", config_mod.canonical_text(cfg), cfg.seed,
        inputs=[ckpt_path], outputs=paths,
    )
    frac_mean, frac_std = diagnostics.concentration_metric(reports)
    print(f"{len(reports)} reports; pooled frac_mean_ok={frac_mean:.3f} "
          f"frac_std_ok={frac_std:.3f}; wrote {len(paths)} files to {out_dir}")
    return 0


def _natural_scheme(norm_spec):
    if norm_spec.scheme.value == "non_adaptive":
        return "non_adaptive"
    return f"adaptive_{norm_spec.averaging.value}"


def _cmd_invariance(cfg, out_dir):
    import csv as _csv

    ckpt_path = _find_checkpoint(cfg, out_dir)
    model = models.checkpoint_read(ckpt_path)
    train_set, val_set, test_set, corrupted = pipeline.load_splits(cfg)
    if corrupted is not None:
        pooled = corrupted
    else:
        pooled = _concat_datasets([train_set, val_set, test_set])
    scheme = _natural_scheme(model.config.norm)
    bank = invariance.extract_features(model, pooled, "penultimate", scheme)
    result = invariance.run_invariance(bank, cfg.seed)
    csv_path = os.path.join(out_dir, "invariance.csv")
    with open(csv_path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["model_id", "layer", "scheme", "statistic", "decode_acc", "chance"])
        w.writerow([bank.model_digest[:16], bank.layer_id, scheme,
                    model.config.norm.statistic.value,
                    repr(result.decode_acc), repr(result.chance)])
    pipeline.write_manifest(
        out_dir, "invariance", config_mod.canonical_text(cfg), cfg.seed,
        inputs=[ckpt_path], outputs=[csv_path],
    )
    print(f"decode accuracy {result.decode_acc:.4f} (chance {result.chance:.4f}) "
          f"from {bank.layer_id} under {scheme}")
    return 0


def _concat_datasets(datasets):
    import numpy as np

    from .data import TaggedDataset

    first = datasets[0]
    return TaggedDataset(
        np.concatenate([d.tensors for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        np.concatenate([d.extraneous for d in datasets]),
        first.class_count,
        first.extraneous_count,
        first.kind,
        dict(first.provenance),
    )


def _cmd_repro(cfg, out_dir, threads):
    suite = repro.ReproSuite(out_dir=out_dir, seed=cfg.seed, threads=threads)
    results = suite.run_all()
    lines = []
    all_ok = True
    for r in results:
        status = "SKIP" if r.passed is None else ("PASS" if r.passed else "FAIL")
        if r.passed is False:
            all_ok = False
        line = f"{r.criterion}: {status}  {r.note}"
        lines.append(line)
        print(line)
    report_path = os.path.join(out_dir, "repro_report.txt")
    with open(report_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    pipeline.write_manifest(
        out_dir, "repro", config_mod.canonical_text(cfg), cfg.seed,
        outputs=[report_path],
    )
    return 0 if all_ok else 2


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="adanorm",
        description="Adaptive feature normalization experiments",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="experiment config file")
    parser.add_argument("--out", default=None, help="output directory (default: config out_dir)")
    parser.add_argument("--seed", type=int, default=None, help="override the experiment seed")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap (default ADANORM_THREADS or 1)")
    args = parser.parse_args(argv)

    try:
        threads = _resolve_threads(args.threads)
        cfg = config_mod.parse_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(
                cfg, seed=args.seed,
                train=dataclasses.replace(cfg.train, seed=args.seed),
            )
        out_dir = args.out if args.out else cfg.out_dir
        os.makedirs(out_dir, exist_ok=True)
        if args.command == "gen-data":
            return _cmd_gen_data(cfg, out_dir)
        if args.command == "train":
            return _cmd_train(cfg, out_dir)
        if args.command == "eval":
            return _cmd_eval(cfg, out_dir)
        if args.command == "diagnose":
            return _cmd_diagnose(cfg, out_dir)
        if args.command == "invariance":
            return _cmd_invariance(cfg, out_dir)
        return _cmd_repro(cfg, out_dir, threads)
    except (ConfigError, FormatError, DataError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except AdanormError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
