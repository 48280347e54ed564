"""Can a probe read the subject id out of penultimate features?

    python demos/06_extraneous_probe.py

Trains a frozen-statistics model and an instance-normalized model on the
same subjects, extracts penultimate-layer features for every subject,
and fits a small decoder per feature bank whose only job is to identify
the subject. Lower decoding accuracy means the representation carries
less extraneous information. A shuffled-feature control shows what
chance looks like.
"""

import numpy as np

from adanorm.data import (
    generate_synthetic_sensor,
    split_by_extraneous,
    standardize_per_dim,
    window_dataset,
)
from adanorm.invariance import FeatureBank, extract_features, run_invariance
from adanorm.models import ModelConfig, SensorArch, build_model
from adanorm.normalization import NormSpec
from adanorm.optim import LrSchedule, TrainConfig, train

SUBJECTS = 5

recs = generate_synthetic_sensor(
    classes=3,
    subjects=SUBJECTS,
    channels=4,
    steps_per_recording=610,
    recordings_per_subject=6,
    severity=0.8,
    seed=6,
    window=150,
)
train_r, val_r, _ = split_by_extraneous(recs, (0, 1, 2), (3,), (4,))
train_w, stats = standardize_per_dim(window_dataset(train_r, 150, 40))
val_w = standardize_per_dim(window_dataset(val_r, 150, 150), stats)[0]
# probe set spans every subject so the decoder has all ids to learn
probe_w = standardize_per_dim(window_dataset(recs, 150, 30), stats)[0]


def fit(norm_spec, eval_scheme):
    cfg = ModelConfig(
        task="sensor_seq",
        input_channels=4,
        num_classes=3,
        sensor=SensorArch(1, 1, 2, 4, 20, 9),
        norm=norm_spec,
        seed=6,
    )
    tc = TrainConfig(
        epochs=10,
        batch_size=32,
        schedule=LrSchedule(mode="fixed", breakpoints=((0, 5e-3),)),
        early_stop_patience=10,
        eval_scheme=eval_scheme,
        seed=6,
    )
    return train(build_model(cfg), train_w, val_w, tc)[0]


print("training frozen-statistics model ...")
frozen_model = fit(NormSpec("non_adaptive", "batch", "mean_std"), "non_adaptive")
print("training instance-normalized model ...")
inst_model = fit(NormSpec("adaptive", "instance", "mean_std"), "adaptive_instance")

banks = {
    "frozen stats      ": extract_features(frozen_model, probe_w, "penultimate",
                                           "non_adaptive"),
    "instance-normalized": extract_features(inst_model, probe_w, "penultimate",
                                            "adaptive_instance"),
}
rng = np.random.default_rng(0)
ref = banks["frozen stats      "]
banks["random control    "] = FeatureBank(
    features=rng.standard_normal(ref.features.shape).astype(np.float32),
    extraneous=ref.extraneous,
    extraneous_count=ref.extraneous_count,
    layer_id="random_control",
    eval_scheme="none",
    model_digest="control",
)

print(f"\nsubject decoding accuracy (chance {1 / SUBJECTS:.3f}):")
for name, bank in banks.items():
    res = run_invariance(bank, seed=1)
    print(f"  {name} {res.decode_acc:.3f}   "
          f"({res.test_count} held-out windows)")
