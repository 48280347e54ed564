"""Deterministic random streams.

All randomness flows through numpy's Philox generator, a counter-based 64-bit
PRNG. Streams are derived from (seed, *tags) via SeedSequence, so any consumer
can be re-run in isolation: the same seed and tags always reproduce the same
draws, independent of call order elsewhere. Per-sample work may be
parallelized safely by deriving one stream per sample index.
"""

import numpy as np

# Stream tags. Distinct constants keep independent consumers off each other's
# streams even when they share the experiment seed.
STREAM_TEMPLATES = 101
STREAM_SUBJECT = 102
STREAM_RECORDING = 103
STREAM_CORRUPT = 104
STREAM_INIT = 201
STREAM_SHUFFLE = 202
STREAM_HALF_SPLIT = 301
STREAM_PROBE_SPLIT = 302
STREAM_PROBE_INIT = 303


def make_rng(seed, *tags):
    """Return a Generator on its own Philox stream for (seed, *tags)."""
    entropy = [int(seed)] + [int(t) for t in tags]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
