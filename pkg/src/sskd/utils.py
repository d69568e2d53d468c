"""Seed derivation and small shared helpers.

Every random draw in the package flows from a named stream derived here,
so that runs are pure functions of their configuration.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _fold(label):
    """Stable 64-bit integer for an arbitrary stream label."""
    return int.from_bytes(hashlib.sha256(repr(label).encode()).digest()[:8], "little")


def seeded_rng(seed, *stream):
    """A PCG64 generator keyed by (seed, stream labels), platform-stable."""
    entropy = [int(seed)] + [_fold(s) for s in stream]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed, *stream):
    """A derived integer seed for handing to APIs that take one."""
    entropy = [int(seed)] + [_fold(s) for s in stream]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])
