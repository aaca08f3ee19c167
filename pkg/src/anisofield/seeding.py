"""Named random substreams derived from one master seed.

A substream is identified by ``(seed, label, *index)``; labels are hashed with
SHA-256 into the ``spawn_key`` of a :class:`numpy.random.SeedSequence`, so the
mapping is stable across runs, platforms and numpy versions that keep PCG64.
The labels below are part of the public interface.
"""
import hashlib

import numpy as np

ARRIVALS = "arrivals"
SPECTRAL = "spectral"
MULTIPLIERS = "multipliers"
SUBSAMPLING = "subsampling"
REPLICATION = "replication"


def _label_key(label):
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:4], "little")


def seed_sequence(seed, label, *index):
    return np.random.SeedSequence(int(seed), spawn_key=(_label_key(label), *map(int, index)))


def substream(seed, label, *index):
    """A fresh :class:`numpy.random.Generator` for the named substream."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, label, *index)))


def derived_seed(seed, label, *index):
    """A 63-bit integer seed for the named substream (used for replications)."""
    state = seed_sequence(seed, label, *index).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1] & 0x7FFFFFFF) << 32)


def replication_seeds(seed, count):
    return [derived_seed(seed, REPLICATION, i) for i in range(count)]
