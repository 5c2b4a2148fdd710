"""Counter-based seed derivation.

A master seed yields one base seed per named stream; instance t of a
stream uses base + t. Adding chains or trials therefore never changes the
seeds of the ones that already exist.
"""

import zlib

import numpy as np

from shared.schemas import SEED_MAX


def stream_seed(master: int, stream: str) -> int:
    """Base seed of a named stream ("simulate", "split", "gibbs", "cavi")."""
    key = zlib.crc32(stream.encode("utf-8"))
    sequence = np.random.SeedSequence(master, spawn_key=(key,))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def instance_seed(base: int, index: int) -> int:
    """Seed of instance `index` of a stream."""
    return (base + index) & SEED_MAX


def instance_seeds(base: int, count: int) -> list[int]:
    return [instance_seed(base, t) for t in range(count)]
