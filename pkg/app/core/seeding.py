"""Counter-based seed derivation.

Every random stream in the package is keyed by a base seed plus a tuple of
integer counters (iteration, trajectory index, ...), so results do not depend
on the order in which streams are created.
"""
import numpy as np


def derive_seed(base: int, *keys: int) -> int:
    """Derive a 32-bit seed from a base seed and integer counters."""
    sequence = np.random.SeedSequence(entropy=int(base), spawn_key=tuple(int(k) for k in keys))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def make_rng(base: int, *keys: int) -> np.random.Generator:
    """Create a generator for the stream identified by ``(base, *keys)``."""
    sequence = np.random.SeedSequence(entropy=int(base), spawn_key=tuple(int(k) for k in keys))
    return np.random.default_rng(sequence)
