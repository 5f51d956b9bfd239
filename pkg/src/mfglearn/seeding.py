"""Named random sub-streams.

Every consumer of randomness asks for its own generator by label, so adding
a new consumer never shifts the draws of an existing one.
"""

import zlib

import numpy as np


def substream(seed: int, label: str) -> np.random.Generator:
    """Generator for ``label`` derived from the run seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(label.encode("utf-8"))]))
