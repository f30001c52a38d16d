"""Named, independent PCG64 streams derived from a master seed."""

from __future__ import annotations

import zlib

import numpy as np


def label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def stream(master_seed: int, label: str, *extra: int) -> np.random.Generator:
    """Generator for ``label`` under ``master_seed``.

    Streams with different labels (or extra integer keys) are statistically
    independent, so drawing from one never shifts another.
    """
    entropy = [int(master_seed), label_key(label), *(int(e) for e in extra)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
