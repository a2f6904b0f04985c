"""Named random streams derived from one master seed.

Every source of randomness in the lab (corpus generation, training
shuffles, attack-spec choices, evaluation sampling) pulls from its own
named stream so that changing how one consumer draws numbers cannot
perturb any other consumer.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(master_seed: int, name: str) -> np.random.Generator:
    """Return the generator for `name` under `master_seed`.

    The same (seed, name) pair always yields an identical stream; distinct
    names yield independent streams.
    """
    tag = zlib.crc32(name.encode("utf-8"))
    seq = np.random.SeedSequence([master_seed & 0xFFFFFFFFFFFFFFFF, tag])
    return np.random.Generator(np.random.PCG64(seq))
