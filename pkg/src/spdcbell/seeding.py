"""Root-seed to per-stream generator derivation.

Every random stream in a run is keyed by a tuple of labels such as
``("point", 3, "pairs")``. The label tuple is hashed with SHA-256 and fed to
``numpy.random.SeedSequence`` together with the root seed, so that streams
are independent of each other and of execution order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(*labels) -> int:
    text = "/".join(str(label) for label in labels).encode("utf-8")
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "little")


def derive_rng(root_seed: int, *labels) -> np.random.Generator:
    ss = np.random.SeedSequence([int(root_seed) & 0xFFFFFFFFFFFFFFFF, stream_key(*labels)])
    return np.random.default_rng(ss)


def derive_seed(root_seed: int, *labels) -> int:
    """A 63-bit child seed, for configs that carry a plain integer seed."""
    ss = np.random.SeedSequence([int(root_seed) & 0xFFFFFFFFFFFFFFFF, stream_key(*labels)])
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))
