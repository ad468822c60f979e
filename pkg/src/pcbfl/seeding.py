"""Named random streams derived from a single root seed.

``derive_seed(root, "embed", "drug", 3)`` hashes the root together with the
labels, so each stage/site/repetition gets its own reproducible stream and
stages can be re-run independently.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *labels) -> int:
    key = "/".join([str(int(root))] + [str(label) for label in labels])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")


def rng_for(root: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *labels))
