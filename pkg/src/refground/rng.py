"""Counter-based random streams keyed by ``(seed, purpose)``.

Each consumer asks for its own labelled stream, so adding a new consumer
never shifts the numbers drawn by existing ones.
"""

import hashlib

import numpy as np


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


def stream(seed: int, purpose: str) -> np.random.Generator:
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, _label_key(purpose)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
