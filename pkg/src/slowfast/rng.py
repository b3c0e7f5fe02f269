"""Counter-based Gaussian streams.

Every block of increments is addressed by ``(seed, role, step)``: the Philox
key holds the seed and the role, the counter holds the step.  Inside a block
the row index is the repetition and the column index the particle, so a
given particle's noise never depends on how many workers ran, in which order
steps were requested, or how many other repetitions share the array.
"""
from __future__ import annotations

import numpy as np

SLOW = 1
FAST = 2
FROZEN = 3
INIT = 4
PROBE = 5

ROLE_NAMES = {SLOW: "slow", FAST: "fast", FROZEN: "frozen", INIT: "init", PROBE: "probe"}

_MASK = (1 << 64) - 1


def derive_seed(base: int, *labels) -> int:
    """A 64-bit child seed for a labelled sub-experiment (grid cell, replica...)."""
    words = [int(base) & _MASK]
    for lab in labels:
        if isinstance(lab, str):
            words.extend(lab.encode())
        else:
            words.append(int(lab) & _MASK)
    ss = np.random.SeedSequence(words)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generator(seed: int, role: int, step: int = 0) -> np.random.Generator:
    bits = np.random.Philox(key=[int(seed) & _MASK, role], counter=[0, int(step), 0, 0])
    return np.random.Generator(bits)


def normal_block(seed: int, role: int, step: int, shape) -> np.ndarray:
    """Standard normals for one ``(seed, role, step)`` address."""
    return generator(seed, role, step).standard_normal(shape)


def stream_id(seed: int, role: int) -> str:
    return f"philox:{int(seed) & _MASK}:{ROLE_NAMES.get(role, role)}"
