"""Synthetic labeled proteins for desk-scale training checks.

Each record gets its own residue composition, tilted towards hydrophobic or
hydrophilic residues along the Z1 scale. The label is the sign of a fixed
linear functional of the descriptor column means; records whose functional
falls inside ``(-margin, margin)`` are rejected, so the classes are separable
with a margin by construction.
"""

from __future__ import annotations

import numpy as np

from .datasets import ALPHABET, ProteinRecord
from .descriptors import TABLE, sequence_descriptors

Z1_WEIGHTS = np.array([0, 0, 0, 0, 0, 1.0, 0, 0])


def separable_dataset(
    n: int = 400,
    seed: int = 0,
    min_len: int = 25,
    max_len: int = 60,
    weights: np.ndarray = Z1_WEIGHTS,
    margin: float = 0.5,
    tilt: float = 1.5,
    source: str = "bacteria",
) -> list[ProteinRecord]:
    rng = np.random.default_rng(seed)
    letters = np.array(list(ALPHABET))
    axis = TABLE @ weights
    axis = axis / axis.std()
    records: list[ProteinRecord] = []
    while len(records) < n:
        L = int(rng.integers(min_len, max_len + 1))
        logits = tilt * rng.uniform(-1.0, 1.0) * axis
        p = np.exp(logits - logits.max())
        seq = "".join(rng.choice(letters, L, p=p / p.sum()))
        f = float(sequence_descriptors(seq).mean(axis=0) @ weights)
        if abs(f) < margin:
            continue
        records.append(ProteinRecord(f"syn{len(records):04d}", seq, int(f > 0), source))
    return records
