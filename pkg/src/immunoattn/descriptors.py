"""Per-residue E/Z physicochemical descriptors and the ACC transform.

E1-E5 are the five principal components of Venkatarajan & Braun (2001, J Mol
Model 7:445). Z1-Z3 are the z-scales of Hellberg et al. (1987, J Med Chem
30:1126). Values are used raw, without normalization.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import _kernels
from .datasets import ALPHABET
from .errors import DataError

COLUMNS = ("E1", "E2", "E3", "E4", "E5", "Z1", "Z2", "Z3")

#        E1      E2      E3      E4      E5      Z1     Z2     Z3
_ROWS = {
    "A": (0.008, 0.134, -0.475, -0.039, 0.181, 0.07, -1.73, 0.09),
    "C": (-0.132, 0.174, 0.070, 0.565, -0.374, 0.71, -0.97, 4.13),
    "D": (0.303, -0.057, -0.014, 0.225, 0.156, 3.64, 1.13, 2.36),
    "E": (0.221, -0.280, -0.315, 0.157, 0.303, 3.08, 0.39, -0.07),
    "F": (-0.329, -0.023, 0.072, -0.002, 0.208, -4.92, 1.30, 0.45),
    "G": (0.218, 0.562, -0.024, 0.018, 0.106, 2.23, -5.36, 0.30),
    "H": (0.023, -0.177, 0.041, 0.280, -0.021, 2.41, 1.74, 1.11),
    "I": (-0.353, 0.071, -0.088, -0.195, -0.107, -4.44, -1.68, -1.03),
    "K": (0.243, -0.339, -0.044, -0.325, -0.027, 2.84, 1.41, -3.14),
    "L": (-0.267, 0.018, -0.265, -0.274, 0.206, -4.19, -1.03, -0.98),
    "M": (-0.239, -0.141, -0.155, 0.321, 0.077, -2.49, -0.27, -0.41),
    "N": (0.255, 0.038, 0.117, 0.118, -0.055, 3.22, 1.45, 0.84),
    "P": (0.173, 0.286, 0.407, -0.215, 0.384, -1.22, 0.88, 2.23),
    "Q": (0.149, -0.184, -0.030, 0.035, -0.112, 2.18, 0.53, -1.14),
    "R": (0.171, -0.361, 0.107, -0.258, -0.364, 2.88, 2.52, -3.44),
    "S": (0.199, 0.238, -0.015, -0.068, -0.196, 1.96, -1.63, 0.57),
    "T": (0.068, 0.147, -0.015, -0.132, -0.274, 0.92, -2.09, -1.40),
    "V": (-0.274, 0.136, -0.187, -0.196, -0.299, -2.69, -2.53, -1.29),
    "W": (-0.296, -0.186, 0.389, 0.083, 0.297, -4.75, 3.65, 0.85),
    "Y": (-0.141, -0.057, 0.425, -0.096, -0.091, -1.39, 2.32, 0.01),
}

# rows in ALPHABET order
TABLE = np.array([_ROWS[aa] for aa in ALPHABET], dtype=np.float64)
TABLE.setflags(write=False)
_INDEX = {aa: i for i, aa in enumerate(ALPHABET)}


def table_checksum() -> str:
    """SHA-256 over the table rendered as ``letter,v1,...,v8`` lines (3 decimals)."""
    lines = [
        aa + "," + ",".join(f"{v:.3f}" for v in TABLE[i]) for i, aa in enumerate(ALPHABET)
    ]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def residue_descriptors(residue: str) -> np.ndarray:
    try:
        return TABLE[_INDEX[residue]].copy()
    except KeyError:
        raise DataError(f"unknown residue {residue!r}") from None


def sequence_descriptors(sequence: str) -> np.ndarray:
    """L x 8 matrix of (E1..E5, Z1..Z3) rows, one per residue."""
    try:
        idx = [_INDEX[c] for c in sequence]
    except KeyError as exc:
        raise DataError(f"unknown residue {exc.args[0]!r}") from None
    return TABLE[idx]


def acc_transform(descriptor_matrix: np.ndarray, max_lag: int = 8) -> np.ndarray:
    """Auto/cross covariance of the mean-centred columns.

    Entry ``(lag - 1) * m * m + j * m + k`` holds
    ``mean_i e[i, j] * e[i + lag, k]`` over the ``L - lag`` valid offsets,
    i.e. lag is the outer index, then column j, then column k.
    """
    e = np.asarray(descriptor_matrix, dtype=np.float64)
    if e.ndim != 2:
        raise DataError(f"descriptor matrix must be 2-D, got shape {e.shape}")
    if max_lag < 1:
        raise DataError(f"max_lag must be >= 1, got {max_lag}")
    if e.shape[0] <= max_lag:
        raise DataError(f"sequence length {e.shape[0]} must exceed max_lag {max_lag}")
    # shifting by the first row first makes constant columns centre to exact zeros
    shifted = e - e[0]
    centered = np.ascontiguousarray(shifted - shifted.mean(axis=0))
    return _kernels.acc(centered, max_lag)
