"""Sinusoidal positional encoding for sample positions and view directions.

Lifts each scalar input p to (sin(pi p), cos(pi p), ..., sin(2^(L-1) pi p),
cos(2^(L-1) pi p)), optionally prepending p itself, so the downstream MLP can
represent high-frequency variation. Positions are expected pre-normalized to
the scene bounding box (roughly [-1, 1]^3); directions are unit vectors.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InputError, NumericError


@dataclass(frozen=True)
class EncodingConfig:
    levels_position: int = 10
    levels_direction: int = 4
    include_input: bool = True

    def __post_init__(self):
        if self.levels_position < 1 or self.levels_direction < 1:
            raise InputError("encoding levels must be >= 1")

    def width(self, levels: int) -> int:
        """Encoded length per input scalar."""
        return 2 * levels + (1 if self.include_input else 0)

    def position_dim(self, spatial: int = 3) -> int:
        return spatial * self.width(self.levels_position)

    def direction_dim(self, spatial: int = 3) -> int:
        return spatial * self.width(self.levels_direction)


def positional_encode(x, levels: int, include_input: bool) -> np.ndarray:
    """Encode an [n, d] array (or a single d-vector) of finite reals.

    Output has shape [n, d * (2 * levels + include_input)]; a 1-d input
    returns the encoded vector. Raises NumericError on non-finite input.
    """
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise InputError(f"expected a vector or [n, d] array, got shape {arr.shape}")
    if levels < 1:
        raise InputError(f"levels must be >= 1, got {levels}")
    if not np.isfinite(np.sum(arr)):
        raise NumericError("non-finite values in encoding input")
    out = kernels.posenc(arr, levels, include_input)
    return out[0] if single else out
