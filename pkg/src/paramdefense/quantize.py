"""Group-wise symmetric uniform quantization onto signed n-bit integer grids.

For a group ``W`` the grid step is ``w0 = max|W| / (2^(n-1) - 1)`` and each
entry maps to ``round(W / w0) * w0`` with halves rounded away from zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import RejectedInputError
from .nn import Model, ParamPartition

# Float quotients within this distance of a half are re-derived exactly.
_HALF_WINDOW = 1e-9


@dataclass(frozen=True)
class QuantScheme:
    bits: int

    def __post_init__(self):
        if int(self.bits) != self.bits or self.bits < 2:
            raise RejectedInputError(f"bits must be an integer >= 2, got {self.bits}")

    @property
    def levels(self) -> int:
        """Largest integer level on each side of zero."""
        return 2 ** (self.bits - 1) - 1


def _round_half_away(r: np.ndarray, W: np.ndarray, top: int, m: float) -> np.ndarray:
    q = np.rint(r)
    frac = np.abs(r - np.trunc(r))
    near = np.flatnonzero(np.abs(frac - 0.5) < _HALF_WINDOW)
    for i in near:
        # exact rational W_i * top / m decides which side of the half we are on
        exact = Fraction(float(W[i])) * top / Fraction(m)
        mag = abs(exact)
        whole = mag.numerator // mag.denominator
        rest = mag - whole
        level = whole + 1 if rest >= Fraction(1, 2) else whole
        q[i] = level if exact >= 0 else -level
    return q


def quantize_levels(W, bits: int) -> tuple[np.ndarray, float]:
    """Integer levels and grid step of a group.  An all-zero group has step 0."""
    scheme = QuantScheme(bits)
    W = np.asarray(W, dtype=np.float64).reshape(-1)
    if W.size == 0:
        raise RejectedInputError("cannot quantize an empty group")
    if not np.all(np.isfinite(W)):
        raise RejectedInputError("group contains non-finite values")
    m = float(np.max(np.abs(W)))
    top = scheme.levels
    if m == 0.0:
        return np.zeros(W.size), 0.0
    w0 = m / top
    q = _round_half_away(W * top / m, W, top, m)
    return np.clip(q, -top, top), w0


def quantize_group(W, bits: int) -> np.ndarray:
    """Snap ``W`` to its symmetric ``bits``-bit grid.

    Entries at the top level are set to ``+-max|W|`` exactly, so the extremal
    element is preserved and requantizing is a bit-exact no-op.
    """
    W = np.asarray(W, dtype=np.float64)
    q, w0 = quantize_levels(W, bits)
    if w0 == 0.0:
        return W.copy()
    flat = q * w0
    top = QuantScheme(bits).levels
    m = float(np.max(np.abs(W)))
    at_top = np.abs(q) == top
    flat[at_top] = np.sign(q[at_top]) * m
    return flat.reshape(W.shape)


def quantize_model(model: Model, bits: int, partition: ParamPartition | None = None) -> Model:
    """Quantize each weight matrix and bias vector with its own scale.

    When ``partition`` is given, only corruptible entries change; frozen
    entries keep their values and do not influence the group scale.
    """
    QuantScheme(bits)
    params = model.params.copy()
    mask = None
    if partition is not None:
        partition.check(model.k_total, require_nonempty=False)
        mask = partition.mask
    for _, sl, _ in model.tensor_slices():
        if mask is None:
            params[sl] = quantize_group(params[sl], bits)
            continue
        local = mask[sl]
        if local.any():
            group = params[sl]
            group[local] = quantize_group(group[local], bits)
            params[sl] = group
    return model.with_params(params)
