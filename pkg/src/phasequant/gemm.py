"""W4A4 matrix multiplication over quantized tensors.

``qgemm(a, w)`` computes ``a @ w.T`` where both operands are quantized
along the shared reduction axis.  Per block pair the 4-bit codes are
decoded and their inner product accumulated first; every partial result
there is exactly representable in float32 (grid products fit in 12
significand bits and block sums in 14), so the block inner product is
exact regardless of summation order.  The two block scales are applied
after it (also exact: 4-bit x 4-bit significands), blocks accumulate in
ascending index in float32, and the two tensor scales multiply once at
the end.

``qgemm_mirror`` replays the identical accumulation order through a
different route: it folds each block scale into the decoded values before
multiplying (a dequantize-then-multiply of everything below the tensor
scales).  Because per-block arithmetic is exact in both routes, the two
must agree bit-for-bit; that equality is what makes fusing quantized
multiplication with scale application safe.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ShapeMismatchError
from .formats import decode_e4m3, decode_fp4
from .quantizer import QuantizedTensor, RowQuantizedActivation


class Accumulation(Enum):
    """The single supported reduction order: ascending block index, ascending
    element index within a block."""

    BLOCK_ORDERED = "block_ordered"


@dataclass(frozen=True)
class GemmSpec:
    """Validated problem shape of a quantized product."""

    m: int
    n: int
    k: int
    accumulation: Accumulation = Accumulation.BLOCK_ORDERED

    def __post_init__(self):
        if min(self.m, self.n, self.k) < 1:
            raise ShapeMismatchError("gemm dims must be positive")
        if self.k % 16 != 0:
            raise ShapeMismatchError("reduction dim must be divisible by 16")

    @classmethod
    def from_operands(cls, a: QuantizedTensor, w: QuantizedTensor) -> "GemmSpec":
        if a.codes.shape[1] != w.codes.shape[1]:
            raise ShapeMismatchError(
                f"reduction dims differ: {a.codes.shape[1]} vs "
                f"{w.codes.shape[1]}"
            )
        if a.group_size != w.group_size:
            raise ShapeMismatchError(
                "operands quantized with different group sizes"
            )
        return cls(m=a.codes.shape[0], n=w.codes.shape[0], k=a.codes.shape[1])


def _check_pair(a: QuantizedTensor, w: QuantizedTensor):
    GemmSpec.from_operands(a, w)


def qgemm(a: QuantizedTensor, w: QuantizedTensor) -> np.ndarray:
    """Product of an m x k and an n x k quantized tensor, as float32 m x n."""
    _check_pair(a, w)
    m, k = a.codes.shape
    n = w.codes.shape[0]
    g = a.group_size

    a_vals = decode_fp4(a.codes)
    w_vals = decode_fp4(w.codes)
    sa = a.block_scale_values()  # m x nb
    sw = w.block_scale_values()  # n x nb

    acc = np.zeros((m, n), dtype=np.float32)
    for b in range(k // g):
        lo = b * g
        # Exact in float32: products of grid values summed within a block.
        inner = a_vals[:, lo : lo + g] @ w_vals[:, lo : lo + g].T
        acc += inner * np.outer(sa[:, b], sw[:, b])
    return (np.float32(a.tensor_scale) * np.float32(w.tensor_scale)) * acc


def qgemm_mirror(a: QuantizedTensor, w: QuantizedTensor) -> np.ndarray:
    """Order-mirrored oracle: dequantize block-scaled values, then multiply.

    Same ascending-block accumulation and same final tensor-scale product
    as ``qgemm``, but the block scales are folded into the operand values
    before the multiply instead of applied to the inner product after it.
    """
    _check_pair(a, w)
    m, k = a.codes.shape
    n = w.codes.shape[0]
    g = a.group_size

    a_vals = decode_fp4(a.codes)
    w_vals = decode_fp4(w.codes)
    sa = a.block_scale_values()
    sw = w.block_scale_values()

    acc = np.zeros((m, n), dtype=np.float32)
    for b in range(k // g):
        lo = b * g
        a_hat = sa[:, b : b + 1] * a_vals[:, lo : lo + g]  # exact
        w_hat = sw[:, b : b + 1] * w_vals[:, lo : lo + g]  # exact
        acc += a_hat @ w_hat.T
    return (np.float32(a.tensor_scale) * np.float32(w.tensor_scale)) * acc


def qgemm_rows(act: RowQuantizedActivation, w: QuantizedTensor) -> np.ndarray:
    """``qgemm`` with per-row activation tensor scales, batched.

    Bitwise equal to stacking ``qgemm(act.row(i), w)`` over i: the block
    loop is elementwise across rows and the final scale multiplies row i by
    ``float32(row_scale_i * w.tensor_scale)`` exactly as the scalar path.
    """
    if act.codes.shape[1] != w.codes.shape[1]:
        raise ShapeMismatchError(
            f"reduction dims differ: {act.codes.shape[1]} vs {w.codes.shape[1]}"
        )
    if act.group_size != w.group_size:
        raise ShapeMismatchError("operands quantized with different group sizes")
    m, k = act.codes.shape
    n = w.codes.shape[0]
    g = act.group_size

    a_vals = decode_fp4(act.codes)
    w_vals = decode_fp4(w.codes)
    sa = decode_e4m3(act.block_scales)
    sw = w.block_scale_values()

    acc = np.zeros((m, n), dtype=np.float32)
    for b in range(k // g):
        lo = b * g
        inner = a_vals[:, lo : lo + g] @ w_vals[:, lo : lo + g].T
        acc += inner * np.outer(sa[:, b], sw[:, b])
    ts = act.row_scales * np.float32(w.tensor_scale)
    return ts[:, None] * acc


def reference_gemm(a_values: np.ndarray, w_values: np.ndarray) -> np.ndarray:
    """Tolerance oracle: dense product of dequantized views in float64."""
    if a_values.shape[1] != w_values.shape[1]:
        raise ShapeMismatchError("reduction dims differ")
    return a_values.astype(np.float64) @ w_values.astype(np.float64).T
