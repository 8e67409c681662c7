"""Walsh-Hadamard transforms with factorized plans for non-power-of-two sizes.

A transform of size n = 2^p * m is evaluated as a dense m x m base product per
block followed by the fast butterfly across the 2^p blocks, O(n*m + n*log n).
The embedded base matrices (m = 12, 20) are symmetric, so the full transform
is symmetric and applying it twice yields n*x.  The transform is unnormalized
(H H^T = n I); the 1/n factor belongs to whoever inverts it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ssmq import kernels
from ssmq.quant import QTensor, quantize

MAX_TRANSFORM_DIM = 4096

# Symmetric Hadamard matrices of orders 12 and 20 (Paley-type, from symmetric
# conference matrices over GF(5) and GF(9)).  Orthogonality and symmetry are
# re-checked by the test suite.
_BASE_TABLES: dict[int, tuple[str, ...]] = {
    12: (
        "+-++++++++++",
        "--+-+-+-+-+-",
        "+++-++----++",
        "+---+--+-++-",
        "+++++-++----",
        "+-+---+--+-+",
        "++--+++-++--",
        "+--++---+--+",
        "++----+++-++",
        "+--+-++---+-",
        "++++----+++-",
        "+-+--+-++---",
    ),
    20: (
        "+-++++++++++++++++++",
        "--+-+-+-+-+-+-+-+-+-",
        "+++-++++++----++----",
        "+---+-+-+--+-++--+-+",
        "+++++-++--++----++--",
        "+-+---+--++--+-++--+",
        "+++++++-----++----++",
        "+-+-+----+-++--+-++-",
        "++++----+-++++++----",
        "+-+--+-+--+-+-+--+-+",
        "++--++--+++-++--++--",
        "+--++--++---+--++--+",
        "++----+++++++-----++",
        "+--+-++-+-+----+-++-",
        "++++----++----+-++++",
        "+-+--+-++--+-+--+-+-",
        "++--++----++--+++-++",
        "+--++--+-++--++---+-",
        "++----++----+++++++-",
        "+--+-++--+-++-+-+---",
    ),
}

BASE_SIZES = (1,) + tuple(sorted(_BASE_TABLES))


def _base_matrix(m: int) -> np.ndarray:
    if m == 1:
        return np.ones((1, 1), dtype=np.int8)
    rows = _BASE_TABLES[m]
    mat = np.array([[1 if ch == "+" else -1 for ch in row] for row in rows], dtype=np.int8)
    return mat


def build_walsh(k: int) -> np.ndarray:
    """Walsh-Hadamard matrix of order 2^k via the Sylvester recursion."""
    if k < 0:
        raise ValueError("k must be non-negative")
    if 2**k > MAX_TRANSFORM_DIM:
        raise ValueError(f"2^{k} exceeds the size limit {MAX_TRANSFORM_DIM}")
    h2 = np.array([[1, 1], [1, -1]], dtype=np.int32)
    h = np.ones((1, 1), dtype=np.int32)
    for _ in range(k):
        h = np.kron(h2, h)
    return h


@dataclass(frozen=True)
class HadamardPlan:
    """Factorized transform descriptor for n = 2^p * m."""

    n: int
    p: int
    m: int
    base: np.ndarray

    def __post_init__(self):
        if self.n != (1 << self.p) * self.m:
            raise ValueError("plan factorization is inconsistent")
        if self.base.shape != (self.m, self.m):
            raise ValueError("base matrix shape mismatch")
        if not np.isin(self.base, (-1, 1)).all():
            raise ValueError("base entries must be +/-1")
        gram = self.base.astype(np.int64) @ self.base.astype(np.int64).T
        if not np.array_equal(gram, self.m * np.eye(self.m, dtype=np.int64)):
            raise ValueError("base matrix is not Hadamard")
        self.base.setflags(write=False)


def plan_for_dim(n: int) -> HadamardPlan:
    """Factorize n = 2^p * m with maximal p and m a known base size."""
    if n < 1:
        raise ValueError("transform dimension must be positive")
    if n > MAX_TRANSFORM_DIM:
        raise ValueError(f"dimension {n} exceeds the size limit {MAX_TRANSFORM_DIM}")
    for p in range(n.bit_length() - 1, -1, -1):
        step = 1 << p
        if n % step == 0 and n // step in BASE_SIZES:
            m = n // step
            return HadamardPlan(n, p, m, _base_matrix(m))
    raise ValueError(f"no Hadamard factorization available for n={n}")


def dense_matrix(plan: HadamardPlan) -> np.ndarray:
    """The full n x n transform matrix (integer entries); for checks and small n."""
    return np.kron(build_walsh(plan.p), plan.base.astype(np.int32))


def apply_hadamard(plan: HadamardPlan, x) -> np.ndarray:
    """H_n x along the last axis, by base products plus the fast butterfly."""
    arr = np.asarray(x)
    if arr.shape[-1] != plan.n:
        raise ValueError(f"length mismatch: expected {plan.n}, got {arr.shape[-1]}")
    dtype = np.float32 if arr.dtype == np.float32 else np.float64
    squeeze = arr.ndim == 1
    work = np.array(arr.reshape(1, -1) if squeeze else arr, dtype=dtype)
    batch = work.shape[0]
    blocks = 1 << plan.p
    if plan.m > 1:
        v = work.reshape(batch, blocks, plan.m)
        v = v @ plan.base.T.astype(dtype)
        # Butterfly runs across the block axis, independently per base lane.
        v = np.ascontiguousarray(v.transpose(0, 2, 1)).reshape(batch * plan.m, blocks)
        v = kernels.fwht_pow2(v)
        out = np.ascontiguousarray(
            v.reshape(batch, plan.m, blocks).transpose(0, 2, 1)
        ).reshape(batch, plan.n)
    else:
        out = kernels.fwht_pow2(work)
    return out[0] if squeeze else out


def fuse_inverse_into_weights(w_out: np.ndarray, plan: HadamardPlan) -> np.ndarray:
    """H_n applied to the feature axis of the output projection: W^H = H_n W.

    w_out has shape (n, d_out) with the transform acting on axis 0; downstream
    compute uses (1/n) (W^H)^T y^H in place of W^T y.
    """
    w = np.asarray(w_out)
    if w.ndim != 2 or w.shape[0] != plan.n:
        raise ValueError(f"dimension mismatch: weight feature axis must be {plan.n}")
    return np.ascontiguousarray(apply_hadamard(plan, w.T).T)


def hadamard_quantize(y, scale: float, plan: HadamardPlan, bit_width: int = 8) -> QTensor:
    """Quantize in the transformed (outlier-free) basis: round-and-clamp H_n y / s."""
    return quantize(apply_hadamard(plan, y), scale, bit_width)
