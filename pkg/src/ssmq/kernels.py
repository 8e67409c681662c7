"""Backend selection for the hot kernels.

The compiled extension (`ssmq._core`, built from Cython) is preferred; the
pure-numpy fallback is used when the extension is missing or when the
environment variable ``SSMQ_FORCE_FALLBACK=1`` is set.  `backend_name()`
reports which one is active.
"""

import os

import numpy as np

from ssmq import _py_kernels

if os.environ.get("SSMQ_FORCE_FALLBACK", "") == "1":
    _impl = _py_kernels
    _BACKEND = "fallback"
else:
    try:
        from ssmq import _core as _impl  # type: ignore[no-redef]

        _BACKEND = "compiled"
    except ImportError:
        _impl = _py_kernels
        _BACKEND = "fallback"


def backend_name() -> str:
    return _BACKEND


def _as_real(x, dtype):
    arr = np.ascontiguousarray(x, dtype=dtype)
    return arr


def fwht_pow2(a: np.ndarray) -> np.ndarray:
    """Walsh-Hadamard butterfly along the last axis of a 1-D or 2-D array.

    The last-axis length must be a power of two.  Returns a new array of the
    same shape and a floating dtype (float64 unless the input is float32).
    """
    arr = np.asarray(a)
    dtype = np.float32 if arr.dtype == np.float32 else np.float64
    squeeze = arr.ndim == 1
    work = np.array(arr.reshape(1, -1) if squeeze else arr, dtype=dtype, order="C")
    n = work.shape[-1]
    if n & (n - 1):
        raise ValueError(f"butterfly length {n} is not a power of two")
    _impl.fwht_inplace(work)
    return work[0] if squeeze else work


def causal_conv(x: np.ndarray, w: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Depthwise causal convolution: out[t, c] = sum_k w[k, c] * x[t-K+1+k, c] + bias[c]."""
    dtype = np.float32 if np.asarray(x).dtype == np.float32 else np.float64
    x = _as_real(x, dtype)
    w = _as_real(w, dtype)
    bias = _as_real(bias, dtype)
    if x.ndim != 2 or w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ValueError("conv expects x (T, C) and w (K, C)")
    if bias.shape != (x.shape[1],):
        raise ValueError("conv bias shape mismatch")
    out = np.empty_like(x)
    _impl.causal_conv(x, w, bias, out)
    return out


def selective_scan_core(x, delta, a, b, c, d, h0=None):
    """Run the time-varying linear recurrence.

    x, delta: (T, D); a: (D, N); b, c: (T, N); d: (D,).  h0, when given, is the
    carried (D, N) state (used for incremental decoding).  Returns (y, h) where
    y is (T, D) and h is the state after the last step.
    """
    dtype = np.float32 if np.asarray(x).dtype == np.float32 else np.float64
    x = _as_real(x, dtype)
    delta = _as_real(delta, dtype)
    a = _as_real(a, dtype)
    b = _as_real(b, dtype)
    c = _as_real(c, dtype)
    d = _as_real(d, dtype)
    T, D = x.shape
    N = a.shape[1]
    if delta.shape != (T, D) or b.shape != (T, N) or c.shape != (T, N):
        raise ValueError("scan argument shapes are inconsistent")
    if a.shape != (D, N) or d.shape != (D,):
        raise ValueError("scan parameter shapes are inconsistent")
    if h0 is None:
        h = np.zeros((D, N), dtype=dtype)
    else:
        h = np.array(h0, dtype=dtype, order="C")
        if h.shape != (D, N):
            raise ValueError("carried state shape mismatch")
    out = np.empty((T, D), dtype=dtype)
    _impl.selective_scan(x, delta, a, b, c, d, h, out)
    if not (np.isfinite(out).all() and np.isfinite(h).all()):
        raise FloatingPointError("scan divergence: non-finite intermediate")
    return out, h
