"""Pure-numpy kernels: import-time fallback when the compiled core is absent.

The three hot loops (selective scan, depthwise causal conv, Walsh-Hadamard
butterfly) have identical signatures in `ssmq._core`.  The butterfly and the
conv use the same operation order as the C versions and produce bit-identical
results; the scan matches within floating-point tolerance (libm vs numpy
transcendentals).
"""

import numpy as np


def fwht_inplace(a):
    # a: (rows, n) contiguous, n a power of two; butterfly along the last axis
    rows, n = a.shape
    h = 1
    while h < n:
        v = a.reshape(rows, n // (2 * h), 2, h)
        s = v[:, :, 0, :] + v[:, :, 1, :]
        d = v[:, :, 0, :] - v[:, :, 1, :]
        v[:, :, 0, :] = s
        v[:, :, 1, :] = d
        h *= 2
    return a


def causal_conv(x, w, bias, out):
    # x: (T, C); w: (K, C); bias: (C,); left-padded with K-1 zeros
    T, C = x.shape
    K = w.shape[0]
    xp = np.zeros((T + K - 1, C), dtype=x.dtype)
    xp[K - 1:] = x
    out[:] = bias
    for k in range(K):
        out += w[k] * xp[k:k + T]
    return out


def selective_scan(x, delta, a, b, c, d, h, out):
    # x, delta: (T, D); a: (D, N); b, c: (T, N); d: (D,); h: (D, N) carried state
    T = x.shape[0]
    # Overflow surfaces as non-finite output and is raised by the wrapper.
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            da = np.exp(delta[t][:, None] * a)
            dbx = (delta[t] * x[t])[:, None] * b[t][None, :]
            h *= da
            h += dbx
            out[t] = h @ c[t] + d * x[t]
    return out
