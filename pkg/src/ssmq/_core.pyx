# Compiled kernel core: selective scan, depthwise causal conv, WHT butterfly.
# Signatures mirror ssmq._py_kernels; wrappers in ssmq.kernels pick a backend
# at import time.

from libc.math cimport exp, expf

ctypedef fused real:
    float
    double


def fwht_inplace(real[:, ::1] a):
    cdef Py_ssize_t rows = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t r, h, i, j
    cdef real u, v
    for r in range(rows):
        h = 1
        while h < n:
            i = 0
            while i < n:
                for j in range(i, i + h):
                    u = a[r, j]
                    v = a[r, j + h]
                    a[r, j] = u + v
                    a[r, j + h] = u - v
                i += 2 * h
            h *= 2
    return None


def causal_conv(real[:, ::1] x, real[:, ::1] w, real[::1] bias, real[:, ::1] out):
    cdef Py_ssize_t T = x.shape[0], C = x.shape[1], K = w.shape[0]
    cdef Py_ssize_t t, c, k, src
    cdef real acc, xv
    for t in range(T):
        for c in range(C):
            acc = bias[c]
            for k in range(K):
                src = t - (K - 1) + k
                xv = x[src, c] if src >= 0 else <real>0
                acc = acc + w[k, c] * xv
            out[t, c] = acc
    return None


def selective_scan(real[:, ::1] x, real[:, ::1] delta, real[:, ::1] a,
                   real[:, ::1] b, real[:, ::1] c, real[::1] d,
                   real[:, ::1] h, real[:, ::1] out):
    cdef Py_ssize_t T = x.shape[0], D = x.shape[1], N = a.shape[1]
    cdef Py_ssize_t t, i, j
    cdef real dt, dbx, acc, hv
    for t in range(T):
        for i in range(D):
            dt = delta[t, i]
            dbx = dt * x[t, i]
            acc = <real>0
            for j in range(N):
                if real is float:
                    hv = h[i, j] * expf(dt * a[i, j]) + dbx * b[t, j]
                else:
                    hv = h[i, j] * exp(dt * a[i, j]) + dbx * b[t, j]
                h[i, j] = hv
                acc = acc + hv * c[t, j]
            out[t, i] = acc + d[i] * x[t, i]
    return None
