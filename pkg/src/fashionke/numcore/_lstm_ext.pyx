# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled LSTM recurrence kernels.

Same contract as ``_lstm_py``: time-major arrays, gates ordered
input/forget/candidate/output, masked steps carry state and emit zeros.
The recurrent product goes through BLAS dgemm; gate math is fused per step.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport copysign, exp, expm1, fabs
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline double _sig(double z) noexcept nogil:
    return 1.0 / (1.0 + exp(-z))


cdef inline double _tanh(double z) noexcept nogil:
    # expm1 keeps full relative accuracy near 0 and is several times cheaper
    # than libm tanh
    cdef double e = expm1(-2.0 * fabs(z))
    return copysign(-e / (2.0 + e), z)


cdef inline void _matmul_acc(double* a, double* w, double* c, int B, int K, int N,
                             double beta) noexcept nogil:
    # row-major c(B,N) = a(B,K) @ w(K,N) + beta * c
    cdef char tr = b'N'
    cdef double one = 1.0
    dgemm(&tr, &tr, &N, &B, &K, &one, w, &N, a, &K, &beta, c, &N)


cdef inline void _matmul_bt(double* a, double* w, double* c, int B, int N, int K) noexcept nogil:
    # row-major c(B,K) = a(B,N) @ w(K,N).T
    cdef char trt = b'T'
    cdef char trn = b'N'
    cdef double one = 1.0
    cdef double zero = 0.0
    dgemm(&trt, &trn, &K, &B, &N, &one, w, &N, a, &N, &zero, c, &K)


def lstm_forward(gx, wh, mask, h0, c0):
    cdef double[:, :, ::1] GX = np.ascontiguousarray(gx, dtype=np.float64)
    cdef double[:, ::1] WH = np.ascontiguousarray(wh, dtype=np.float64)
    cdef double[:, ::1] M = np.ascontiguousarray(mask, dtype=np.float64)
    cdef int T = GX.shape[0]
    cdef int B = GX.shape[1]
    cdef int G = GX.shape[2]
    cdef int H = G // 4
    hs_a = np.empty((T + 1, B, H))
    cs_a = np.empty((T + 1, B, H))
    gates_a = np.empty((T, B, G))
    tc_a = np.empty((T, B, H))
    out_a = np.empty((T, B, H))
    cdef double[:, :, ::1] hs = hs_a
    cdef double[:, :, ::1] cs = cs_a
    cdef double[:, :, ::1] A = gates_a
    cdef double[:, :, ::1] tc = tc_a
    cdef double[:, :, ::1] out = out_a
    hs_a[0] = h0
    cs_a[0] = c0
    cdef int t, b, j
    cdef double m, ig, fg, gg, og, cn, th
    if T == 0 or B == 0 or H == 0:
        return out_a, hs_a, cs_a, gates_a, tc_a
    with nogil:
        for t in range(T):
            for b in range(B):
                for j in range(G):
                    A[t, b, j] = GX[t, b, j]
            _matmul_acc(&hs[t, 0, 0], &WH[0, 0], &A[t, 0, 0], B, H, G, 1.0)
            for b in range(B):
                m = M[t, b]
                for j in range(H):
                    ig = _sig(A[t, b, j])
                    fg = _sig(A[t, b, H + j])
                    gg = _tanh(A[t, b, 2 * H + j])
                    og = _sig(A[t, b, 3 * H + j])
                    A[t, b, j] = ig
                    A[t, b, H + j] = fg
                    A[t, b, 2 * H + j] = gg
                    A[t, b, 3 * H + j] = og
                    cn = fg * cs[t, b, j] + ig * gg
                    th = _tanh(cn)
                    tc[t, b, j] = th
                    out[t, b, j] = m * (og * th)
                    cs[t + 1, b, j] = m * cn + (1.0 - m) * cs[t, b, j]
                    hs[t + 1, b, j] = out[t, b, j] + (1.0 - m) * hs[t, b, j]
    return out_a, hs_a, cs_a, gates_a, tc_a


def lstm_backward(dout, dh_last, dc_last, wh, mask, cs, gates, tc):
    cdef double[:, :, ::1] DO = np.ascontiguousarray(dout, dtype=np.float64)
    cdef double[:, ::1] WH = np.ascontiguousarray(wh, dtype=np.float64)
    cdef double[:, ::1] M = np.ascontiguousarray(mask, dtype=np.float64)
    cdef double[:, :, ::1] CS = np.ascontiguousarray(cs, dtype=np.float64)
    cdef double[:, :, ::1] A = np.ascontiguousarray(gates, dtype=np.float64)
    cdef double[:, :, ::1] TC = np.ascontiguousarray(tc, dtype=np.float64)
    cdef int T = A.shape[0]
    cdef int B = A.shape[1]
    cdef int G = A.shape[2]
    cdef int H = G // 4
    dh_a = np.array(dh_last, dtype=np.float64, order="C")
    dc_a = np.array(dc_last, dtype=np.float64, order="C")
    dg_a = np.empty((T, B, G))
    rec_a = np.empty((B, H))
    cdef double[:, ::1] dh = dh_a
    cdef double[:, ::1] dc = dc_a
    cdef double[:, :, ::1] dg = dg_a
    cdef double[:, ::1] rec = rec_a
    cdef int t, b, j
    cdef double m, ig, fg, gg, og, th, dhn, dcn
    if T == 0 or B == 0 or H == 0:
        return dg_a, dh_a, dc_a
    with nogil:
        for t in range(T - 1, -1, -1):
            for b in range(B):
                m = M[t, b]
                for j in range(H):
                    ig = A[t, b, j]
                    fg = A[t, b, H + j]
                    gg = A[t, b, 2 * H + j]
                    og = A[t, b, 3 * H + j]
                    th = TC[t, b, j]
                    dhn = m * (dh[b, j] + DO[t, b, j])
                    dcn = m * dc[b, j] + dhn * og * (1.0 - th * th)
                    dg[t, b, j] = dcn * gg * ig * (1.0 - ig)
                    dg[t, b, H + j] = dcn * CS[t, b, j] * fg * (1.0 - fg)
                    dg[t, b, 2 * H + j] = dcn * ig * (1.0 - gg * gg)
                    dg[t, b, 3 * H + j] = dhn * th * og * (1.0 - og)
                    dh[b, j] = (1.0 - m) * dh[b, j]
                    dc[b, j] = (1.0 - m) * dc[b, j] + dcn * fg
            _matmul_bt(&dg[t, 0, 0], &WH[0, 0], &rec[0, 0], B, G, H)
            for b in range(B):
                for j in range(H):
                    dh[b, j] = dh[b, j] + rec[b, j]
    return dg_a, dh_a, dc_a
