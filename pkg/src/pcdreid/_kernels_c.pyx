# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; see ``_kernels_py`` for the reference semantics."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _imax(Py_ssize_t a, Py_ssize_t b) nogil:
    return a if a > b else b


cdef inline Py_ssize_t _imin(Py_ssize_t a, Py_ssize_t b) nogil:
    return a if a < b else b


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w):
    # one shifted plane per kernel tap; the innermost loop is contiguous
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], k = w.shape[3], p = k // 2
    out_arr = np.zeros((B, O, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, o, c, h, ww, i, j, di, dj, w0, w1
    cdef double wt
    with nogil:
        for b in range(B):
            for o in range(O):
                for c in range(C):
                    for i in range(k):
                        di = i - p
                        for j in range(k):
                            dj = j - p
                            wt = w[o, c, i, j]
                            w0 = _imax(0, -dj)
                            w1 = _imin(W, W - dj)
                            for h in range(_imax(0, -di), _imin(H, H - di)):
                                for ww in range(w0, w1):
                                    out[b, o, h, ww] += wt * x[b, c, h + di, ww + dj]
    return out_arr


def conv2d_backward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                    double[:, :, :, ::1] gout):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], k = w.shape[3], p = k // 2
    gx_arr = np.zeros((B, C, H, W), dtype=np.float64)
    gw_arr = np.zeros((O, C, k, k), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, o, c, h, ww, i, j, di, dj, w0, w1
    cdef double wt, acc
    with nogil:
        for b in range(B):
            for o in range(O):
                for c in range(C):
                    for i in range(k):
                        di = i - p
                        for j in range(k):
                            dj = j - p
                            wt = w[o, c, i, j]
                            w0 = _imax(0, -dj)
                            w1 = _imin(W, W - dj)
                            acc = 0.0
                            for h in range(_imax(0, -di), _imin(H, H - di)):
                                for ww in range(w0, w1):
                                    gx[b, c, h + di, ww + dj] += wt * gout[b, o, h, ww]
                                    acc = acc + gout[b, o, h, ww] * x[b, c, h + di, ww + dj]
                            gw[o, c, i, j] += acc
    return gx_arr, gw_arr


def rank_metrics(signed char[:, ::1] matches, signed char[:, ::1] keep):
    cdef Py_ssize_t Q = matches.shape[0], G = matches.shape[1]
    first_arr = np.zeros(Q, dtype=np.int64)
    ap_arr = np.zeros(Q, dtype=np.float64)
    inp_arr = np.zeros(Q, dtype=np.float64)
    nm_arr = np.zeros(Q, dtype=np.int64)
    nk_arr = np.zeros(Q, dtype=np.int64)
    cdef cnp.int64_t[::1] first_hit = first_arr
    cdef double[::1] ap = ap_arr
    cdef double[::1] inp = inp_arr
    cdef cnp.int64_t[::1] num_matches = nm_arr
    cdef cnp.int64_t[::1] num_kept = nk_arr
    cdef Py_ssize_t q, g
    cdef long n, kc, last
    cdef double acc
    with nogil:
        for q in range(Q):
            n = 0
            kc = 0
            last = 0
            acc = 0.0
            for g in range(G):
                if keep[q, g] == 0:
                    continue
                n += 1
                if matches[q, g] != 0:
                    kc += 1
                    acc = acc + (<double>kc) / (<double>n)
                    last = n
                    if kc == 1:
                        first_hit[q] = n
            num_kept[q] = n
            num_matches[q] = kc
            if kc > 0:
                ap[q] = acc / (<double>kc)
                inp[q] = (<double>kc) / (<double>last)
    return first_arr, ap_arr, inp_arr, nm_arr, nk_arr
