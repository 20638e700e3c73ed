# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled LSTM recurrence.

Same contract as ``ccsq._lstm_py``; see that module for the equations.
"""
import numpy as np

from libc.math cimport exp, tanh


cdef inline double _sigmoid(double z) nogil:
    if z >= 0:
        return 1.0 / (1.0 + exp(-z))
    cdef double e = exp(z)
    return e / (1.0 + e)


def lstm_forward(const double[:, ::1] zin, const double[:, ::1] wh):
    cdef Py_ssize_t T = zin.shape[0]
    cdef Py_ssize_t G = zin.shape[1]
    cdef Py_ssize_t H = wh.shape[1]
    if G != 4 * H or wh.shape[0] != G:
        raise ValueError("shape mismatch between input projection and recurrent weights")
    acts_a = np.empty((T, G), dtype=np.float64)
    c_a = np.empty((T, H), dtype=np.float64)
    h_a = np.empty((T, H), dtype=np.float64)
    cdef double[:, ::1] acts = acts_a
    cdef double[:, ::1] c = c_a
    cdef double[:, ::1] h = h_a
    cdef Py_ssize_t t, j, k
    cdef double s, cprev, ig, fg, gg, og
    with nogil:
        for t in range(T):
            for j in range(G):
                s = zin[t, j]
                if t > 0:
                    for k in range(H):
                        s = s + wh[j, k] * h[t - 1, k]
                acts[t, j] = s
            for j in range(H):
                ig = _sigmoid(acts[t, j])
                fg = _sigmoid(acts[t, H + j])
                gg = tanh(acts[t, 2 * H + j])
                og = _sigmoid(acts[t, 3 * H + j])
                acts[t, j] = ig
                acts[t, H + j] = fg
                acts[t, 2 * H + j] = gg
                acts[t, 3 * H + j] = og
                cprev = c[t - 1, j] if t > 0 else 0.0
                c[t, j] = fg * cprev + ig * gg
                h[t, j] = og * tanh(c[t, j])
    return acts_a, c_a, h_a


def lstm_backward(const double[:, ::1] acts, const double[:, ::1] c,
                  const double[:, ::1] h, const double[:, ::1] wh,
                  const double[:, ::1] dh):
    cdef Py_ssize_t T = acts.shape[0]
    cdef Py_ssize_t G = acts.shape[1]
    cdef Py_ssize_t H = wh.shape[1]
    dz_a = np.zeros((T, G), dtype=np.float64)
    dwh_a = np.zeros((G, H), dtype=np.float64)
    cdef double[:, ::1] dz = dz_a
    cdef double[:, ::1] dwh = dwh_a
    cdef double[::1] dh_next = np.zeros(H, dtype=np.float64)
    cdef double[::1] dc_next = np.zeros(H, dtype=np.float64)
    cdef Py_ssize_t t, j, k
    cdef double ig, fg, gg, og, tc, dht, dc, cprev, s
    with nogil:
        for t in range(T - 1, -1, -1):
            for j in range(H):
                ig = acts[t, j]
                fg = acts[t, H + j]
                gg = acts[t, 2 * H + j]
                og = acts[t, 3 * H + j]
                tc = tanh(c[t, j])
                dht = dh[t, j] + dh_next[j]
                dc = dht * og * (1.0 - tc * tc) + dc_next[j]
                cprev = c[t - 1, j] if t > 0 else 0.0
                dz[t, j] = dc * gg * ig * (1.0 - ig)
                dz[t, H + j] = dc * cprev * fg * (1.0 - fg)
                dz[t, 2 * H + j] = dc * ig * (1.0 - gg * gg)
                dz[t, 3 * H + j] = dht * tc * og * (1.0 - og)
                dc_next[j] = dc * fg
            if t > 0:
                for k in range(H):
                    s = 0.0
                    for j in range(G):
                        s = s + wh[j, k] * dz[t, j]
                    dh_next[k] = s
                for j in range(G):
                    for k in range(H):
                        dwh[j, k] = dwh[j, k] + dz[t, j] * h[t - 1, k]
    return dz_a, dwh_a
