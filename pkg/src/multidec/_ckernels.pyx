# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: CTC forward-backward, CTC prefix extension, edit distance.

Signatures and semantics mirror ``multidec._pykernels`` exactly.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, INFINITY

cnp.import_array()


cdef inline double lae(double a, double b) nogil:
    cdef double m, d
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        m = a
        d = b - a
    else:
        m = b
        d = a - b
    return m + log1p(exp(d))


def ctc_forward_backward(double[:, ::1] logp, long[::1] labels, long blank):
    cdef Py_ssize_t T = logp.shape[0]
    cdef Py_ssize_t V = logp.shape[1]
    cdef Py_ssize_t L = labels.shape[0]
    cdef Py_ssize_t S = 2 * L + 1
    cdef Py_ssize_t t, s, k
    cdef long[::1] ext = np.empty(S, dtype=np.int64)
    for s in range(S):
        ext[s] = blank if s % 2 == 0 else labels[s // 2]

    alpha_np = np.full((T, S), -np.inf)
    beta_np = np.full((T, S), -np.inf)
    cdef double[:, ::1] alpha = alpha_np
    cdef double[:, ::1] beta = beta_np
    cdef double v, logprob

    alpha[0, 0] = logp[0, blank]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            v = alpha[t - 1, s]
            if s >= 1:
                v = lae(v, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]:
                v = lae(v, alpha[t - 1, s - 2])
            if v != -INFINITY:
                v = v + logp[t, ext[s]]
            alpha[t, s] = v

    beta[T - 1, S - 1] = logp[T - 1, blank]
    if S > 1:
        beta[T - 1, S - 2] = logp[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        for s in range(S):
            v = beta[t + 1, s]
            if s + 1 < S:
                v = lae(v, beta[t + 1, s + 1])
            if s + 2 < S and ext[s] != blank and ext[s] != ext[s + 2]:
                v = lae(v, beta[t + 1, s + 2])
            if v != -INFINITY:
                v = v + logp[t, ext[s]]
            beta[t, s] = v

    logprob = alpha[T - 1, S - 1]
    if S > 1:
        logprob = lae(logprob, alpha[T - 1, S - 2])

    grad_np = np.zeros((T, V))
    cdef double[:, ::1] grad = grad_np
    cdef double[:, ::1] occ
    if logprob == -INFINITY:
        return INFINITY, grad_np
    occ_np = np.full((T, V), -np.inf)
    occ = occ_np
    for t in range(T):
        for s in range(S):
            v = alpha[t, s] + beta[t, s]
            if v != -INFINITY:
                k = ext[s]
                occ[t, k] = lae(occ[t, k], v - logp[t, k])
        for k in range(V):
            if occ[t, k] != -INFINITY:
                grad[t, k] = -exp(occ[t, k] - logprob)
    return -logprob, grad_np


def ctc_prefix_extend(double[:, ::1] logp, double[:, ::1] r_prev, long last,
                      long[::1] cands, long blank, bint empty_prefix):
    cdef Py_ssize_t T = logp.shape[0]
    cdef Py_ssize_t C = cands.shape[0]
    cdef Py_ssize_t t, i
    cdef long c
    cdef double phi, psi, rn, rb
    r_np = np.full((C, T, 2), -np.inf)
    psi_np = np.full(C, -np.inf)
    cdef double[:, :, ::1] r = r_np
    cdef double[::1] psis = psi_np
    for i in range(C):
        c = cands[i]
        if empty_prefix:
            rn = logp[0, c]
        else:
            rn = -INFINITY
        rb = -INFINITY
        r[i, 0, 0] = rn
        r[i, 0, 1] = rb
        psi = rn
        for t in range(1, T):
            phi = r_prev[t - 1, 1]
            if c != last:
                phi = lae(phi, r_prev[t - 1, 0])
            if phi != -INFINITY:
                psi = lae(psi, phi + logp[t, c])
            rb = lae(rb, rn)
            if rb != -INFINITY:
                rb = rb + logp[t, blank]
            rn = lae(rn, phi)
            if rn != -INFINITY:
                rn = rn + logp[t, c]
            r[i, t, 0] = rn
            r[i, t, 1] = rb
        psis[i] = psi
    return r_np, psi_np


def edit_distance_ops(long[::1] ref, long[::1] hyp):
    cdef Py_ssize_t n = ref.shape[0]
    cdef Py_ssize_t m = hyp.shape[0]
    cdef Py_ssize_t i, j
    cdef long best, cost
    d_np = np.zeros((n + 1, m + 1), dtype=np.int64)
    cdef long[:, ::1] d = d_np
    for i in range(n + 1):
        d[i, 0] = i
    for j in range(m + 1):
        d[0, j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            best = d[i - 1, j - 1] + cost
            if d[i - 1, j] + 1 < best:
                best = d[i - 1, j] + 1
            if d[i, j - 1] + 1 < best:
                best = d[i, j - 1] + 1
            d[i, j] = best
    cdef long subs = 0, ins = 0, dels = 0
    i = n
    j = m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1):
            if ref[i - 1] != hyp[j - 1]:
                subs += 1
            i -= 1
            j -= 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(d[n, m]), int(subs), int(ins), int(dels)
