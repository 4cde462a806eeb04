"""Pure-Python/numpy versions of the compiled kernels in ``_ckernels.pyx``.

Used when the extension is not built, or when ``MULTIDEC_PURE_PYTHON=1``.
"""

from __future__ import annotations

import numpy as np

NEG_INF = -np.inf


def ctc_forward_backward(logp: np.ndarray, labels: np.ndarray, blank: int):
    """Negative log-likelihood of ``labels`` and its gradient w.r.t. ``logp``."""
    T, V = logp.shape
    L = len(labels)
    S = 2 * L + 1
    ext = np.full(S, blank, dtype=np.int64)
    ext[1::2] = labels
    # skip transition s-2 -> s allowed for non-blank labels differing from s-2
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    emit = logp[:, ext]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = alpha[t - 1]
            v = prev.copy()
            v[1:] = np.logaddexp(v[1:], prev[:-1])
            v[2:] = np.where(skip[2:], np.logaddexp(v[2:], prev[:-2]), v[2:])
            alpha[t] = v + emit[t]

        beta = np.full((T, S), NEG_INF)
        beta[T - 1, S - 1] = emit[T - 1, S - 1]
        if S > 1:
            beta[T - 1, S - 2] = emit[T - 1, S - 2]
        skip_fwd = np.zeros(S, dtype=bool)
        skip_fwd[:-2] = skip[2:]
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1]
            v = nxt.copy()
            v[:-1] = np.logaddexp(v[:-1], nxt[1:])
            v[:-2] = np.where(skip_fwd[:-2], np.logaddexp(v[:-2], nxt[2:]), v[:-2])
            beta[t] = v + emit[t]

        logprob = alpha[T - 1, S - 1]
        if S > 1:
            logprob = np.logaddexp(logprob, alpha[T - 1, S - 2])
        grad = np.zeros((T, V))
        if logprob == NEG_INF:
            return float("inf"), grad
        occ = np.full((T, V), NEG_INF)
        ab = alpha + beta - emit
        for s in range(S):
            occ[:, ext[s]] = np.logaddexp(occ[:, ext[s]], ab[:, s])
        finite = occ > NEG_INF
        grad[finite] = -np.exp(occ[finite] - logprob)
    return float(-logprob), grad


def ctc_prefix_extend(logp, r_prev, last: int, cands, blank: int, empty_prefix: bool):
    """Extend a CTC prefix by each candidate; return forward vars and prefix log-probs."""
    T = logp.shape[0]
    C = len(cands)
    cands = np.asarray(cands)
    r = np.full((C, T, 2), NEG_INF)
    x = logp[:, cands]
    xb = logp[:, blank]
    rn = x[0].copy() if empty_prefix else np.full(C, NEG_INF)
    rb = np.full(C, NEG_INF)
    r[:, 0, 0] = rn
    r[:, 0, 1] = rb
    psi = rn.copy()
    same = cands == last
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            phi = np.where(same, r_prev[t - 1, 1], np.logaddexp(r_prev[t - 1, 1], r_prev[t - 1, 0]))
            psi = np.logaddexp(psi, phi + x[t])
            rb = np.logaddexp(rb, rn) + xb[t]
            rn = np.logaddexp(rn, phi) + x[t]
            r[:, t, 0] = rn
            r[:, t, 1] = rb
    return r, psi


def edit_distance_ops(ref, hyp):
    """Levenshtein distance with (substitutions, insertions, deletions) from a backtrace."""
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i][j] = min(d[i - 1][j - 1] + cost, d[i - 1][j] + 1, d[i][j - 1] + 1)
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i -= 1
            j -= 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return d[n][m], int(subs), ins, dels
