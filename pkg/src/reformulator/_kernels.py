"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with the same signature.  The compiled
versions are used unless ``REFORMULATOR_NUMBA=0`` is set in the environment
(or numba cannot be imported).  Both variants are importable directly as
``<name>_numpy`` / ``<name>_numba`` so tests and benchmarks can compare them.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("REFORMULATOR_NUMBA", "1") != "0"


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def softmax_rows_numpy(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_gates_forward_numpy(gx, gh, h):
    """Gate arithmetic of one GRU step.

    ``gx`` and ``gh`` are the input and hidden projections (bias included),
    laid out as [reset | update | candidate] blocks of width H.
    Returns (h_new, r, z, n).
    """
    H = h.shape[1]
    r = _sigmoid(gx[:, :H] + gh[:, :H])
    z = _sigmoid(gx[:, H : 2 * H] + gh[:, H : 2 * H])
    n = np.tanh(gx[:, 2 * H :] + r * gh[:, 2 * H :])
    h_new = (1.0 - z) * n + z * h
    return h_new, r, z, n


def gru_gates_backward_numpy(dh_new, h, gh, r, z, n):
    """Returns (d_gx, d_gh, d_h) for the gate arithmetic above."""
    H = h.shape[1]
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dh = dh_new * z
    da_n = dn * (1.0 - n * n)
    dr = da_n * gh[:, 2 * H :]
    da_r = dr * r * (1.0 - r)
    da_z = dz * z * (1.0 - z)
    d_gx = np.concatenate([da_r, da_z, da_n], axis=1)
    d_gh = np.concatenate([da_r, da_z, da_n * r], axis=1)
    return d_gx, d_gh, dh


def best_span_numpy(in_question, bonus, max_span, window):
    """Pick the best-scoring span of a tokenised context.

    ``in_question[i]`` is 1.0 when context token i occurs in the question,
    ``bonus[i]`` is added to every span starting at i.  A span's score is
    2 x (question tokens inside it) + (question tokens within ``window`` of
    it) + bonus - 0.1 x length.  Ties go to the earliest, then shortest span.
    """
    L = in_question.shape[0]
    best = -np.inf
    best_s, best_e = 0, 1
    csum = np.concatenate([[0.0], np.cumsum(in_question)])
    for s in range(L):
        for ln in range(1, max_span + 1):
            e = s + ln
            if e > L:
                break
            inside = csum[e] - csum[s]
            lo = max(0, s - window)
            hi = min(L, e + window)
            near = csum[hi] - csum[lo] - inside
            score = 2.0 * inside + near + bonus[s] - 0.1 * ln
            if score > best + 1e-12:
                best = score
                best_s, best_e = s, e
    return best_s, best_e


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def softmax_rows_numba(x):
        n, v = x.shape
        out = np.empty_like(x)
        for i in range(n):
            m = x[i, 0]
            for j in range(1, v):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(v):
                e = np.exp(x[i, j] - m)
                out[i, j] = e
                s += e
            for j in range(v):
                out[i, j] /= s
        return out

    @numba.njit(cache=True)
    def gru_gates_forward_numba(gx, gh, h):
        b, H = h.shape
        h_new = np.empty_like(h)
        r = np.empty_like(h)
        z = np.empty_like(h)
        n = np.empty_like(h)
        for i in range(b):
            for k in range(H):
                rk = 0.5 * (1.0 + np.tanh(0.5 * (gx[i, k] + gh[i, k])))
                zk = 0.5 * (1.0 + np.tanh(0.5 * (gx[i, H + k] + gh[i, H + k])))
                nk = np.tanh(gx[i, 2 * H + k] + rk * gh[i, 2 * H + k])
                r[i, k] = rk
                z[i, k] = zk
                n[i, k] = nk
                h_new[i, k] = (1.0 - zk) * nk + zk * h[i, k]
        return h_new, r, z, n

    @numba.njit(cache=True)
    def gru_gates_backward_numba(dh_new, h, gh, r, z, n):
        b, H = h.shape
        d_gx = np.empty((b, 3 * H))
        d_gh = np.empty((b, 3 * H))
        dh = np.empty_like(h)
        for i in range(b):
            for k in range(H):
                g = dh_new[i, k]
                zk = z[i, k]
                nk = n[i, k]
                rk = r[i, k]
                dn = g * (1.0 - zk)
                dz = g * (h[i, k] - nk)
                dh[i, k] = g * zk
                da_n = dn * (1.0 - nk * nk)
                dr = da_n * gh[i, 2 * H + k]
                da_r = dr * rk * (1.0 - rk)
                da_z = dz * zk * (1.0 - zk)
                d_gx[i, k] = da_r
                d_gx[i, H + k] = da_z
                d_gx[i, 2 * H + k] = da_n
                d_gh[i, k] = da_r
                d_gh[i, H + k] = da_z
                d_gh[i, 2 * H + k] = da_n * rk
        return d_gx, d_gh, dh

    @numba.njit(cache=True)
    def best_span_numba(in_question, bonus, max_span, window):
        L = in_question.shape[0]
        csum = np.zeros(L + 1)
        for i in range(L):
            csum[i + 1] = csum[i] + in_question[i]
        best = -np.inf
        best_s = 0
        best_e = 1
        for s in range(L):
            for ln in range(1, max_span + 1):
                e = s + ln
                if e > L:
                    break
                inside = csum[e] - csum[s]
                lo = max(0, s - window)
                hi = min(L, e + window)
                near = csum[hi] - csum[lo] - inside
                score = 2.0 * inside + near + bonus[s] - 0.1 * ln
                if score > best + 1e-12:
                    best = score
                    best_s = s
                    best_e = e
        return best_s, best_e

else:  # pragma: no cover
    softmax_rows_numba = softmax_rows_numpy
    gru_gates_forward_numba = gru_gates_forward_numpy
    gru_gates_backward_numba = gru_gates_backward_numpy
    best_span_numba = best_span_numpy


if USE_NUMBA:
    softmax_rows = softmax_rows_numba
    gru_gates_forward = gru_gates_forward_numba
    gru_gates_backward = gru_gates_backward_numba
    best_span = best_span_numba
else:
    softmax_rows = softmax_rows_numpy
    gru_gates_forward = gru_gates_forward_numpy
    gru_gates_backward = gru_gates_backward_numpy
    best_span = best_span_numpy
