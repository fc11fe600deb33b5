# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_kernels_py``.

Signatures and return values match the numpy reference exactly; see that
module for the documentation of each function.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, exp, fabs, INFINITY, isfinite

cnp.import_array()

cdef double LOG_2PI = log(2.0 * 3.141592653589793)


def gauss_pairwise(double[:, ::1] z, double[:, ::1] means, double[:, ::1] var):
    cdef Py_ssize_t n = z.shape[0], d = z.shape[1], k = means.shape[0]
    cdef Py_ssize_t i, j, c
    out_arr = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    logdet_arr = np.empty(k, dtype=np.float64)
    cdef double[::1] logdet = logdet_arr
    cdef double acc, diff
    for c in range(k):
        acc = 0.0
        for j in range(d):
            acc += log(var[c, j])
        logdet[c] = acc
    for i in range(n):
        for c in range(k):
            acc = 0.0
            for j in range(d):
                diff = z[i, j] - means[c, j]
                acc += diff * diff / var[c, j]
            out[i, c] = -0.5 * (acc + logdet[c] + d * LOG_2PI)
    return out_arr


def gauss_pairwise_grad(double[:, ::1] g, double[:, ::1] z, double[:, ::1] means,
                        double[:, ::1] var):
    cdef Py_ssize_t n = z.shape[0], d = z.shape[1], k = means.shape[0]
    cdef Py_ssize_t i, j, c
    gz_arr = np.zeros((n, d), dtype=np.float64)
    gm_arr = np.zeros((k, d), dtype=np.float64)
    gv_arr = np.zeros((k, d), dtype=np.float64)
    cdef double[:, ::1] gz = gz_arr
    cdef double[:, ::1] gm = gm_arr
    cdef double[:, ::1] gv = gv_arr
    cdef double w, s
    for i in range(n):
        for c in range(k):
            w = g[i, c]
            if w == 0.0:
                continue
            for j in range(d):
                s = (z[i, j] - means[c, j]) / var[c, j]
                gz[i, j] -= w * s
                gm[c, j] += w * s
                gv[c, j] += w * (0.5 * s * s - 0.5 / var[c, j])
    return gz_arr, gm_arr, gv_arr


def hmm_pair_lse(double[:, ::1] log_emit_t, double[:, ::1] log_emit_next,
                 double[:, :, ::1] log_trans, double[::1] log_rho,
                 cnp.int64_t[::1] actions):
    cdef Py_ssize_t n = log_emit_t.shape[0], k = log_emit_t.shape[1]
    cdef Py_ssize_t i, a, b
    cdef cnp.int64_t act
    out_arr = np.empty(n, dtype=np.float64)
    resp_arr = np.empty((n, k, k), dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double[:, :, ::1] resp = resp_arr
    cdef double m, s, v
    for i in range(n):
        act = actions[i]
        m = -INFINITY
        for a in range(k):
            for b in range(k):
                v = log_rho[a] + log_emit_t[i, a] + log_trans[act, a, b] + log_emit_next[i, b]
                resp[i, a, b] = v
                if v > m:
                    m = v
        if not isfinite(m):
            m = 0.0
        s = 0.0
        for a in range(k):
            for b in range(k):
                v = exp(resp[i, a, b] - m)
                resp[i, a, b] = v
                s += v
        if s > 0.0:
            out[i] = m + log(s)
            for a in range(k):
                for b in range(k):
                    resp[i, a, b] /= s
        else:
            out[i] = -INFINITY
    return out_arr, resp_arr


def hmm_pair_lse_grad(double[::1] g, double[:, :, ::1] resp, cnp.int64_t[::1] actions,
                      Py_ssize_t n_actions):
    cdef Py_ssize_t n = resp.shape[0], k = resp.shape[1]
    cdef Py_ssize_t i, a, b
    cdef cnp.int64_t act
    gt_arr = np.zeros((n, k), dtype=np.float64)
    gn_arr = np.zeros((n, k), dtype=np.float64)
    gT_arr = np.zeros((n_actions, k, k), dtype=np.float64)
    cdef double[:, ::1] gt = gt_arr
    cdef double[:, ::1] gn = gn_arr
    cdef double[:, :, ::1] gT = gT_arr
    cdef double w
    for i in range(n):
        act = actions[i]
        for a in range(k):
            for b in range(k):
                w = g[i] * resp[i, a, b]
                gt[i, a] += w
                gn[i, b] += w
                gT[act, a, b] += w
    return gt_arr, gn_arr, gT_arr


def first_fit_groups(double[:, ::1] vectors, double eps):
    cdef Py_ssize_t m = vectors.shape[0], dim = vectors.shape[1]
    cdef Py_ssize_t i, j, p, q, gi, n_groups = 0
    labels_arr = np.full(m, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] labels = labels_arr
    # members of group gi are rows with labels == gi and index < i; walk them
    # through a linked list to keep the scan O(group size)
    head_arr = np.full(m, -1, dtype=np.int64)
    nxt_arr = np.full(m, -1, dtype=np.int64)
    tail_arr = np.full(m, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] head = head_arr
    cdef cnp.int64_t[::1] nxt = nxt_arr
    cdef cnp.int64_t[::1] tail = tail_arr
    cdef bint ok
    for i in range(m):
        for gi in range(n_groups):
            ok = True
            p = head[gi]
            while p != -1 and ok:
                for j in range(dim):
                    if fabs(vectors[p, j] - vectors[i, j]) > eps:
                        ok = False
                        break
                p = nxt[p]
            if ok:
                labels[i] = gi
                nxt[tail[gi]] = i
                tail[gi] = i
                break
        if labels[i] == -1:
            labels[i] = n_groups
            head[n_groups] = i
            tail[n_groups] = i
            n_groups += 1
    return labels_arr


def bellman_iterate(double[:, :, ::1] trans, double[:, ::1] reward, double gamma,
                    double tol, long max_iters):
    cdef Py_ssize_t na = trans.shape[0], k = trans.shape[1]
    cdef Py_ssize_t s, a, t
    q_arr = np.array(reward, dtype=np.float64, copy=True)
    qn_arr = np.empty_like(q_arr)
    v_arr = np.empty(k, dtype=np.float64)
    cdef double[:, ::1] q = q_arr
    cdef double[:, ::1] qn = qn_arr
    cdef double[::1] v = v_arr
    cdef double acc, best, delta = INFINITY, diff
    cdef long it = 0
    while it < max_iters:
        for s in range(k):
            best = -INFINITY
            for a in range(na):
                if q[s, a] > best:
                    best = q[s, a]
            v[s] = best
        delta = 0.0
        for s in range(k):
            for a in range(na):
                acc = 0.0
                for t in range(k):
                    acc += trans[a, s, t] * v[t]
                qn[s, a] = reward[s, a] + gamma * acc
                diff = fabs(qn[s, a] - q[s, a])
                if diff > delta:
                    delta = diff
        q[:, :] = qn
        it += 1
        if delta < tol:
            break
    return q_arr, it, delta
