"""Pure numpy implementations of the hot kernels.

These are the fallback used when the compiled ``_kernels`` extension is not
available, and the reference the extension is tested against.  Every function
here has an identically named, identically behaving twin in ``_kernels.pyx``.
"""
import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


def gauss_pairwise(z, means, var):
    """Diagonal Gaussian log-densities of every row of ``z`` under every component.

    z: (N, d), means: (K, d), var: (K, d) -> (N, K)
    """
    diff = z[:, None, :] - means[None, :, :]
    quad = np.sum(diff * diff / var[None, :, :], axis=2)
    logdet = np.sum(np.log(var), axis=1)
    return -0.5 * (quad + logdet[None, :] + z.shape[1] * LOG_2PI)


def gauss_pairwise_grad(g, z, means, var):
    """Vector-Jacobian product of :func:`gauss_pairwise` for upstream ``g`` (N, K)."""
    diff = z[:, None, :] - means[None, :, :]
    scaled = diff / var[None, :, :]
    w = g[:, :, None]
    gz = -np.sum(w * scaled, axis=1)
    gm = np.sum(w * scaled, axis=0)
    gv = np.sum(w * (0.5 * scaled * scaled - 0.5 / var[None, :, :]), axis=0)
    return gz, gm, gv


def hmm_pair_lse(log_emit_t, log_emit_next, log_trans, log_rho, actions):
    """log sum_{k,l} exp(rho_k + e_t[k] + logT[a][k,l] + e_next[l]) per row.

    Returns the values (N,) and the normalized joint responsibilities (N, K, K).
    """
    joint = (
        log_rho[None, :, None]
        + log_emit_t[:, :, None]
        + log_trans[actions]
        + log_emit_next[:, None, :]
    )
    n = joint.shape[0]
    flat = joint.reshape(n, -1)
    m = np.max(flat, axis=1)
    m = np.where(np.isfinite(m), m, 0.0)
    w = np.exp(flat - m[:, None])
    s = np.sum(w, axis=1)
    with np.errstate(divide="ignore"):
        out = m + np.log(s)
    resp = (w / np.where(s > 0, s, 1.0)[:, None]).reshape(joint.shape)
    return out, resp


def hmm_pair_lse_grad(g, resp, actions, n_actions):
    """Gradients of :func:`hmm_pair_lse` w.r.t. both emission tables and logT."""
    wr = g[:, None, None] * resp
    g_t = np.sum(wr, axis=2)
    g_next = np.sum(wr, axis=1)
    k = resp.shape[1]
    g_trans = np.zeros((n_actions, k, k))
    np.add.at(g_trans, actions, wr)
    return g_t, g_next, g_trans


def first_fit_groups(vectors, eps):
    """Greedy first-fit grouping in row order.

    A row joins the first existing group all of whose members lie within
    ``eps`` of it in max norm; otherwise it opens a new group.  Returns an int
    label per row, labels numbered in order of creation.
    """
    m = vectors.shape[0]
    labels = np.full(m, -1, dtype=np.int64)
    groups = []
    for i in range(m):
        v = vectors[i]
        for gi, members in enumerate(groups):
            if np.max(np.abs(vectors[members] - v)) <= eps:
                members.append(i)
                labels[i] = gi
                break
        else:
            groups.append([i])
            labels[i] = len(groups) - 1
    return labels


def bellman_iterate(trans, reward, gamma, tol, max_iters):
    """Q-value iteration. trans: (A, K, K), reward: (K, A).

    Returns (Q, iterations, final sup-norm change).
    """
    q = np.array(reward, dtype=float, copy=True)
    delta = np.inf
    it = 0
    while it < max_iters:
        v = np.max(q, axis=1)
        q_new = reward + gamma * np.einsum("akl,l->ka", trans, v)
        delta = float(np.max(np.abs(q_new - q))) if q.size else 0.0
        q = q_new
        it += 1
        if delta < tol:
            break
    return q, it, delta
