"""Hot-loop kernels, compiled when available.

The Cython extension ``bisimvib._kernels`` is used if it was built; otherwise
the numpy implementations in ``bisimvib._kernels_py`` are used.  Setting the
environment variable ``BISIMVIB_PURE_PYTHON=1`` forces the fallback.

All wrappers coerce their inputs to C-contiguous float64/int64 so both
backends see identical data.
"""
import os

import numpy as np

from . import _kernels_py

_compiled = None
if os.environ.get("BISIMVIB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


# typed memoryviews in the extension need writable buffers, so read-only
# inputs (e.g. np.broadcast_to views) are copied
def _f(x):
    return np.require(x, dtype=np.float64, requirements=("C", "W"))


def _i(x):
    return np.require(x, dtype=np.int64, requirements=("C", "W"))


def backends():
    """Available kernel modules keyed by name (used by tests and benchmarks)."""
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def _impl(backend):
    if backend is None:
        return _compiled if _compiled is not None else _kernels_py
    return backends()[backend]


def gauss_pairwise(z, means, var, backend=None):
    return _impl(backend).gauss_pairwise(_f(z), _f(means), _f(var))


def gauss_pairwise_grad(g, z, means, var, backend=None):
    return _impl(backend).gauss_pairwise_grad(_f(g), _f(z), _f(means), _f(var))


def hmm_pair_lse(log_emit_t, log_emit_next, log_trans, log_rho, actions, backend=None):
    return _impl(backend).hmm_pair_lse(
        _f(log_emit_t), _f(log_emit_next), _f(log_trans), _f(log_rho), _i(actions)
    )


def hmm_pair_lse_grad(g, resp, actions, n_actions, backend=None):
    return _impl(backend).hmm_pair_lse_grad(_f(g), _f(resp), _i(actions), int(n_actions))


def first_fit_groups(vectors, eps, backend=None):
    vectors = _f(vectors)
    if vectors.ndim == 1:
        vectors = vectors[:, None]
    if vectors.shape[1] == 0:
        return np.zeros(vectors.shape[0], dtype=np.int64)
    return _impl(backend).first_fit_groups(vectors, float(eps))


def bellman_iterate(trans, reward, gamma, tol, max_iters, backend=None):
    q, it, delta = _impl(backend).bellman_iterate(
        _f(trans), _f(reward), float(gamma), float(tol), int(max_iters)
    )
    return q, int(it), float(delta)
