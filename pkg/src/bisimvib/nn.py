"""Minimal reverse-mode automatic differentiation over dense graphs.

A :class:`Graph` is built once from placeholders (:meth:`Graph.input`),
trainable :class:`Parameter` objects and a fixed set of primitives, then
evaluated repeatedly with :meth:`Graph.forward` and differentiated with
:meth:`Graph.backward`.  Node-to-node elementwise primitives require equal
shapes; only constants broadcast.

Also provides dense layers, a small MLP, the Adam optimizer and JSON
(de)serialization of parameter sets.
"""
import itertools

import numpy as np

from . import kernels
from .errors import TrainingError, UsageError

_ids = itertools.count()
LOG_2PI = float(np.log(2.0 * np.pi))


class Parameter:
    """A trainable array with a gradient buffer of the same shape."""

    def __init__(self, values, id=None):
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.id = id if id is not None else f"param{next(_ids)}"

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.id!r}, shape={self.shape})"


class Node:
    __slots__ = ("op", "parents", "attrs", "value", "grad", "cache", "index")

    def __init__(self, op, parents, attrs, index):
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.value = None
        self.grad = None
        self.cache = None
        self.index = index

    @property
    def shape(self):
        return None if self.value is None else np.shape(self.value)

    def __repr__(self):
        return f"Node({self.op}, #{self.index})"


def _same_shape(op, *xs):
    s0 = np.shape(xs[0])
    for x in xs[1:]:
        if np.shape(x) != s0:
            raise UsageError(f"{op}: shape mismatch {s0} vs {np.shape(x)}")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def logsumexp(x, axis=-1):
    """Max-shifted log-sum-exp; rows of all ``-inf`` give ``-inf``."""
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def log_softmax(x, axis=-1):
    return x - np.expand_dims(logsumexp(x, axis=axis), axis)


def softmax(x, axis=-1):
    return np.exp(log_softmax(x, axis=axis))


# --- primitive forward/backward rules -------------------------------------
# fwd(node, *parent_values) -> value
# bwd(node, g, *parent_values) -> tuple of parent gradients (None = no grad)


def _affine_fwd(node, x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise UsageError(f"affine: incompatible shapes x{x.shape} W{w.shape} b{b.shape}")
    return x @ w + b


def _affine_bwd(node, g, x, w, b):
    return g @ w.T, x.T @ g, g.sum(axis=0)


def _tanh_fwd(node, x):
    return np.tanh(x)


def _tanh_bwd(node, g, x):
    return (g * (1.0 - node.value ** 2),)


def _softplus_fwd(node, x):
    return softplus(x)


def _softplus_bwd(node, g, x):
    return (g * _sigmoid(x),)


def _exp_fwd(node, x):
    return np.exp(x)


def _exp_bwd(node, g, x):
    return (g * node.value,)


def _log_fwd(node, x):
    return np.log(x)


def _log_bwd(node, g, x):
    return (g / x,)


def _sqrt_fwd(node, x):
    return np.sqrt(x)


def _sqrt_bwd(node, g, x):
    return (g * 0.5 / node.value,)


def _add_fwd(node, a, b):
    _same_shape("add", a, b)
    return a + b


def _add_bwd(node, g, a, b):
    return g, g


def _sub_fwd(node, a, b):
    _same_shape("sub", a, b)
    return a - b


def _sub_bwd(node, g, a, b):
    return g, -g


def _mul_fwd(node, a, b):
    _same_shape("mul", a, b)
    return a * b


def _mul_bwd(node, g, a, b):
    return g * b, g * a


def _scale_fwd(node, x):
    return node.attrs["c"] * x


def _scale_bwd(node, g, x):
    return (node.attrs["c"] * g,)


def _add_const_fwd(node, x):
    out = x + node.attrs["c"]
    if out.shape != np.shape(x):
        raise UsageError("add_const: constant may not enlarge the operand")
    return out


def _add_const_bwd(node, g, x):
    return (g,)


def _sum_fwd(node, x):
    return np.sum(x, axis=node.attrs["axis"])


def _sum_bwd(node, g, x):
    axis = node.attrs["axis"]
    if axis is None:
        return (np.full(np.shape(x), g, dtype=np.float64),)
    return (np.broadcast_to(np.expand_dims(g, axis), np.shape(x)).copy(),)


def _mean_fwd(node, x):
    return np.mean(x)


def _mean_bwd(node, g, x):
    return (np.full(np.shape(x), g / np.size(x), dtype=np.float64),)


def _lse_fwd(node, x):
    return logsumexp(x, axis=node.attrs["axis"])


def _lse_bwd(node, g, x):
    axis = node.attrs["axis"]
    out = np.expand_dims(node.value, axis)
    w = np.exp(x - np.where(np.isfinite(out), out, 0.0))
    w = np.where(np.isfinite(out), w, 0.0)
    return (np.expand_dims(g, axis) * w,)


def _sqerr_fwd(node, a, b):
    _same_shape("squared_error", a, b)
    d = a - b
    return np.sum(d * d, axis=-1)


def _sqerr_bwd(node, g, a, b):
    ga = 2.0 * (a - b) * g[..., None]
    return ga, -ga


def _gauss_fwd(node, z, mean, var):
    _same_shape("gauss_logpdf", z, mean, var)
    d = z - mean
    return -0.5 * np.sum(d * d / var + np.log(var) + LOG_2PI, axis=-1)


def _gauss_bwd(node, g, z, mean, var):
    s = (z - mean) / var
    gg = g[..., None]
    return -gg * s, gg * s, gg * (0.5 * s * s - 0.5 / var)


def _gpair_fwd(node, z, means, var):
    if z.ndim != 2 or means.shape != var.shape or means.shape[1] != z.shape[1]:
        raise UsageError(f"gauss_pairwise: incompatible shapes {z.shape}, {means.shape}, {var.shape}")
    return kernels.gauss_pairwise(z, means, var)


def _gpair_bwd(node, g, z, means, var):
    return kernels.gauss_pairwise_grad(g, z, means, var)


def _hmm_fwd(node, e_t, e_next, logits, actions):
    _same_shape("hmm_pair_logsumexp", e_t, e_next)
    k = e_t.shape[1]
    if logits.shape[1:] != (k, k):
        raise UsageError(f"hmm_pair_logsumexp: transition logits {logits.shape} vs K={k}")
    actions = np.asarray(actions, dtype=np.int64)
    if actions.shape != (e_t.shape[0],):
        raise UsageError("hmm_pair_logsumexp: one action per row required")
    log_trans = log_softmax(logits, axis=-1)
    out, resp = kernels.hmm_pair_lse(e_t, e_next, log_trans, node.attrs["log_rho"], actions)
    node.cache = (resp, log_trans)
    return out


def _hmm_bwd(node, g, e_t, e_next, logits, actions):
    resp, log_trans = node.cache
    g_t, g_n, g_lt = kernels.hmm_pair_lse_grad(g, resp, actions, logits.shape[0])
    p = np.exp(log_trans)
    g_logits = g_lt - p * np.sum(g_lt, axis=-1, keepdims=True)
    return g_t, g_n, g_logits, None


_RULES = {
    "affine": (_affine_fwd, _affine_bwd),
    "tanh": (_tanh_fwd, _tanh_bwd),
    "softplus": (_softplus_fwd, _softplus_bwd),
    "exp": (_exp_fwd, _exp_bwd),
    "log": (_log_fwd, _log_bwd),
    "sqrt": (_sqrt_fwd, _sqrt_bwd),
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, _sub_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "add_const": (_add_const_fwd, _add_const_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "logsumexp": (_lse_fwd, _lse_bwd),
    "squared_error": (_sqerr_fwd, _sqerr_bwd),
    "gauss_logpdf": (_gauss_fwd, _gauss_bwd),
    "gauss_pairwise": (_gpair_fwd, _gpair_bwd),
    "hmm_pair_logsumexp": (_hmm_fwd, _hmm_bwd),
}


class Graph:
    """A define-then-run computation graph.

    Nodes are appended in construction order, which is a valid topological
    order because a node can only reference nodes created before it.
    """

    def __init__(self):
        self.nodes = []
        self.inputs = {}
        self._param_nodes = {}
        self._evaluated = False

    def _add(self, op, parents=(), **attrs):
        for p in parents:
            if not isinstance(p, Node) or p.index >= len(self.nodes) or self.nodes[p.index] is not p:
                raise UsageError(f"{op}: operand does not belong to this graph")
        node = Node(op, tuple(parents), attrs, len(self.nodes))
        self.nodes.append(node)
        self._evaluated = False
        return node

    # leaves
    def input(self, name, shape, dtype=np.float64):
        """Placeholder fed at :meth:`forward`.  ``None`` in ``shape`` is a free axis."""
        if name in self.inputs:
            raise UsageError(f"duplicate input {name!r}")
        node = self._add("input", name=name, shape=tuple(shape), dtype=dtype)
        self.inputs[name] = node
        return node

    def param(self, p):
        node = self._param_nodes.get(id(p))
        if node is None:
            node = self._add("param", param=p)
            self._param_nodes[id(p)] = node
        return node

    def constant(self, value):
        return self._add("constant", value=np.asarray(value, dtype=np.float64))

    # primitives
    def affine(self, x, w, b):
        return self._add("affine", (x, w, b))

    def tanh(self, x):
        return self._add("tanh", (x,))

    def softplus(self, x):
        return self._add("softplus", (x,))

    def exp(self, x):
        return self._add("exp", (x,))

    def log(self, x):
        return self._add("log", (x,))

    def sqrt(self, x):
        return self._add("sqrt", (x,))

    def add(self, a, b):
        return self._add("add", (a, b))

    def sub(self, a, b):
        return self._add("sub", (a, b))

    def mul(self, a, b):
        return self._add("mul", (a, b))

    def scale(self, x, c):
        return self._add("scale", (x,), c=float(c))

    def add_const(self, x, c):
        return self._add("add_const", (x,), c=np.asarray(c, dtype=np.float64))

    def sum(self, x, axis=None):
        return self._add("sum", (x,), axis=axis)

    def mean(self, x):
        return self._add("mean", (x,))

    def logsumexp(self, x, axis=-1):
        return self._add("logsumexp", (x,), axis=axis)

    def squared_error(self, a, b):
        """Sum of squared differences over the last axis."""
        return self._add("squared_error", (a, b))

    def gauss_logpdf(self, z, mean, var):
        """Row-wise diagonal Gaussian log-density, reduced over the last axis."""
        return self._add("gauss_logpdf", (z, mean, var))

    def gauss_pairwise(self, z, means, var):
        """(N, d) points against (K, d) diagonal components -> (N, K) log-densities."""
        return self._add("gauss_pairwise", (z, means, var))

    def hmm_pair_logsumexp(self, e_t, e_next, trans_logits, actions, log_rho):
        """log sum_{k,l} rho_k N_t[k] softmax(logits[a])[k,l] N_next[l] per row."""
        return self._add(
            "hmm_pair_logsumexp",
            (e_t, e_next, trans_logits, actions),
            log_rho=np.asarray(log_rho, dtype=np.float64),
        )

    # evaluation
    def forward(self, feed=None):
        """Evaluate every node.  ``feed`` maps input names to arrays."""
        feed = feed or {}
        missing = set(self.inputs) - set(feed)
        if missing:
            raise UsageError(f"missing inputs: {sorted(missing)}")
        for node in self.nodes:
            op = node.op
            if op == "input":
                node.value = self._check_input(node, feed[node.attrs["name"]])
            elif op == "param":
                node.value = node.attrs["param"].values
            elif op == "constant":
                node.value = node.attrs["value"]
            else:
                fwd = _RULES[op][0]
                node.value = fwd(node, *(p.value for p in node.parents))
            node.grad = None
        self._evaluated = True

    @staticmethod
    def _check_input(node, value):
        value = np.asarray(value, dtype=node.attrs["dtype"])
        shape = node.attrs["shape"]
        if value.ndim != len(shape) or any(s is not None and s != v for s, v in zip(shape, value.shape)):
            raise UsageError(
                f"input {node.attrs['name']!r}: expected shape {shape}, got {value.shape}"
            )
        return value

    def backward(self, seeds):
        """Reverse sweep from ``seeds`` ({node: upstream gradient}).

        Gradients are accumulated into ``Parameter.grad`` (callers zero them
        between steps) and left on every node's ``grad`` attribute.
        """
        if not self._evaluated:
            raise UsageError("backward called before forward")
        if isinstance(seeds, Node):
            seeds = {seeds: 1.0}
        for node in self.nodes:
            node.grad = None
        last = -1
        for node, seed in seeds.items():
            g = np.broadcast_to(np.asarray(seed, dtype=np.float64), np.shape(node.value)).copy()
            node.grad = g if node.grad is None else node.grad + g
            last = max(last, node.index)
        for node in reversed(self.nodes[: last + 1]):
            g = node.grad
            if g is None:
                continue
            op = node.op
            if op == "param":
                node.attrs["param"].grad += g
                continue
            if op in ("input", "constant"):
                continue
            bwd = _RULES[op][1]
            grads = bwd(node, g, *(p.value for p in node.parents))
            for parent, pg in zip(node.parents, grads):
                if pg is None:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg

    def parameters(self):
        return [n.attrs["param"] for n in self._param_nodes.values()]


# --- layers ----------------------------------------------------------------


class Dense:
    """Affine layer ``x @ W + b``."""

    def __init__(self, n_in, n_out, rng=None, name="dense", init="glorot"):
        if init == "glorot":
            limit = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, size=(n_in, n_out))
        elif init == "zeros":
            w = np.zeros((n_in, n_out))
        else:
            raise UsageError(f"unknown init {init!r}")
        self.W = Parameter(w, f"{name}.W")
        self.b = Parameter(np.zeros(n_out), f"{name}.b")

    def __call__(self, graph, x):
        return graph.affine(x, graph.param(self.W), graph.param(self.b))

    def predict(self, x):
        return x @ self.W.values + self.b.values

    def parameters(self):
        return [self.W, self.b]


class MLP:
    """Fully-connected tanh network with a linear output layer."""

    def __init__(self, sizes, rng, name="mlp"):
        if len(sizes) < 2:
            raise UsageError("MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.layers = [
            Dense(a, b, rng, name=f"{name}.{i}") for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, graph, x):
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(graph, h)
            if i < len(self.layers) - 1:
                h = graph.tanh(h)
        return h

    def predict(self, x):
        h = np.asarray(x, dtype=np.float64)
        for i, layer in enumerate(self.layers):
            h = layer.predict(h)
            if i < len(self.layers) - 1:
                h = np.tanh(h)
        return h

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


class Adam:
    """Bias-corrected adaptive-moment optimizer updating parameters in place.

    Parameter values and gradients are rebound as views into two flat
    buffers so one update is a few vector operations regardless of how many
    parameter arrays there are.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        sizes = [p.values.size for p in self.params]
        self._flat = np.concatenate([p.values.ravel() for p in self.params]) if self.params else np.zeros(0)
        self._flat_grad = np.concatenate([p.grad.ravel() for p in self.params]) if self.params else np.zeros(0)
        offset = 0
        for p, n in zip(self.params, sizes):
            p.values = self._flat[offset: offset + n].reshape(p.shape)
            p.grad = self._flat_grad[offset: offset + n].reshape(p.shape)
            offset += n
        self.m = np.zeros_like(self._flat)
        self.v = np.zeros_like(self._flat)
        self.t = 0

    def zero_grad(self):
        self._flat_grad[:] = 0.0

    def step(self):
        g = self._flat_grad
        if not np.isfinite(np.dot(g, g)):
            for p in self.params:
                if not np.all(np.isfinite(p.grad)):
                    raise TrainingError(f"non-finite gradient in parameter {p.id}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (g * g)
        self._flat -= (self.lr / c1) * self.m / (np.sqrt(self.v / c2) + self.eps)


# --- serialization ---------------------------------------------------------


def params_to_dict(params):
    return {
        "params": [
            {"id": p.id, "shape": list(p.shape), "values": p.values.ravel().tolist()}
            for p in params
        ]
    }


def load_params(params, doc):
    """Copy values from a ``params_to_dict`` document into ``params`` by id."""
    by_id = {entry["id"]: entry for entry in doc["params"]}
    for p in params:
        if p.id not in by_id:
            raise UsageError(f"parameter {p.id!r} missing from document")
        entry = by_id[p.id]
        if tuple(entry["shape"]) != p.shape:
            raise UsageError(f"parameter {p.id!r}: shape {entry['shape']} != {list(p.shape)}")
        p.values[...] = np.asarray(entry["values"], dtype=np.float64).reshape(p.shape)
