"""Model-based baseline: learn a forward model, then greedily partition states.

States are grouped into an epsilon-approximate bisimulation by first-fit
grouping on predicted rewards, then repeatedly split on block-aggregated
transition probabilities until a full pass changes nothing.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels, nn
from .abstraction import purity
from .errors import ConfigurationError, TrainingError, UsageError


@dataclass
class ForwardModelConfig:
    hidden: int = 64
    epochs: int = 20
    batch_size: int = 64
    lr: float = 3e-3
    min_steps: int = 6000
    n_states: int | None = None

    def __post_init__(self):
        if self.hidden < 1 or self.epochs < 1 or self.batch_size < 1 or self.min_steps < 0:
            raise ConfigurationError("forward model sizes and step counts must be positive")
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in (d or {}).items() if k in cls.__dataclass_fields__}
        unknown = set(d or {}) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown forward model keys: {sorted(unknown)}")
        return cls(**known)


class OracleModel:
    """Exposes a TabularMDP's true tables through the forward-model interface."""

    def __init__(self, env):
        self.env = env
        self.n_states = env.n_states
        self.n_actions = env.n_actions

    def reward_table(self):
        return self.env.reward.copy()

    def transition_table(self):
        return self.env.transition.copy()


class ForwardModel:
    """Shared tanh layer over (state one-hot, action one-hot), with a reward head
    and a next-state logits head."""

    def __init__(self, n_states, n_actions, hidden=64, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_states, self.n_actions = int(n_states), int(n_actions)
        self.body = nn.Dense(self.n_states + self.n_actions, hidden, rng, name="fwd.body")
        # One-hot inputs make the first layer an embedding lookup, so rows get
        # unit-normal init; states absent from the data then keep distinct
        # (uninformed) predictions instead of collapsing onto a shared average.
        self.body.W.values[...] = rng.normal(size=self.body.W.shape)
        self.reward_head = nn.Dense(hidden, 1, rng, name="fwd.reward")
        self.next_head = nn.Dense(hidden, self.n_states, rng, name="fwd.next")
        self.loss_trace = []

    def parameters(self):
        return self.body.parameters() + self.reward_head.parameters() + self.next_head.parameters()

    def inputs(self, s_ids, actions):
        s_ids = np.asarray(s_ids, dtype=np.int64)
        x = np.zeros((s_ids.size, self.n_states + self.n_actions))
        x[np.arange(s_ids.size), s_ids] = 1.0
        x[np.arange(s_ids.size), self.n_states + np.asarray(actions, dtype=np.int64)] = 1.0
        return x

    def predict(self, s_ids, actions):
        """(predicted rewards, next-state probabilities) for paired ids and actions."""
        h = np.tanh(self.body.predict(self.inputs(s_ids, actions)))
        return self.reward_head.predict(h)[:, 0], nn.softmax(self.next_head.predict(h), axis=1)

    def _grid(self):
        s = np.repeat(np.arange(self.n_states), self.n_actions)
        a = np.tile(np.arange(self.n_actions), self.n_states)
        return s, a

    def reward_table(self):
        r, _ = self.predict(*self._grid())
        return r.reshape(self.n_states, self.n_actions)

    def transition_table(self):
        _, p = self.predict(*self._grid())
        return p.reshape(self.n_states, self.n_actions, self.n_states)

    def loss_graph(self):
        g = nn.Graph()
        x = g.input("x", (None, self.n_states + self.n_actions))
        r = g.input("r", (None, 1))
        nxt = g.input("next", (None, self.n_states))
        h = g.tanh(self.body(g, x))
        r_err = g.squared_error(self.reward_head(g, h), r)
        logits = self.next_head(g, h)
        xent = g.sub(g.logsumexp(logits, axis=1), g.sum(g.mul(logits, nxt), axis=1))
        return g, g.mean(g.add(r_err, xent))

    def to_dict(self):
        doc = nn.params_to_dict(self.parameters())
        doc.update(n_states=self.n_states, n_actions=self.n_actions, hidden=self.body.b.shape[0])
        return doc

    @classmethod
    def from_dict(cls, doc):
        model = cls(doc["n_states"], doc["n_actions"], doc["hidden"])
        nn.load_params(model.parameters(), doc)
        return model

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _require_ids(dataset):
    if len(dataset) == 0:
        raise UsageError("empty dataset")
    if np.any(dataset.s_id < 0) or np.any(dataset.s_next_id < 0):
        raise UsageError("the forward model needs ground state ids in the dataset")


def train_forward_model(dataset, config=None, rng=None):
    """Fit reward (squared error) and next state (cross-entropy) by minibatch Adam.

    Runs ``epochs`` passes worth of updates, at least ``min_steps``.
    """
    config = config or ForwardModelConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    _require_ids(dataset)
    n_states = config.n_states or int(max(dataset.s_id.max(), dataset.s_next_id.max())) + 1
    model = ForwardModel(n_states, dataset.n_actions, config.hidden, rng)
    graph, loss = model.loss_graph()
    opt = nn.Adam(model.parameters(), lr=config.lr)
    x_all = model.inputs(dataset.s_id, dataset.a)
    eye = np.eye(n_states)
    n = len(dataset)
    steps = max(config.min_steps, int(np.ceil(config.epochs * n / config.batch_size)))
    for t in range(steps):
        idx = rng.integers(0, n, size=min(config.batch_size, n))
        graph.forward({"x": x_all[idx], "r": dataset.r[idx, None], "next": eye[dataset.s_next_id[idx]]})
        value = float(loss.value)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite forward-model loss at step {t}")
        model.loss_trace.append(value)
        opt.zero_grad()
        graph.backward(loss)
        opt.step()
    return model


def next_state_accuracy(model, dataset):
    """Fraction of transitions whose most probable predicted next state is the observed one."""
    _require_ids(dataset)
    _, p = model.predict(dataset.s_id, dataset.a)
    return float(np.mean(np.argmax(p, axis=1) == dataset.s_next_id))


def holdout_split(dataset, fraction=0.1, rng=None):
    """Random (train, held-out) split of a dataset."""
    if not 0.0 < fraction < 1.0:
        raise UsageError("holdout fraction must lie in (0, 1)")
    rng = rng if rng is not None else np.random.default_rng(0)
    order = rng.permutation(len(dataset))
    n_hold = max(1, int(round(fraction * len(dataset))))
    return dataset.subset(np.sort(order[n_hold:])), dataset.subset(np.sort(order[:n_hold]))


@dataclass
class Partition:
    blocks: list

    def __post_init__(self):
        self.blocks = sorted((sorted(int(s) for s in b) for b in self.blocks), key=lambda b: b[0] if b else -1)
        if any(len(b) == 0 for b in self.blocks):
            raise UsageError("partition blocks must be nonempty")
        seen = [s for b in self.blocks for s in b]
        if len(seen) != len(set(seen)):
            raise UsageError("partition blocks overlap")
        if sorted(seen) != list(range(len(seen))):
            raise UsageError("partition blocks must cover states 0..n-1")

    @property
    def n_blocks(self):
        return len(self.blocks)

    @property
    def n_states(self):
        return sum(len(b) for b in self.blocks)

    def assignment(self):
        out = np.empty(self.n_states, dtype=np.int64)
        for i, b in enumerate(self.blocks):
            out[b] = i
        return out

    @classmethod
    def from_assignment(cls, assign):
        assign = np.asarray(assign)
        return cls([np.flatnonzero(assign == k).tolist() for k in np.unique(assign)])

    def refines(self, other):
        """True when every block here lies inside a single block of ``other``."""
        theirs = other.assignment()
        return all(np.unique(theirs[b]).size == 1 for b in self.blocks)

    def to_json(self):
        return json.dumps(self.blocks)

    @classmethod
    def from_json(cls, text):
        return cls(json.loads(text))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


def _block_mass(T, assign, n_blocks):
    """(S, A, B) probability of landing in each block."""
    S, A, _ = T.shape
    onehot = np.zeros((S, n_blocks))
    onehot[np.arange(S), assign] = 1.0
    return T @ onehot


def greedy_approx_bisimulation(model, n_states, n_actions, epsilon=0.5, max_passes=None):
    """Epsilon-approximate bisimulation partition from a forward model.

    Returns the Partition; ``.passes`` on the result counts refinement passes.
    """
    if epsilon < 0:
        raise UsageError("epsilon must be >= 0")
    R = np.asarray(model.reward_table(), dtype=np.float64)
    T = np.asarray(model.transition_table(), dtype=np.float64)
    if R.shape != (n_states, n_actions) or T.shape != (n_states, n_actions, n_states):
        raise UsageError("model tables do not match n_states and n_actions")
    assign = kernels.first_fit_groups(R, epsilon)
    max_passes = n_states if max_passes is None else max_passes
    passes = 0
    while passes < max_passes:
        passes += 1
        n_blocks = int(assign.max()) + 1
        mass = _block_mass(T, assign, n_blocks).reshape(n_states, -1)
        new = np.empty_like(assign)
        next_label = 0
        changed = False
        for b in range(n_blocks):
            members = np.flatnonzero(assign == b)
            vecs = mass[members]
            if np.max(vecs.max(axis=0) - vecs.min(axis=0)) > epsilon:
                sub = kernels.first_fit_groups(vecs, epsilon)
                changed = True
            else:
                sub = np.zeros(members.size, dtype=np.int64)
            new[members] = next_label + sub
            next_label += int(sub.max()) + 1
        assign = new
        if not changed:
            break
    part = Partition.from_assignment(assign)
    part.passes = passes
    return part


def is_bisimulation(partition, reward, transition, atol=0.0):
    """Brute-force check of reward and block-transition equality within blocks."""
    assign = partition.assignment()
    mass = _block_mass(np.asarray(transition, dtype=np.float64), assign, partition.n_blocks)
    reward = np.asarray(reward, dtype=np.float64)
    for b in partition.blocks:
        for i in b:
            for j in b:
                if np.any(np.abs(reward[i] - reward[j]) > atol):
                    return False
                if np.any(np.abs(mass[i] - mass[j]) > atol):
                    return False
    return True


def partition_metrics(partition, labels):
    """(size, purity) of a partition against ground-truth labels."""
    labels = np.asarray(labels)
    if labels.size != partition.n_states:
        raise UsageError("labels must cover every state of the partition")
    return partition.n_blocks, purity(partition.assignment(), labels)


def config_dict(config):
    return asdict(config)
