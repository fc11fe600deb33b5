"""Deep Q-learning on ground environments and Q-labeled dataset collection."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .envs import TabularMDP, step
from .errors import TrainingError, UsageError


@dataclass
class DQNConfig:
    episodes: int = 300
    max_steps: int = 50
    hidden: tuple = (64, 64)
    lr: float = 1e-3
    batch_size: int = 32
    replay_capacity: int = 10000
    target_update: int = 100
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_anneal_fraction: float = 0.5
    learning_starts: int = 100

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})

    def epsilon(self, episode):
        span = max(1.0, self.eps_anneal_fraction * self.episodes)
        frac = min(1.0, episode / span)
        return self.eps_start + frac * (self.eps_end - self.eps_start)


class QNetwork:
    """Online tanh MLP plus a target copy refreshed by :meth:`sync_target`."""

    def __init__(self, feature_dim, n_actions, hidden=(64, 64), rng=None, name="q"):
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = (feature_dim, *hidden, n_actions)
        self.name = name
        self.net = nn.MLP(sizes, rng, name=name)
        self.target = nn.MLP(sizes, rng, name=name + "_target")
        self.sync_target()
        self.loss_trace = []

    @property
    def n_actions(self):
        return self.net.sizes[-1]

    @property
    def feature_dim(self):
        return self.net.sizes[0]

    def parameters(self):
        return self.net.parameters()

    def sync_target(self):
        for dst, src in zip(self.target.parameters(), self.net.parameters()):
            dst.values[...] = src.values

    def predict(self, features):
        return self.net.predict(np.atleast_2d(features))

    def predict_target(self, features):
        return self.target.predict(np.atleast_2d(features))

    def to_dict(self):
        doc = nn.params_to_dict(self.net.parameters())
        doc["sizes"] = list(self.net.sizes)
        doc["name"] = self.name
        return doc

    @classmethod
    def from_dict(cls, doc):
        sizes = doc["sizes"]
        q = cls(sizes[0], sizes[-1], tuple(sizes[1:-1]), name=doc.get("name", "q"))
        nn.load_params(q.net.parameters(), doc)
        q.sync_target()
        return q

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class ReplayBuffer:
    """Fixed-capacity ring buffer sampled uniformly with replacement."""

    def __init__(self, capacity, feature_dim):
        self.capacity = int(capacity)
        self.s = np.zeros((self.capacity, feature_dim))
        self.a = np.zeros(self.capacity, dtype=np.int64)
        self.r = np.zeros(self.capacity)
        self.s2 = np.zeros((self.capacity, feature_dim))
        self.done = np.zeros(self.capacity)
        self.size = 0
        self._pos = 0

    def __len__(self):
        return self.size

    def add(self, s, a, r, s2, done):
        i = self._pos
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = s, a, r, s2, done
        self._pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size, rng):
        idx = rng.integers(0, self.size, size=batch_size)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx]


def epsilon_greedy(q_values, epsilon, rng):
    """Uniform random action with probability epsilon, else the lowest-index argmax."""
    q_values = np.asarray(q_values)
    if q_values.size == 0:
        raise UsageError("epsilon_greedy needs at least one action")
    if not 0.0 <= epsilon <= 1.0:
        raise UsageError(f"epsilon must lie in [0, 1], got {epsilon}")
    if rng.random() < epsilon:
        return int(rng.integers(q_values.size))
    return int(np.argmax(q_values))


def _td_graph(qnet):
    g = nn.Graph()
    x = g.input("x", (None, qnet.feature_dim))
    onehot = g.input("onehot", (None, qnet.n_actions))
    target = g.input("target", (None,))
    q = qnet.net(g, x)
    qa = g.sum(g.mul(q, onehot), axis=1)
    diff = g.sub(qa, target)
    loss = g.mean(g.mul(diff, diff))
    return g, loss


def train_dqn(env: TabularMDP, config: DQNConfig | None = None, rng=None):
    """Train a Q-network with replay, epsilon-greedy exploration and a target net.

    The per-update TD loss is kept on ``qnet.loss_trace``.
    """
    config = config or DQNConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    qnet = QNetwork(env.feature_dim, env.n_actions, config.hidden, rng)
    graph, loss = _td_graph(qnet)
    opt = nn.Adam(qnet.parameters(), lr=config.lr)
    buf = ReplayBuffer(config.replay_capacity, env.feature_dim)
    eye = np.eye(env.n_actions)
    gamma = env.gamma
    updates = 0
    for ep in range(config.episodes):
        eps = config.epsilon(ep)
        s = env.sample_initial(rng)
        if s in env.terminal:
            continue
        for _ in range(config.max_steps):
            obs = env.features[s]
            a = epsilon_greedy(qnet.predict(obs)[0], eps, rng)
            s2, r, done = step(env, s, a, rng)
            buf.add(obs, a, r, env.features[s2], float(done))
            s = s2
            if len(buf) >= max(config.batch_size, config.learning_starts):
                bs, ba, br, bs2, bd = buf.sample(config.batch_size, rng)
                target = br + gamma * (1.0 - bd) * qnet.predict_target(bs2).max(axis=1)
                graph.forward({"x": bs, "onehot": eye[ba], "target": target})
                value = float(loss.value)
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite TD loss at update {updates}")
                qnet.loss_trace.append(value)
                opt.zero_grad()
                graph.backward(loss)
                opt.step()
                updates += 1
                if updates % config.target_update == 0:
                    qnet.sync_target()
            if done:
                break
    return qnet


@dataclass
class LabeledTransition:
    s_t: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    y: np.ndarray
    done: bool
    s_id: int = -1
    s_next_id: int = -1


@dataclass
class TransitionDataset:
    """Columnar store of Q-labeled transitions.

    ``y`` has one column per (task, action) pair, task-major.  ``s_id`` and
    ``s_next_id`` carry ground state ids when the source env is tabular.
    """

    s_t: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    y: np.ndarray
    done: np.ndarray
    s_id: np.ndarray
    s_next_id: np.ndarray
    env_id: str = ""
    n_actions: int = 0
    n_tasks: int = 1
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.a)
        if n == 0:
            raise UsageError("a transition dataset must be nonempty")
        for name in ("s_t", "r", "s_next", "y", "done", "s_id", "s_next_id"):
            if len(getattr(self, name)) != n:
                raise UsageError(f"column {name} has {len(getattr(self, name))} rows, expected {n}")
        if self.s_t.shape[1] != self.s_next.shape[1]:
            raise UsageError("s_t and s_next feature dimensions differ")

    def __len__(self):
        return len(self.a)

    def __getitem__(self, i):
        return LabeledTransition(
            self.s_t[i], int(self.a[i]), float(self.r[i]), self.s_next[i], self.y[i],
            bool(self.done[i]), int(self.s_id[i]), int(self.s_next_id[i]),
        )

    def subset(self, idx):
        idx = np.asarray(idx)
        return TransitionDataset(
            self.s_t[idx], self.a[idx], self.r[idx], self.s_next[idx], self.y[idx],
            self.done[idx], self.s_id[idx], self.s_next_id[idx],
            self.env_id, self.n_actions, self.n_tasks, self.seed, dict(self.meta),
        )

    @staticmethod
    def concatenate(parts):
        first = parts[0]
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
        return TransitionDataset(
            cat("s_t"), cat("a"), cat("r"), cat("s_next"), cat("y"), cat("done"),
            cat("s_id"), cat("s_next_id"), first.env_id, first.n_actions, first.n_tasks,
            first.seed, dict(first.meta),
        )

    def save(self, path):
        """JSON-lines records plus a ``<path>.meta.json`` sidecar."""
        with open(path, "w") as fh:
            for i in range(len(self)):
                rec = {
                    "s_t": self.s_t[i].tolist(),
                    "a": int(self.a[i]),
                    "r": float(self.r[i]),
                    "s_next": self.s_next[i].tolist(),
                    "y": self.y[i].tolist(),
                    "done": bool(self.done[i]),
                    "s_id": int(self.s_id[i]),
                    "s_next_id": int(self.s_next_id[i]),
                }
                fh.write(json.dumps(rec) + "\n")
        meta = {"env_id": self.env_id, "n_actions": self.n_actions, "n_tasks": self.n_tasks,
                "seed": self.seed, "meta": self.meta}
        with open(str(path) + ".meta.json", "w") as fh:
            json.dump(meta, fh, sort_keys=True)

    @classmethod
    def load(cls, path):
        recs = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    recs.append(json.loads(line))
        try:
            with open(str(path) + ".meta.json") as fh:
                meta = json.load(fh)
        except FileNotFoundError:
            meta = {}
        col = lambda k, dt=np.float64: np.array([r[k] for r in recs], dtype=dt)  # noqa: E731
        ids = lambda k: np.array([r.get(k, -1) for r in recs], dtype=np.int64)  # noqa: E731
        y = col("y")
        n_actions = meta.get("n_actions") or int(col("a", np.int64).max()) + 1
        return cls(
            col("s_t"), col("a", np.int64), col("r"), col("s_next"), y, col("done", bool),
            ids("s_id"), ids("s_next_id"), meta.get("env_id", ""), n_actions,
            meta.get("n_tasks", y.shape[1] // n_actions), meta.get("seed"), meta.get("meta", {}),
        )


def collect_dataset(env, qnet, n_transitions, behavior_epsilon=0.1, rng=None,
                    label_qnets=None, max_steps=50, seed=None):
    """Roll out epsilon-greedy episodes under ``qnet`` and label each s_t.

    ``y`` is the full Q-vector of s_t under each network in ``label_qnets``
    (default ``[qnet]``), concatenated in order.
    """
    if n_transitions < 1:
        raise UsageError("n_transitions must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(seed)
    label_qnets = list(label_qnets) if label_qnets is not None else [qnet]
    q_all = qnet.predict(env.features)
    s_ids, actions, rewards, s2_ids, dones = [], [], [], [], []
    while len(actions) < n_transitions:
        s = env.sample_initial(rng)
        for _ in range(max_steps):
            a = epsilon_greedy(q_all[s], behavior_epsilon, rng)
            s2, r, done = step(env, s, a, rng)
            s_ids.append(s)
            actions.append(a)
            rewards.append(r)
            s2_ids.append(s2)
            dones.append(done)
            s = s2
            if done or len(actions) >= n_transitions:
                break
    s_ids = np.array(s_ids, dtype=np.int64)
    s2_ids = np.array(s2_ids, dtype=np.int64)
    s_t = env.features[s_ids]
    y = np.concatenate([q.predict(s_t) for q in label_qnets], axis=1)
    return TransitionDataset(
        s_t=s_t,
        a=np.array(actions, dtype=np.int64),
        r=np.array(rewards),
        s_next=env.features[s2_ids],
        y=y,
        done=np.array(dones, dtype=bool),
        s_id=s_ids,
        s_next_id=s2_ids,
        env_id=env.env_id,
        n_actions=env.n_actions,
        n_tasks=len(label_qnets),
        seed=seed,
        meta={"task": env.task, "behavior_epsilon": behavior_epsilon},
    )


def config_dict(config):
    d = asdict(config)
    d["hidden"] = list(d["hidden"])
    return d
