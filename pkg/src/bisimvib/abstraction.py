"""From a trained VIB model to a discrete abstract MDP, plus planning and evaluation."""
from __future__ import annotations

import json
import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import kernels, nn
from .envs import TabularMDP, step
from .errors import ConfigurationError, GoalNotRepresented, UsageError
from .vib import HmmPrior, posterior_over_components


@dataclass
class AbstractionMap:
    assign: np.ndarray
    K: int

    def __post_init__(self):
        self.assign = np.asarray(self.assign, dtype=np.int64)

    def blocks(self):
        return [np.flatnonzero(self.assign == k).tolist() for k in range(self.K) if np.any(self.assign == k)]


def assign_abstract_state(model, features):
    """Most probable component at the posterior mean; ties go to the lowest index.

    Accepts one feature vector (returns an int) or a matrix (returns an array).
    """
    features = np.asarray(features, dtype=np.float64)
    single = features.ndim == 1
    z = model.encode(np.atleast_2d(features)).mean
    comp = np.argmax(posterior_over_components(z, model.prior), axis=1)
    return int(comp[0]) if single else comp


def abstraction_map(model, env: TabularMDP):
    return AbstractionMap(assign_abstract_state(model, env.features), model.config.K)


def purity(assignments, labels):
    """Member-weighted average over abstract states of the modal-label fraction."""
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    if assignments.size == 0:
        raise UsageError("purity of an empty assignment is undefined")
    if assignments.shape != labels.shape:
        raise UsageError("assignments and labels must cover the same states")
    agree = 0
    for k in np.unique(assignments):
        members = labels[assignments == k]
        agree += Counter(members.tolist()).most_common(1)[0][1]
    return agree / assignments.size


def effective_num_states(assignments):
    assignments = np.asarray(assignments)
    if assignments.size == 0:
        raise UsageError("no assignments")
    return int(np.unique(assignments).size)


@dataclass
class AbstractMDP:
    transition: np.ndarray  # (A, K, K)
    reward: np.ndarray  # (K, A)
    gamma: float

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        A, K, K2 = self.transition.shape
        if K != K2 or self.reward.shape != (K, A):
            raise UsageError(f"inconsistent abstract MDP shapes {self.transition.shape}, {self.reward.shape}")
        if not np.allclose(self.transition.sum(axis=2), 1.0, atol=1e-9, rtol=0):
            raise UsageError("abstract transition rows must sum to 1")
        if not np.all(np.isfinite(self.reward)):
            raise UsageError("abstract rewards must be finite")
        if not 0.0 <= self.gamma < 1.0:
            raise UsageError("gamma must lie in [0, 1)")

    @property
    def K(self):
        return self.reward.shape[0]

    @property
    def n_actions(self):
        return self.reward.shape[1]

    def to_dict(self):
        return {"K": self.K, "n_actions": self.n_actions, "transition": self.transition.tolist(),
                "reward": self.reward.tolist(), "gamma": self.gamma}

    @classmethod
    def from_dict(cls, doc):
        mdp = cls(np.array(doc["transition"]), np.array(doc["reward"]), float(doc["gamma"]))
        if mdp.K != doc["K"] or mdp.n_actions != doc["n_actions"]:
            raise UsageError("abstract MDP header does not match its tables")
        return mdp

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def empirical_transitions(model, dataset, smoothing=1.0):
    """Per-action component transition counts, row-normalized with additive smoothing."""
    K = model.config.K
    c_t = assign_abstract_state(model, dataset.s_t)
    c_n = assign_abstract_state(model, dataset.s_next)
    counts = np.full((dataset.n_actions, K, K), float(smoothing))
    np.add.at(counts, (dataset.a, c_t, c_n), 1.0)
    return counts / counts.sum(axis=2, keepdims=True)


def abstract_transitions(model, dataset=None):
    """The HMM prior's learned T^a, or empirical counts for a GMM model."""
    prior = model.prior
    if isinstance(prior, HmmPrior):
        return prior.transition
    if dataset is None:
        raise UsageError("a GMM-prior model needs a dataset to estimate abstract transitions")
    return empirical_transitions(model, dataset)


def build_abstract_mdp(model, reward, gamma, dataset=None):
    return AbstractMDP(abstract_transitions(model, dataset), reward, gamma)


def _goal_hits(dataset, goal_predicate):
    if callable(goal_predicate):
        hits = np.asarray(goal_predicate(dataset.s_next, dataset.s_next_id), dtype=bool)
    else:
        mask = np.asarray(goal_predicate, dtype=bool)
        if np.any(dataset.s_next_id < 0):
            raise UsageError("a goal mask needs ground state ids in the dataset")
        hits = mask[dataset.s_next_id]
    if hits.shape != (len(dataset),):
        raise UsageError("goal predicate must return one flag per transition")
    return hits


def project_rewards(model, dataset, goal_predicate, mode="any"):
    """Abstract reward table from dataset transitions that reach a goal.

    ``goal_predicate`` is a boolean mask over ground states (looked up by
    ``s_next_id``) or a callable ``(s_next_features, s_next_ids) -> flags``.
    In ``"any"`` mode reward[k, a] = 1 when any transition from component k
    under a reaches the goal; ``"mean"`` uses the fraction of such transitions.
    """
    if mode not in ("any", "mean"):
        raise UsageError(f"unknown projection mode {mode!r}")
    hits = _goal_hits(dataset, goal_predicate)
    if not hits.any():
        raise GoalNotRepresented("no dataset transition reaches the goal")
    K = model.config.K
    c_t = assign_abstract_state(model, dataset.s_t)
    reached = np.zeros((K, dataset.n_actions))
    np.add.at(reached, (c_t[hits], dataset.a[hits]), 1.0)
    if mode == "any":
        return (reached > 0).astype(np.float64)
    total = np.zeros((K, dataset.n_actions))
    np.add.at(total, (c_t, dataset.a), 1.0)
    return np.divide(reached, total, out=np.zeros_like(reached), where=total > 0)


@dataclass
class QTable:
    values: np.ndarray
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True
    warning: str | None = None

    def greedy(self):
        return greedy_policy(self.values)


def bellman_residual(mdp: AbstractMDP, q):
    v = np.max(q, axis=1)
    return float(np.max(np.abs(mdp.reward + mdp.gamma * np.einsum("akl,l->ka", mdp.transition, v) - q)))


def value_iteration(mdp: AbstractMDP, tol=1e-8, max_iters=10000):
    """Iterate the Bellman optimality operator until the sup-norm change drops below tol."""
    q, it, delta = kernels.bellman_iterate(mdp.transition, mdp.reward, mdp.gamma, tol, max_iters)
    result = QTable(q, it, delta, delta < tol)
    if not result.converged:
        result.warning = f"value iteration stopped after {it} iterations with change {delta:.3g} >= {tol:g}"
        warnings.warn(result.warning, RuntimeWarning, stacklevel=2)
    return result


def softmax_policy(q_values, temperature=0.1):
    """Per-state softmax of Q / temperature; -inf entries get probability 0."""
    if not temperature > 0:
        raise UsageError("temperature must be positive")
    q = q_values.values if isinstance(q_values, QTable) else np.asarray(q_values, dtype=np.float64)
    return nn.softmax(q / temperature, axis=1)


def greedy_policy(q_values):
    """One-hot policy on the lowest-index argmax of each row."""
    q = q_values.values if isinstance(q_values, QTable) else np.asarray(q_values, dtype=np.float64)
    pi = np.zeros_like(q)
    pi[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return pi


def mean_q(model, dataset, task=None):
    """Average the dataset's Q labels over the members of each component.

    Unsupported entries are ``-inf`` so argmax ignores them.  ``task``
    selects one task's block of columns from a multi-task ``y``.
    """
    if len(dataset) == 0:
        raise UsageError("mean_q needs a nonempty dataset")
    y = dataset.y
    if task is not None:
        A = dataset.n_actions
        y = y[:, task * A:(task + 1) * A]
    K = model.config.K
    c_t = assign_abstract_state(model, dataset.s_t)
    sums = np.zeros((K, y.shape[1]))
    np.add.at(sums, c_t, y)
    counts = np.bincount(c_t, minlength=K).astype(np.float64)
    values = np.full_like(sums, -np.inf)
    has = counts > 0
    values[has] = sums[has] / counts[has, None]
    return QTable(values)


@dataclass
class EvalResult:
    metric: str
    mean: float
    std: float
    values: np.ndarray


def _sample(p, rng):
    c = np.cumsum(p)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(p) - 1))


def evaluate_policy(env: TabularMDP, model, policy, budget, n_episodes, rng, goal=None, metric=None):
    """Roll out ``policy`` in the ground env for ``n_episodes`` of ``budget`` steps.

    ``policy`` is either a (K, A) table over abstract states, applied through
    ``model``'s assignment of each observation, or a callable
    ``(state_id, features, rng) -> action`` acting on ground states.
    ``metric`` is "success" (fraction of episodes reaching ``goal``, default
    the env's terminal states) or "return" (undiscounted return over the
    budget, stopping early only at terminal states).

    Every episode draws from its own stream spawned from ``rng``, so two
    policies evaluated with equally seeded generators see the same start
    states.
    """
    goal_mask = env.terminal_mask if goal is None else np.asarray(goal, dtype=bool)
    if metric is None:
        metric = "success" if goal_mask.any() else "return"
    if metric not in ("success", "return"):
        raise UsageError(f"unknown metric {metric!r}")
    if budget < 0 or n_episodes < 1:
        raise UsageError("budget must be >= 0 and n_episodes >= 1")
    if callable(policy):
        act = policy
    else:
        table = np.asarray(policy, dtype=np.float64)
        if model is None:
            raise UsageError("an abstract policy table needs the model that defines its states")
        comp = assign_abstract_state(model, env.features)

        def act(s, feats, rng):
            return _sample(table[comp[s]], rng)

    values = np.zeros(n_episodes)
    for ep, stream in enumerate(rng.spawn(n_episodes)):
        s = env.sample_initial(stream)
        ret = 0.0
        success = bool(goal_mask[s])
        for _ in range(budget):
            if success and metric == "success":
                break
            s, r, done = step(env, s, act(s, env.features[s], stream), stream)
            ret += r
            success = success or bool(goal_mask[s])
            if done:
                break
        values[ep] = float(success) if metric == "success" else ret
    return EvalResult(metric, float(values.mean()), float(values.std()), values)


def random_policy(n_actions):
    def act(s, feats, rng):
        return int(rng.integers(n_actions))

    return act


def ground_greedy_policy(qnet):
    """Greedy ground policy on a Q-network; ties go to the lowest action."""

    def act(s, feats, rng):
        return int(np.argmax(qnet.predict(feats)[0]))

    return act


def plan_for_goal(model, dataset, goal, gamma, temperature=0.1, tol=1e-8, mode="any"):
    """Reward projection, value iteration and softmax policy for one goal."""
    reward = project_rewards(model, dataset, goal, mode=mode)
    mdp = build_abstract_mdp(model, reward, gamma, dataset)
    q = value_iteration(mdp, tol=tol)
    return mdp, q, softmax_policy(q, temperature)


def check_task(task, allowed):
    if task not in allowed:
        raise ConfigurationError(f"unknown task {task!r}; expected one of {allowed}")
