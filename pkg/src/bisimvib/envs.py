"""Ground MDPs: Column World and a symbolic shapes-stacking world.

Both environments are small enough to enumerate, so each is returned as a
:class:`TabularMDP` holding exact dynamics, observation features and the
ground-truth bisimulation labels used for evaluation.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from itertools import product
from typing import Optional

import numpy as np

from .errors import ConfigurationError, UsageError

COLUMN_WORLD_ACTIONS = ("left", "right", "up", "down")
SHAPES_TASKS = ("stack", "row", "diag")


@dataclass(frozen=True)
class Observation:
    state_id: int
    features: np.ndarray


@dataclass(eq=False)
class TabularMDP:
    """Finite MDP with exact dynamics.

    transition has shape (S, A, S) and reward (S, A).  ``features`` holds one
    observation vector per state and ``labels`` the block id of each state in
    the known coarsest bisimulation.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    initial_distribution: np.ndarray
    terminal: frozenset = frozenset()
    features: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    env_id: str = "tabular"
    task: Optional[str] = None
    states: Optional[list] = None
    action_names: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.initial_distribution = np.asarray(self.initial_distribution, dtype=np.float64)
        self.terminal = frozenset(int(s) for s in self.terminal)
        S, A = self.reward.shape
        if self.transition.shape != (S, A, S):
            raise ConfigurationError(f"transition shape {self.transition.shape} != {(S, A, S)}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not np.all(np.isfinite(self.reward)):
            raise ConfigurationError("rewards must be finite")
        if np.any(self.transition < 0) or not np.allclose(self.transition.sum(axis=2), 1.0, atol=1e-9, rtol=0):
            raise ConfigurationError("transition rows must be probability vectors")
        p0 = self.initial_distribution
        if p0.shape != (S,) or np.any(p0 < 0) or abs(p0.sum() - 1.0) > 1e-9:
            raise ConfigurationError("initial_distribution must be a probability vector over states")
        if self.features is None:
            self.features = np.eye(S)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.labels is None:
            self.labels = np.arange(S)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self._deterministic = np.all(self.transition.max(axis=2) == 1.0)
        self._next = self.transition.argmax(axis=2)

    @property
    def n_states(self):
        return self.reward.shape[0]

    @property
    def n_actions(self):
        return self.reward.shape[1]

    @property
    def feature_dim(self):
        return self.features.shape[1]

    @property
    def deterministic(self):
        return bool(self._deterministic)

    @property
    def terminal_mask(self):
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.terminal)] = True
        return mask

    def observation(self, state):
        return Observation(int(state), self.features[state])

    def next_state_table(self):
        """argmax successor per (s, a); exact for deterministic MDPs."""
        return self._next.copy()

    def sample_initial(self, rng):
        return int(rng.choice(self.n_states, p=self.initial_distribution))


def step(env: TabularMDP, state, action, rng):
    """Simulate one transition.  Returns ``(next_state, reward, done)``."""
    if not 0 <= action < env.n_actions:
        raise UsageError(f"action {action} out of range [0, {env.n_actions})")
    if not 0 <= state < env.n_states:
        raise UsageError(f"state {state} out of range [0, {env.n_states})")
    if env.deterministic:
        nxt = int(env._next[state, action])
    else:
        nxt = int(rng.choice(env.n_states, p=env.transition[state, action]))
    return nxt, float(env.reward[state, action]), nxt in env.terminal


# --- Column World ------------------------------------------------------------


def column_world(rows=30, cols=3, gamma=0.9):
    """Grid world where every action in the rightmost column earns reward 1.

    State id is ``row * cols + col``; actions are left, right, up, down and
    moves off the grid leave the state unchanged.  Ground-truth label is the
    column.
    """
    if int(rows) != rows or int(cols) != cols or rows < 1 or cols < 2:
        raise ConfigurationError(f"column_world needs rows >= 1 and cols >= 2, got {rows}x{cols}")
    rows, cols = int(rows), int(cols)
    S = rows * cols
    T = np.zeros((S, 4, S))
    R = np.zeros((S, 4))
    moves = ((0, -1), (0, 1), (-1, 0), (1, 0))
    for r in range(rows):
        for c in range(cols):
            s = r * cols + c
            for a, (dr, dc) in enumerate(moves):
                nr, nc = r + dr, c + dc
                if not (0 <= nr < rows and 0 <= nc < cols):
                    nr, nc = r, c
                T[s, a, nr * cols + nc] = 1.0
            if c == cols - 1:
                R[s, :] = 1.0
    labels = np.tile(np.arange(cols), rows)
    return TabularMDP(
        transition=T,
        reward=R,
        gamma=gamma,
        initial_distribution=np.full(S, 1.0 / S),
        features=np.eye(S),
        labels=labels,
        env_id="column_world",
        task="right_column",
        action_names=COLUMN_WORLD_ACTIONS,
        meta={"rows": rows, "cols": cols},
    )


def column_of(env, state):
    return int(state) % env.meta["cols"]


# --- symbolic shapes world -----------------------------------------------------
# A state is (stacks, hand): stacks is a tuple over cells (row-major) of tuples
# of shape ids bottom-to-top, hand is the held shape id or -1.


def _erase(state):
    stacks, hand = state
    return tuple(len(st) for st in stacks), hand >= 0


def _shapes_transition(state, action, n_cells):
    stacks, hand = state
    cell = action % n_cells
    if action < n_cells:  # PICK
        if hand >= 0 or not stacks[cell]:
            return state
        new = list(stacks)
        new[cell] = stacks[cell][:-1]
        return tuple(new), stacks[cell][-1]
    if hand < 0:  # PLACE with empty hand
        return state
    new = list(stacks)
    new[cell] = stacks[cell] + (hand,)
    return tuple(new), -1


def _line_cells(grid, kind, length):
    """All cell index tuples forming a horizontal line or diagonal of ``length``."""
    h, w = grid
    out = []
    for r in range(h):
        for c in range(w):
            if kind == "row" and c + length <= w:
                out.append(tuple(r * w + c + i for i in range(length)))
            if kind == "diag":
                if r + length <= h and c + length <= w:
                    out.append(tuple((r + i) * w + c + i for i in range(length)))
                if r + length <= h and c - length + 1 >= 0:
                    out.append(tuple((r + i) * w + c - i for i in range(length)))
    return out


def shapes_goal(state, task, grid, n_objects):
    """Goal test on a shapes-world state; shape identities never matter."""
    heights, held = _erase(state)
    if held:
        return False
    if task == "stack":
        return max(heights) == n_objects
    if task in ("row", "diag"):
        for cells in _line_cells(grid, task, n_objects):
            if all(heights[c] == 1 for c in cells):
                return True
        return False
    raise ConfigurationError(f"unknown shapes task {task!r}; expected one of {SHAPES_TASKS}")


def _spread_configs(n_cells, shape_ids):
    """Empty-hand states with every object on its own cell."""
    seen = set()
    n = len(shape_ids)
    for cells in product(range(n_cells), repeat=n):
        if len(set(cells)) != n:
            continue
        stacks = [()] * n_cells
        for c, sh in zip(cells, shape_ids):
            stacks[c] = (sh,)
        seen.add((tuple(stacks), -1))
    return seen


def enumerate_shapes_states(grid, n_objects, n_shape_types):
    """Breadth-first enumeration of every state reachable from a spread start.

    Objects' shapes range over all multisets of ``n_shape_types``; the order
    of the returned list defines state ids.
    """
    h, w = grid
    n_cells = h * w
    starts = set()
    for combo in product(range(n_shape_types), repeat=n_objects):
        if list(combo) != sorted(combo):
            continue
        starts |= _spread_configs(n_cells, combo)
    starts = sorted(starts)
    index = {s: i for i, s in enumerate(starts)}
    order = list(starts)
    queue = deque(starts)
    while queue:
        s = queue.popleft()
        for a in range(2 * n_cells):
            t = _shapes_transition(s, a, n_cells)
            if t not in index:
                index[t] = len(order)
                order.append(t)
                queue.append(t)
    return order


def symbolic_shapes(grid=(2, 2), n_objects=2, n_shape_types=1, task="stack", gamma=0.9):
    """Pick-and-place world on a grid with symbolic (image-free) observations.

    Actions ``0..C-1`` are PICK(cell) and ``C..2C-1`` PLACE(cell).  Illegal
    actions are no-ops.  Observation features are per-cell stack heights plus
    a held flag, so shape identity is invisible to the learner.  Goal states
    of ``task`` are terminal and entering one pays reward 1; episodes start
    uniformly over spread, empty-hand, non-goal configurations.
    """
    if isinstance(grid, int):
        grid = (grid, grid)
    grid = tuple(int(g) for g in grid)
    if len(grid) != 2 or min(grid) < 2:
        raise ConfigurationError(f"grid must be at least 2x2, got {grid}")
    if n_objects < 2:
        raise ConfigurationError("n_objects must be >= 2")
    if n_shape_types < 1:
        raise ConfigurationError("n_shape_types must be >= 1")
    if n_objects > grid[0] * grid[1]:
        raise ConfigurationError("more objects than cells")
    if task not in SHAPES_TASKS:
        raise ConfigurationError(f"unknown shapes task {task!r}; expected one of {SHAPES_TASKS}")
    n_cells = grid[0] * grid[1]
    states = enumerate_shapes_states(grid, n_objects, n_shape_types)
    index = {s: i for i, s in enumerate(states)}
    S, A = len(states), 2 * n_cells
    T = np.zeros((S, A, S))
    goal = np.array([shapes_goal(s, task, grid, n_objects) for s in states])
    for i, s in enumerate(states):
        for a in range(A):
            T[i, a, index[_shapes_transition(s, a, n_cells)]] = 1.0
    R = T @ goal.astype(np.float64)
    feats = np.array([list(_erase(s)[0]) + [float(_erase(s)[1])] for s in states], dtype=np.float64)
    erased = {}
    labels = np.array([erased.setdefault(_erase(s), len(erased)) for s in states])
    spread = np.array([s[1] < 0 and all(len(st) <= 1 for st in s[0]) for s in states])
    init = (spread & ~goal).astype(np.float64)
    if init.sum() == 0:
        raise ConfigurationError(f"task {task!r} leaves no non-goal start states")
    init /= init.sum()
    names = tuple(f"pick{c}" for c in range(n_cells)) + tuple(f"place{c}" for c in range(n_cells))
    return TabularMDP(
        transition=T,
        reward=R,
        gamma=gamma,
        initial_distribution=init,
        terminal=frozenset(np.flatnonzero(goal).tolist()),
        features=feats,
        labels=labels,
        env_id="symbolic_shapes",
        task=task,
        states=states,
        action_names=names,
        meta={"grid": list(grid), "n_objects": n_objects, "n_shape_types": n_shape_types},
    )


def goal_mask(env: TabularMDP, task):
    """Boolean mask of states satisfying ``task`` in ``env``'s state space."""
    if env.env_id == "column_world":
        if task not in ("right_column", None):
            raise ConfigurationError(f"column_world has no task {task!r}")
        return np.array([column_of(env, s) == env.meta["cols"] - 1 for s in range(env.n_states)])
    if env.env_id == "symbolic_shapes":
        grid, n = tuple(env.meta["grid"]), env.meta["n_objects"]
        return np.array([shapes_goal(s, task, grid, n) for s in env.states])
    raise ConfigurationError(f"no goal definitions for env {env.env_id!r}")


ENVIRONMENTS = {"column_world": column_world, "symbolic_shapes": symbolic_shapes}


def make_env(env_id, **params):
    """Construct an environment by string id."""
    try:
        factory = ENVIRONMENTS[env_id]
    except KeyError:
        raise ConfigurationError(f"unknown env id {env_id!r}; expected one of {sorted(ENVIRONMENTS)}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for {env_id}: {exc}") from None
