import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bisimvib.baseline import (
    ForwardModel, ForwardModelConfig, OracleModel, Partition, greedy_approx_bisimulation, holdout_split,
    is_bisimulation, next_state_accuracy, partition_metrics, train_forward_model,
)
from bisimvib.dqn import QNetwork, collect_dataset
from bisimvib.envs import TabularMDP, column_world
from bisimvib.errors import ConfigurationError, UsageError

from _util import assert_stochastic


@pytest.fixture(scope="module")
def env():
    return column_world(30, 3)


@pytest.fixture(scope="module")
def oracle_partition(env):
    return greedy_approx_bisimulation(OracleModel(env), env.n_states, env.n_actions, 0.5)


def _random_dataset(env, n, seed):
    q = QNetwork(env.feature_dim, env.n_actions, rng=np.random.default_rng(seed))
    return collect_dataset(env, q, n, behavior_epsilon=1.0, rng=np.random.default_rng(seed))


def test_oracle_gives_column_partition(env, oracle_partition):
    assert oracle_partition.n_blocks == 3
    assert np.array_equal(oracle_partition.assignment(), env.labels)
    assert is_bisimulation(oracle_partition, env.reward, env.transition)


def test_two_identical_states_merge():
    T = np.full((2, 1, 2), 0.5)
    R = np.zeros((2, 1))
    env = TabularMDP(T, R, 0.9, np.array([0.5, 0.5]), features=np.eye(2), labels=np.zeros(2, int))
    part = greedy_approx_bisimulation(OracleModel(env), 2, 1, 0.0)
    assert part.n_blocks == 1


def test_epsilon_zero_oracle_is_bisimulation(env):
    part = greedy_approx_bisimulation(OracleModel(env), env.n_states, env.n_actions, 0.0)
    assert is_bisimulation(part, env.reward, env.transition)
    assert part.n_blocks == 3


def test_refinement_monotone_in_epsilon(env):
    eps = [2.0, 1.0, 0.6, 0.5, 0.3, 0.1, 0.0]
    parts = [greedy_approx_bisimulation(OracleModel(env), env.n_states, env.n_actions, e) for e in eps]
    for coarse, fine in zip(parts, parts[1:]):
        assert fine.refines(coarse)


def test_refinement_monotone_on_perturbed_model(env):
    rng = np.random.default_rng(0)
    T = env.transition * 0.9 + 0.1 * rng.dirichlet(np.ones(env.n_states), size=(env.n_states, env.n_actions))
    R = env.reward + rng.normal(scale=0.05, size=env.reward.shape)

    class Noisy:
        def reward_table(self):
            return R

        def transition_table(self):
            return T

    prev = None
    for e in (0.5, 0.2, 0.05):
        part = greedy_approx_bisimulation(Noisy(), env.n_states, env.n_actions, e)
        assert part.passes <= env.n_states
        if prev is not None:
            assert part.n_blocks >= prev.n_blocks
        prev = part


@pytest.mark.parametrize("seed", range(100))
def test_partition_invariants_random_models(seed):
    rng = np.random.default_rng(seed)
    S, A = int(rng.integers(2, 30)), int(rng.integers(1, 5))
    model = ForwardModel(S, A, hidden=8, rng=rng)
    eps = float(rng.choice([0.0, 0.05, 0.2, 0.5, 1.0]))
    part = greedy_approx_bisimulation(model, S, A, eps)
    seen = sorted(s for b in part.blocks for s in b)
    assert seen == list(range(S))
    assert part.passes <= S
    assert_stochastic(model.transition_table())


def test_partition_roundtrip_and_validation(tmp_path):
    part = Partition([[2, 0], [1]])
    assert part.blocks == [[0, 2], [1]]
    path = tmp_path / "p.json"
    part.save(path)
    assert path.read_text() == "[[0, 2], [1]]"
    assert Partition.load(path).blocks == part.blocks
    for bad in ([[0, 1], [1]], [[0, 2]], [[], [0]]):
        with pytest.raises(UsageError):
            Partition(bad)


def test_partition_metrics(env, oracle_partition):
    assert partition_metrics(oracle_partition, env.labels) == (3, 1.0)
    singles = Partition([[s] for s in range(env.n_states)])
    assert partition_metrics(singles, env.labels) == (90, 1.0)
    one = Partition([list(range(env.n_states))])
    size, pur = partition_metrics(one, env.labels)
    assert size == 1 and pur == pytest.approx(1 / 3)


def test_oracle_tables_exact(env):
    o = OracleModel(env)
    assert np.array_equal(o.reward_table(), env.reward)
    assert np.array_equal(o.transition_table(), env.transition)


def test_epsilon_validation(env):
    with pytest.raises(UsageError):
        greedy_approx_bisimulation(OracleModel(env), env.n_states, env.n_actions, -0.1)
    with pytest.raises(UsageError):
        greedy_approx_bisimulation(OracleModel(env), 10, env.n_actions, 0.5)


def test_forward_model_accuracy_grows_with_data(env):
    big = _random_dataset(env, 20000, 0)
    train, held = holdout_split(big, 0.1, np.random.default_rng(0))
    cfg = ForwardModelConfig(min_steps=3000, n_states=env.n_states)
    large = train_forward_model(train, cfg, np.random.default_rng(1))
    assert next_state_accuracy(large, held) >= 0.99
    small = train_forward_model(train.subset(np.arange(900)), cfg, np.random.default_rng(1))
    assert next_state_accuracy(small, held) < next_state_accuracy(large, held)
    assert_stochastic(large.transition_table())


def test_forward_model_roundtrip(tmp_path, env):
    m = ForwardModel(env.n_states, env.n_actions, 16, np.random.default_rng(0))
    path = tmp_path / "fwd.json"
    m.save(path)
    back = ForwardModel.load(path)
    assert np.array_equal(back.reward_table(), m.reward_table())


def test_forward_model_config():
    with pytest.raises(ConfigurationError):
        ForwardModelConfig(lr=0)
    with pytest.raises(ConfigurationError):
        ForwardModelConfig.from_dict({"depth": 3})
    assert ForwardModelConfig.from_dict({"hidden": 8}).hidden == 8


def test_forward_model_needs_ids(env):
    data = _random_dataset(env, 10, 0)
    data.s_id[0] = -1
    with pytest.raises(UsageError):
        train_forward_model(data)
    with pytest.raises(UsageError):
        holdout_split(data, 1.5)


@settings(max_examples=30, deadline=None)
@given(S=st.integers(2, 12), seed=st.integers(0, 2**31))
def test_zero_epsilon_oracle_partitions_are_bisimulations(S, seed):
    rng = np.random.default_rng(seed)
    # few distinct rows so nontrivial bisimulations exist
    kinds = rng.integers(0, 3, size=S)
    nxt = rng.integers(0, S, size=(3, 2))
    T = np.zeros((S, 2, S))
    for s in range(S):
        T[s, [0, 1], nxt[kinds[s]]] = 1.0
    R = (kinds[:, None] == 0).astype(float) * np.ones((S, 2))

    class Tables:
        def reward_table(self):
            return R

        def transition_table(self):
            return T

    part = greedy_approx_bisimulation(Tables(), S, 2, 0.0)
    assert is_bisimulation(part, R, T)
