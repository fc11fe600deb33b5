import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bisimvib.abstraction import (
    AbstractMDP, QTable, abstract_transitions, abstraction_map, assign_abstract_state, bellman_residual,
    build_abstract_mdp, effective_num_states, empirical_transitions, evaluate_policy, greedy_policy, mean_q,
    plan_for_goal, project_rewards, purity, random_policy, softmax_policy, value_iteration,
)
from bisimvib.envs import column_world, goal_mask, symbolic_shapes
from bisimvib.errors import GoalNotRepresented, UsageError

from _util import assert_stochastic, exact_q, exhaustive_dataset, lookup_model


@pytest.fixture(scope="module")
def cw():
    env = column_world(30, 3)
    return env, exhaustive_dataset(env)


def _column_t(env, K=6):
    """Exact abstract transitions of the column partition; unused rows uniform."""
    T = np.full((env.n_actions, K, K), 1.0 / K)
    T[:, :3] = 0.0
    nxt = env.next_state_table()
    for a in range(env.n_actions):
        for s in range(env.n_states):
            T[a, env.labels[s], env.labels[nxt[s, a]]] = 1.0
    return T


def chain_mdp(gamma=0.9):
    # L -> M -> R under every action, R absorbing with reward 1
    T = np.zeros((1, 3, 3))
    T[0, 0, 1] = T[0, 1, 2] = T[0, 2, 2] = 1.0
    return AbstractMDP(T, np.array([[0.0], [0.0], [1.0]]), gamma)


def purity_reference(assignments, labels):
    total = 0
    for k in set(assignments):
        best = 0
        for lab in set(labels):
            count = 0
            for a, l in zip(assignments, labels):
                if a == k and l == lab:
                    count += 1
            best = max(best, count)
        total += best
    return total / len(assignments)


# --- assignment and purity ---------------------------------------------------

def test_assign_lookup(cw):
    env, _ = cw
    model = lookup_model(env, env.labels, 6)
    assert np.array_equal(assign_abstract_state(model, env.features), env.labels)
    assert assign_abstract_state(model, env.features[5]) == env.labels[5]
    amap = abstraction_map(model, env)
    assert len(amap.blocks()) == 3
    assert sorted(sum(amap.blocks(), [])) == list(range(env.n_states))
    again = abstraction_map(model, env)
    assert np.array_equal(again.assign, amap.assign)


def test_assign_tie_breaks_low():
    env = column_world(1, 2)
    model = lookup_model(env, [0, 1], 3)
    model.set_prior(means=np.zeros((3, 3)))
    assert assign_abstract_state(model, env.features).tolist() == [0, 0]


def test_purity_examples():
    assert purity([0, 0, 1, 1], ["a", "a", "b", "b"]) == 1.0
    assert purity([0, 0, 0, 1], ["x", "x", "y", "y"]) == pytest.approx(0.75)
    env = column_world()
    assert purity(np.zeros(90, int), env.labels) == pytest.approx(1 / 3)
    with pytest.raises(UsageError):
        purity([], [])
    with pytest.raises(UsageError):
        purity([0, 1], [0])


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 200), k=st.integers(1, 10), n_labels=st.integers(1, 5), seed=st.integers(0, 2**31))
def test_purity_matches_brute_force(n, k, n_labels, seed):
    rng = np.random.default_rng(seed)
    a, lab = rng.integers(0, k, n), rng.integers(0, n_labels, n)
    assert purity(a, lab) == pytest.approx(purity_reference(a.tolist(), lab.tolist()), abs=1e-12)


def test_effective_num_states():
    assert effective_num_states([0, 0, 1]) == 2
    assert effective_num_states([4, 4, 4]) == 1


# --- abstract MDP --------------------------------------------------------------

def test_abstract_mdp_validation_and_roundtrip(tmp_path):
    mdp = chain_mdp()
    path = tmp_path / "mdp.json"
    mdp.save(path)
    assert set(json.loads(path.read_text())) == {"K", "n_actions", "transition", "reward", "gamma"}
    back = AbstractMDP.load(path)
    assert np.array_equal(back.transition, mdp.transition) and back.gamma == 0.9
    with pytest.raises(UsageError):
        AbstractMDP(np.full((1, 2, 2), 0.6), np.zeros((2, 1)), 0.9)
    with pytest.raises(UsageError):
        AbstractMDP(np.full((1, 2, 2), 0.5), np.array([[np.nan], [0.0]]), 0.9)


def test_abstract_transitions_hmm_and_gmm(cw):
    env, data = cw
    T = _column_t(env)
    hmm = lookup_model(env, env.labels, 6, transition=T)
    assert np.allclose(abstract_transitions(hmm), T, atol=1e-12)
    assert_stochastic(abstract_transitions(hmm))
    gmm = lookup_model(env, env.labels, 6, prior_kind="gmm")
    emp = abstract_transitions(gmm, data)
    assert_stochastic(emp)
    assert np.allclose(emp, empirical_transitions(gmm, data))
    # add-one smoothing: 30 "right" transitions from column 0, all into column 1
    assert emp[1, 0, 1] == pytest.approx(31 / 36)
    with pytest.raises(UsageError):
        abstract_transitions(gmm)


# --- rewards --------------------------------------------------------------------

def test_project_rewards_column_world(cw):
    env, data = cw
    model = lookup_model(env, env.labels, 6)
    right = goal_mask(env, "right_column")
    reward = project_rewards(model, data, right)
    expected = np.zeros((6, 4))
    expected[1, 1] = 1.0  # middle column, action right
    expected[2, 1:] = 1.0  # right, up and down keep the right column; left leaves it
    assert np.array_equal(reward, expected)
    same = project_rewards(model, data, lambda feats, ids: right[ids])
    assert np.array_equal(same, reward)


def test_project_rewards_mean_mode(cw):
    env, data = cw
    model = lookup_model(env, env.labels, 6)
    reward = project_rewards(model, data, goal_mask(env, "right_column"), mode="mean")
    assert reward[1, 1] == 1.0 and reward[2, 2] == 1.0 and reward[2, 0] == 0.0
    with pytest.raises(UsageError):
        project_rewards(model, data, goal_mask(env, "right_column"), mode="max")


def test_project_rewards_errors_and_disjoint_support(cw):
    env, data = cw
    model = lookup_model(env, env.labels, 6)
    with pytest.raises(GoalNotRepresented):
        project_rewards(model, data, np.zeros(env.n_states, bool))
    left = project_rewards(model, data, env.labels == 0)
    # goal "column 2 reached by moving right from column 1" vs "column 0 reached": disjoint
    mid_right = project_rewards(model, data, lambda f, ids: (env.labels[ids] == 2) & (env.labels[data.s_id] == 1))
    assert not np.any((left > 0) & (mid_right > 0))


# --- value iteration and policies -------------------------------------------------

def test_value_iteration_examples():
    one = AbstractMDP(np.ones((1, 1, 1)), np.ones((1, 1)), 0.5)
    assert value_iteration(one).values[0, 0] == pytest.approx(2.0, abs=1e-7)
    q = value_iteration(chain_mdp(), tol=1e-10)
    assert q.values[:, 0] == pytest.approx([8.1, 9.0, 10.0], abs=1e-8)
    rng = np.random.default_rng(0)
    mdp = AbstractMDP(rng.dirichlet(np.ones(4), size=(2, 4)), rng.normal(size=(4, 2)), 0.0)
    assert np.array_equal(value_iteration(mdp).values, mdp.reward)


@pytest.mark.parametrize("seed", range(20))
def test_value_iteration_residual(seed):
    rng = np.random.default_rng(seed)
    K, A = rng.integers(1, 12), rng.integers(1, 5)
    mdp = AbstractMDP(rng.dirichlet(np.ones(K), size=(A, K)), rng.uniform(-1, 1, (K, A)), rng.uniform(0, 0.99))
    tol = 1e-8
    q = value_iteration(mdp, tol=tol)
    assert q.converged and bellman_residual(mdp, q.values) < 10 * tol


def test_value_iteration_warns_when_capped():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        q = value_iteration(chain_mdp(0.99), tol=1e-12, max_iters=3)
    assert not q.converged and q.warning
    assert any(issubclass(w.category, RuntimeWarning) for w in caught)


def test_softmax_policy():
    assert np.allclose(softmax_policy(np.zeros((2, 4)), 0.1), 0.25)
    q = np.array([[1.0, 1.001, 0.5]])
    assert softmax_policy(q, 1e-6)[0, 1] >= 0.999
    pi = softmax_policy(np.random.default_rng(0).normal(size=(50, 4)) * 30, 0.1)
    assert np.max(np.abs(pi.sum(axis=1) - 1)) <= 1e-12
    assert softmax_policy(np.array([[-np.inf, 0.0]]), 0.1)[0, 0] == 0.0
    with pytest.raises(UsageError):
        softmax_policy(q, 0.0)


def test_greedy_policy_tie_break():
    assert greedy_policy(np.array([[1.0, 1.0, 0.0]])).tolist() == [[1.0, 0.0, 0.0]]


# --- mean Q --------------------------------------------------------------------------

def test_mean_q_arithmetic_mean(cw):
    env, data = cw
    model = lookup_model(env, np.zeros(env.n_states, int), 2)
    sub = data.subset([0, 4])  # two transitions from states 0 and 1
    sub.y = np.array([[1.0, 0, 0, 0], [3.0, 0, 0, 0]])
    q = mean_q(model, sub)
    assert q.values[0, 0] == 2.0
    assert np.all(q.values[1] == -np.inf)


def test_mean_q_singletons_reproduce_labels(cw):
    env, data = cw
    model = lookup_model(env, np.arange(env.n_states), env.n_states, scale=20.0)
    q = mean_q(model, data)
    assert np.array_equal(q.values[data.s_id], data.y)


def test_mean_q_multitask_slice(cw):
    env, data = cw
    model = lookup_model(env, env.labels, 6)
    two = data.subset(np.arange(len(data)))
    two.y = np.concatenate([data.y, -data.y], axis=1)
    two.n_tasks = 2
    assert np.allclose(mean_q(model, two, task=1).values[:3], -mean_q(model, data).values[:3])


def test_mean_q_empty():
    class Empty:
        y = np.zeros((0, 2))

        def __len__(self):
            return 0

    with pytest.raises(UsageError):
        mean_q(None, Empty())


# --- evaluation -----------------------------------------------------------------------

def test_optimal_abstract_policy_reaches_right_column(cw):
    env, data = cw
    model = lookup_model(env, env.labels, 6, transition=_column_t(env))
    _, q, pi = plan_for_goal(model, data, goal_mask(env, "right_column"), env.gamma)
    res = evaluate_policy(env, model, pi, budget=50, n_episodes=200, rng=np.random.default_rng(0),
                          goal=goal_mask(env, "right_column"))
    assert res.metric == "success" and res.mean >= 0.99


def test_budget_zero_counts_only_goal_starts(cw):
    env, data = cw
    goal = goal_mask(env, "right_column")
    res = evaluate_policy(env, None, random_policy(4), 0, 3000, np.random.default_rng(1), goal=goal)
    starts = np.array([env.sample_initial(s) for s in np.random.default_rng(1).spawn(3000)])
    assert res.mean == pytest.approx(goal[starts].mean())
    assert 0.2 < res.mean < 0.45  # uniform start: one column in three


def test_return_metric_and_pairing(cw):
    env, _ = cw
    a = evaluate_policy(env, None, random_policy(4), 10, 50, np.random.default_rng(7), metric="return")
    b = evaluate_policy(env, None, random_policy(4), 10, 50, np.random.default_rng(7), metric="return")
    assert np.array_equal(a.values, b.values)
    assert np.all(a.values <= 10) and a.std == pytest.approx(np.std(a.values))


def test_evaluate_policy_errors(cw):
    env, _ = cw
    with pytest.raises(UsageError):
        evaluate_policy(env, None, np.ones((6, 4)) / 4, 5, 1, np.random.default_rng(0))
    with pytest.raises(UsageError):
        evaluate_policy(env, None, random_policy(4), 5, 1, np.random.default_rng(0), metric="regret")


def test_random_policy_on_stacking():
    env = symbolic_shapes((2, 2), 2, 1, task="stack")
    res = evaluate_policy(env, None, random_policy(env.n_actions), 20, 500, np.random.default_rng(0))
    assert 0.0 < res.mean < 1.0


def test_qtable_greedy():
    assert QTable(np.array([[0.0, 2.0]])).greedy().tolist() == [[0.0, 1.0]]


def test_build_abstract_mdp(cw):
    env, data = cw
    model = lookup_model(env, env.labels, 6, transition=_column_t(env))
    mdp = build_abstract_mdp(model, np.zeros((6, 4)), 0.9)
    assert (mdp.K, mdp.n_actions) == (6, 4)
    assert_stochastic(mdp.transition)
