from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sieveci.core import (EvalConfig, ReferenceDistribution, TrajectoryDataset,
                          concat_datasets, deterministic_policy, tabular_policy, uniform_policy,
                          validate_dataset)
from sieveci.envs import scenario_target_policy
from sieveci.errors import InputError
from sieveci.fqi import epsilon_greedy


def _small(n=2, T=3, seed=0):
    rng = np.random.default_rng(seed)
    return TrajectoryDataset.from_paths(rng.normal(size=(n, T + 1, 2)),
                                        rng.integers(0, 2, (n, T)), rng.normal(size=(n, T)), m=2)


def test_uniform_and_rule_probs():
    assert uniform_policy(2).probs([0.3, 1.0]).tolist() == [0.5, 0.5]
    pi = scenario_target_policy()
    assert pi.probs([1.0, 1.0]).tolist() == [1.0, 0.0]
    assert pi.probs([-1.0, 1.0]).tolist() == [0.0, 1.0]


def test_epsilon_greedy_over_rule():
    pi = epsilon_greedy(deterministic_policy(lambda X: np.zeros(len(X), int), 2), 0.2)
    assert np.allclose(pi.probs([0.0, 0.0]), [0.9, 0.1])


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(2, 5), st.integers(0, 10 ** 6))
def test_epsilon_greedy_identities(eps, m, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(20, 2))
    table_states = X
    base = tabular_policy(table_states, rng.dirichlet(np.ones(m), size=20))
    p = epsilon_greedy(base, eps).probs(X)
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.allclose(p, (1 - eps) * base.probs(X) + eps / m)
    assert np.all(p >= eps / m - 1e-15)
    assert np.allclose(epsilon_greedy(base, 0.0).probs(X), base.probs(X))
    assert np.allclose(epsilon_greedy(base, 1.0).probs(X), 1.0 / m)


def test_epsilon_out_of_range():
    with pytest.raises(InputError):
        epsilon_greedy(uniform_policy(2), 1.5)


def test_sample_frequencies():
    pi = tabular_policy([[0.0]], [[0.2, 0.8]])
    acts = pi.sample(np.zeros((20000, 1)), np.random.default_rng(5))
    assert abs(acts.mean() - 0.8) < 0.01


def test_valid_dataset_has_no_violations():
    assert validate_dataset(_small()) == []


def test_chain_break():
    ds = _small()
    ns = np.array(ds.next_states)
    ns[0] += 1.0
    bad = TrajectoryDataset(ds.traj_id, ds.t, ds.states, ds.actions, ds.rewards, ns,
                            ds.next_actions, 2)
    v = validate_dataset(bad)
    assert [(x.kind, x.traj_id, x.t) for x in v] == [("chain break", 0, 0)]


def test_action_out_of_range():
    ds = _small()
    a = np.array(ds.actions)
    a[-1] = 2
    bad = TrajectoryDataset(ds.traj_id, ds.t, ds.states, a, ds.rewards, ds.next_states,
                            ds.next_actions, 2)
    kinds = [x.kind for x in validate_dataset(bad)]
    assert "action out of range" in kinds
    assert kinds.count("action out of range") == 1


def test_time_gap_and_empty():
    ds = _small(n=1, T=3)
    bad = TrajectoryDataset(ds.traj_id, [0, 1, 3], ds.states, ds.actions, ds.rewards,
                            ds.next_states, ds.next_actions, 2)
    assert [x.kind for x in validate_dataset(bad)] == ["time gap"]
    empty = TrajectoryDataset([], [], np.zeros((0, 2)), [], [], np.zeros((0, 2)), [], 2)
    assert [x.kind for x in validate_dataset(empty)] == ["empty dataset"]


def test_from_paths_bookkeeping():
    ds = _small(n=25, T=30)
    assert ds.N == 750 and ds.d == 2 and ds.n == 25
    assert ds.common_length() == 30
    assert int(ds.has_next_action.sum()) == 25 * 29


def test_concat_preserves_order():
    a, b = _small(seed=1), _small(seed=2)
    b2 = b.relabel_trajectories({0: 5, 1: 6})
    both = concat_datasets([a, b2])
    assert both.N == a.N + b.N
    assert validate_dataset(both) == []


def test_reference_distribution_reuse():
    G = ReferenceDistribution.normal([0, 0], seed=123, draws=500)
    assert np.array_equal(G.points(), G.points())
    assert np.array_equal(G.initial_states(500), G.points())
    d = ReferenceDistribution.dirac([0.5, 0.5])
    assert d.initial_states(3).shape == (3, 2)


def test_eval_config_validation():
    with pytest.raises(InputError):
        EvalConfig(gamma=1.0)
    with pytest.raises(InputError):
        EvalConfig(alpha=0.0)
    with pytest.raises(InputError):
        EvalConfig(ridge_lambda=-1.0)
