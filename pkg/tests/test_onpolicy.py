from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from sieveci.basis import BasisSpec
from sieveci.core import EvalConfig, ReferenceDistribution
from sieveci.envs import LinearEnvSpec, scenario_target_policy
from sieveci.errors import InputError, RunError
from sieveci.fqi import FQILearner, epsilon_greedy
from sieveci.onpolicy import OnPolicySchedule, _Stream, aggregate_sqrtT, onpolicy_run
from sieveci.save import aggregate_inverse_sigma


def test_sqrtT_examples():
    v, s, _ = aggregate_sqrtT([1.0, 4.0], [1.0, 1.0], [4, 1])
    assert v == pytest.approx((2 * 1.0 + 4.0) / 3)
    assert s == pytest.approx(1.0)
    assert aggregate_sqrtT([3.0], [0.5], [7])[:2] == (3.0, pytest.approx(0.5))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6), st.floats(0.1, 5),
       st.integers(1, 400), st.integers(1, 50))
def test_equal_lengths_reduce_to_block_pooling(vals, sig, T, n):
    sig = np.full(len(vals), sig)
    v, s, scale = aggregate_sqrtT(vals, sig, [T] * len(vals), n)
    v2, s2 = aggregate_inverse_sigma(vals, sig)
    assert v == pytest.approx(v2, abs=1e-9) and s == pytest.approx(s2)
    assert scale == pytest.approx(1 / np.sqrt(n * T * len(vals)))


def test_aggregate_validation():
    with pytest.raises(InputError):
        aggregate_sqrtT([1.0], [0.0], [3])
    with pytest.raises(InputError):
        aggregate_sqrtT([1.0, 2.0], [1.0], [3])


def test_schedule_validation():
    with pytest.raises(InputError):
        OnPolicySchedule(1, (10,))
    with pytest.raises(InputError):
        OnPolicySchedule(3, (10, 10))
    with pytest.raises(InputError):
        OnPolicySchedule.constant(3, 10, epsilon=1.5)
    assert OnPolicySchedule.constant(4, 20).T_sched == (20, 20, 20, 20)


def test_pure_exploration_is_uniform():
    env = LinearEnvSpec("A")
    stream = _Stream(env, 400, np.random.default_rng(0))
    stream.batch(scenario_target_policy(), 5, 1)
    b2 = stream.batch(epsilon_greedy(scenario_target_policy(), 1.0), 5, 2)
    counts = np.bincount(b2.actions, minlength=2)
    assert chisquare(counts).pvalue > 0.001
    assert b2.t.min() == 5


class _ConstEnv:
    m, d, episodic = 2, 2, False

    def initial_states(self, n, rng):
        return rng.normal(size=(n, 2))

    def step(self, X, A, rng):
        return rng.normal(size=X.shape), np.full(X.shape[0], 1.5), np.zeros(X.shape[0], bool)


def test_constant_reward_geometric():
    res = onpolicy_run(_ConstEnv(), OnPolicySchedule.constant(3, 30, n=10),
                       FQILearner(BasisSpec(), 0.5), ReferenceDistribution.dirac([0.1, 0.2]),
                       EvalConfig(gamma=0.5), seed=1)
    assert res.aggregate.estimate == pytest.approx(3.0, abs=1e-6)
    assert len(res.per_block) == 2


class _FailingEnv(_ConstEnv):
    def __init__(self):
        self.calls = 0

    def step(self, X, A, rng):
        self.calls += 1
        if self.calls > 45:
            raise FloatingPointError("boom")
        return super().step(X, A, rng)


def test_failure_names_batch():
    with pytest.raises(RunError) as info:
        onpolicy_run(_FailingEnv(), OnPolicySchedule.constant(3, 20, n=10),
                     FQILearner(BasisSpec(), 0.5), ReferenceDistribution.dirac([0.0, 0.0]),
                     EvalConfig(), seed=0)
    assert info.value.index == 3


def test_run_is_seeded():
    args = (LinearEnvSpec("A"), OnPolicySchedule.constant(3, 30, n=10),
            FQILearner(BasisSpec(), 0.5), ReferenceDistribution.dirac([0.5, 0.5]), EvalConfig())
    a = onpolicy_run(*args, seed=4).aggregate
    b = onpolicy_run(*args, seed=4).aggregate
    assert a.estimate == b.estimate and a.std_err == b.std_err
    hw = 1.959964 * a.std_err / np.sqrt(10 * 30 * 2)
    assert a.half_width == pytest.approx(hw, rel=1e-6)
