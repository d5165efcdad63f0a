from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sieveci.basis import BasisSpec
from sieveci.core import EvalConfig, ReferenceDistribution
from sieveci.envs import LinearEnvSpec, scenario_target_policy, simulate_dataset
from sieveci.errors import InputError, PartitionError, SingularSystemError
from sieveci.fqi import FQILearner
from sieveci.save import (BlockPartition, aggregate_inverse_sigma, block_fit_and_eval,
                          check_ordering, make_partition, partition_from_counts,
                          permute_trajectories, run_blocks, save_evaluate)
from sieveci.sieve import fit_q, value_integrated, z_quantile

G = ReferenceDistribution.normal([0, 0], seed=123, draws=2000)


def test_partition_example_order():
    p = make_partition(4, 6, 2, 3)
    assert p.K == 4
    assert p.rects == ((0, 2, 0, 3), (2, 4, 0, 3), (0, 2, 3, 6), (2, 4, 3, 6))
    assert all(len(c) == 6 for c in p.blocks)


def test_time_only_and_trajectory_only():
    p = make_partition(5, 12, 5, 4)
    assert p.K_n == 1 and p.K_T == 3
    assert [r[2:] for r in p.rects] == [(0, 4), (4, 8), (8, 12)]
    q = make_partition(6, 10, 2, 10)
    assert q.K_n == 3 and q.K_T == 1
    assert [r[:2] for r in q.rects] == [(0, 2), (2, 4), (4, 6)]


def test_remainder_goes_to_last_block():
    p = partition_from_counts(7, 10, 2, 3)
    assert p.rects[-1] == (3, 7, 6, 10)
    assert sum(len(c) for c in p.blocks) == 70


def test_single_block_rejected():
    with pytest.raises(PartitionError):
        make_partition(4, 6, 4, 6)
    with pytest.raises(PartitionError):
        partition_from_counts(3, 5, 4, 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.data())
def test_ordering_rule_brute_force(n, T, data):
    n_min = data.draw(st.integers(1, n))
    T_min = data.draw(st.integers(1, T))
    if (n // n_min) * (T // T_min) < 2:
        return
    p = make_partition(n, T, n_min, T_min)
    assert check_ordering(p, exhaustive=True) == []
    cells = np.concatenate(p.blocks)
    assert len({tuple(c) for c in cells}) == n * T


@settings(max_examples=40, deadline=None)
@given(st.permutations(range(4)))
def test_rectangle_check_agrees_with_brute_force(order):
    base = make_partition(4, 6, 2, 3)
    p = BlockPartition(2, 2, 2, 3, 4, 6, tuple(base.rects[k] for k in order))
    assert check_ordering(p) == check_ordering(p, exhaustive=True)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.data())
def test_harmonic_mean_identity(values, data):
    sig = data.draw(st.lists(st.floats(0.01, 20), min_size=len(values), max_size=len(values)))
    v, s = aggregate_inverse_sigma(values, sig)
    sig = np.array(sig)
    assert s == pytest.approx(len(sig) / np.sum(1 / sig), rel=1e-12)
    assert min(values) - 1e-9 <= v <= max(values) + 1e-9
    v2, s2 = aggregate_inverse_sigma(values, np.full(len(values), 1.7))
    assert v2 == pytest.approx(np.mean(values), abs=1e-9) and s2 == pytest.approx(1.7)


def test_aggregate_examples():
    v, s = aggregate_inverse_sigma([1.0, 3.0], [1.0, 2.0])
    assert v == pytest.approx(5 / 3) and s == pytest.approx(4 / 3)
    assert aggregate_inverse_sigma([2.5], [0.4]) == (2.5, pytest.approx(0.4))
    with pytest.raises(InputError):
        aggregate_inverse_sigma([1.0], [0.0])


def _fingerprint(pi):
    X = np.random.default_rng(0).normal(size=(300, 2)) * 1.5
    return pi.probs(X).tobytes()


def test_future_block_poisoning():
    ds = simulate_dataset(LinearEnvSpec("A"), None, 40, 40, 5)
    part = partition_from_counts(40, 40, 2, 2)
    learner = FQILearner(BasisSpec(), 0.5)
    idx = part.record_indices(ds)

    def policies(data):
        seen = []

        def evaluate(view, pi, ctx):
            seen.append(_fingerprint(pi))
            return None, None

        run_blocks(data, part, learner, evaluate)
        return seen

    clean = policies(ds)
    for j in range(1, part.K):
        # poison every block from j on; policies learned from blocks < j+1 must not move
        y = np.array(ds.rewards)
        later = np.concatenate(idx[j:])
        y[later] = 1e6 * np.random.default_rng(j).normal(size=later.size)
        dirty = policies(ds.with_rewards(y))
        assert dirty[:j] == clean[:j]
        if j < part.K - 1:
            assert dirty[j] != clean[j]


def test_learner_never_sees_later_records():
    ds = simulate_dataset(LinearEnvSpec("B"), None, 8, 10, 1)
    part = partition_from_counts(8, 10, 2, 2)
    idx = part.record_indices(ds)
    sizes = []

    def learner(view):
        sizes.append(view.N)
        keys = set(zip(view.traj_id.tolist(), view.t.tolist()))
        allowed = {(int(ds.traj_id[i]), int(ds.t[i])) for k in range(len(sizes)) for i in idx[k]}
        assert keys <= allowed
        assert not np.any(view.has_next_action[-1:])
        return scenario_target_policy()

    run_blocks(ds, part, learner, lambda v, pi, c: (None, None))
    assert sizes == [sum(len(i) for i in idx[:k]) for k in range(1, part.K)]


def test_labels_shape_mismatch():
    ds = simulate_dataset(LinearEnvSpec("A"), None, 4, 6, 0)
    with pytest.raises(PartitionError):
        make_partition(5, 6, 2, 3).labels(ds)


def test_full_block_matches_direct_fit():
    ds = simulate_dataset(LinearEnvSpec("A"), None, 10, 30, 2)
    pi = scenario_target_policy()
    cfg = EvalConfig()
    a = block_fit_and_eval(ds, np.arange(ds.N), pi, BasisSpec(), cfg, G)
    b = value_integrated(fit_q(ds, BasisSpec().build(ds), pi, cfg), G, pi)
    assert a.estimate == b.estimate and a.std_err == b.std_err


def test_two_blocks_fixed_learner():
    ds = simulate_dataset(LinearEnvSpec("A"), None, 60, 50, 8)
    pi = scenario_target_policy()
    cfg = EvalConfig()
    part = partition_from_counts(60, 50, 2, 1)
    res = save_evaluate(ds, part, lambda _: pi, G, cfg)
    full = value_integrated(fit_q(ds, BasisSpec().build(ds), pi, cfg), G, pi)
    assert res.K == 2 and len(res.per_block) == 1
    blk = res.per_block[0].interval
    assert res.aggregate.estimate == blk.estimate
    assert abs(res.aggregate.estimate - full.estimate) < 5 * blk.std_err / np.sqrt(ds.N / 2)
    hw = z_quantile(0.05) * blk.std_err / np.sqrt(ds.N / 2)
    assert res.aggregate.half_width == pytest.approx(hw, rel=1e-12)


def test_disjoint_blocks_agree():
    ds = simulate_dataset(LinearEnvSpec("A"), None, 80, 40, 11)
    pi = scenario_target_policy()
    part = partition_from_counts(80, 40, 2, 1)
    a, b = [block_fit_and_eval(ds, i, pi, BasisSpec(), EvalConfig(), G)
            for i in part.record_indices(ds)]
    se = np.hypot(a.std_err, b.std_err) / np.sqrt(ds.N / 2)
    assert abs(a.estimate - b.estimate) < 5 * se


def test_permutation_is_seeded_relabelling():
    ds = simulate_dataset(LinearEnvSpec("A"), None, 6, 4, 0)
    a = permute_trajectories(ds, 3)
    b = permute_trajectories(ds, 3)
    assert a.fingerprint() == b.fingerprint()
    assert sorted(a.traj_ids.tolist()) == sorted(ds.traj_ids.tolist())
    assert np.allclose(np.sort(a.rewards), np.sort(ds.rewards))


def test_singular_error_names_block():
    ds = simulate_dataset(LinearEnvSpec("A"), None, 4, 6, 0)
    part = partition_from_counts(4, 6, 2, 1)
    with pytest.raises(SingularSystemError) as info:
        save_evaluate(ds, part, lambda _: scenario_target_policy(), G, EvalConfig())
    assert "block 2 of 2" in str(info.value)


def test_unequal_lengths_rejected():
    ds = simulate_dataset(LinearEnvSpec("A"), None, 4, 6, 0)
    short = ds.subset(np.flatnonzero(~((ds.traj_id == 0) & (ds.t == 5))))
    with pytest.raises(InputError):
        save_evaluate(short, partition_from_counts(4, 6, 2, 1), lambda _: None, G, EvalConfig())
