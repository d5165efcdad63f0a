from __future__ import annotations

import numpy as np
import pytest

from sieveci.basis import BasisSpec, FeatureMap
from sieveci.core import EvalConfig, ReferenceDistribution, TrajectoryDataset, tabular_policy
from sieveci.envs import (LinearEnvSpec, TabularMDP, mc_true_value, scenario_target_policy,
                          simulate_dataset, tabular_exact_q)
from sieveci.errors import InputError
from sieveci.fqi import FQILearner
from sieveci.save import aggregate_inverse_sigma, partition_from_counts
from sieveci.sieve import fit_q
from sieveci.value_diff import (fit_behavior_policy, fit_q_behavior, fit_value_difference,
                                save_vd, vd_point)


def population_pairs(mdp, b, mu=None):
    """Two-step trajectories ``(s, a) -> (s', a')`` weighted by their exact probability."""
    S, m = mdp.S, mdp.m
    mu = np.full(S, 1.0 / S) if mu is None else mu
    rows = []
    for s in range(S):
        for a in range(m):
            for s2 in range(S):
                for a2 in range(m):
                    w = mu[s] * b[s, a] * mdp.P[s, a, s2] * b[s2, a2]
                    if w > 0:
                        rows.append((s, a, s2, a2, w))
    s, a, s2, a2, w = (np.array(c) for c in zip(*rows))
    k = s.size
    return TrajectoryDataset(np.arange(k), np.zeros(k, int), mdp.states[s], a, mdp.r[s, a],
                             mdp.states[s2], a2, m, weights=w)


def _mdp(seed, S=4, m=2):
    rng = np.random.default_rng(seed)
    mdp = TabularMDP.random(S, m, rng)
    return mdp, rng.dirichlet(np.ones(m), size=S)


def test_uniform_behavior_estimate():
    ds = simulate_dataset(LinearEnvSpec("A"), None, 50, 100, 0)
    fm = BasisSpec().build(ds)
    p, _ = fit_behavior_policy(ds, fm).probs(ds.states)
    dev = np.abs(p[:, 1] - 0.5)
    # the sup over all training states is dominated by sparse tail regions
    assert dev.mean() < 0.05
    assert np.quantile(dev, 0.9) < 0.1
    raw = fit_behavior_policy(ds, fm).raw_probs(ds.states)
    assert np.allclose(raw.sum(axis=1), 1.0, atol=1e-6)


def test_indicator_behavior_is_frequency():
    rng = np.random.default_rng(1)
    s = rng.integers(0, 3, 500)
    a = rng.integers(0, 3, 500)
    states = np.arange(3.0)[:, None]
    ds = TrajectoryDataset(np.arange(500), np.zeros(500, int), states[s], a, np.zeros(500),
                           states[s], np.full(500, -1), 3)
    bf = fit_behavior_policy(ds, FeatureMap.indicator(states))
    for si in range(3):
        freq = np.bincount(a[s == si], minlength=3) / np.sum(s == si)
        assert np.allclose(bf.raw_probs(states[si:si + 1])[0], freq, atol=1e-12)


def test_behavior_q_gamma_zero_matches_fit_q():
    ds = simulate_dataset(LinearEnvSpec("B"), None, 20, 30, 2)
    fm = BasisSpec().build(ds)
    fb = fit_q_behavior(ds, fm, 0.0)
    use = ds.subset(ds.has_next_action)
    fq = fit_q(use, fm, scenario_target_policy(), EvalConfig(gamma=0.0))
    assert np.allclose(fb.beta, fq.beta, atol=1e-10)
    assert fb.meta["records_dropped"] == 20


@pytest.mark.parametrize("gamma", [0.0, 0.5, 0.9])
def test_behavior_q_exact_moments(gamma):
    mdp, b = _mdp(3)
    fit = fit_q_behavior(population_pairs(mdp, b), FeatureMap.indicator(mdp.states), gamma)
    assert np.allclose(fit.beta.reshape(2, 4).T, tabular_exact_q(mdp, b, gamma), atol=1e-8)


def test_no_next_action_anywhere():
    ds = simulate_dataset(LinearEnvSpec("A"), None, 30, 1, 0)
    with pytest.raises(InputError):
        fit_q_behavior(ds, BasisSpec(L_override=16).build(ds), 0.5)


def test_target_equal_to_behavior_gives_zero():
    mdp, b = _mdp(4)
    ds = population_pairs(mdp, b)
    fm = FeatureMap.indicator(mdp.states)
    fits = fit_value_difference(ds, fm, tabular_policy(mdp.states, b), EvalConfig(gamma=0.7))
    for x in mdp.states:
        iv = vd_point(fits.fit_pi, fits.fit_b, fits.bfit, x, data=fits.data)
        assert abs(iv.estimate) < 1e-8


def test_deterministic_behavior_third_term_vanishes():
    mdp, _ = _mdp(5)
    b = np.zeros((4, 2))
    b[[0, 2], 0] = 1.0
    b[[1, 3], 1] = 1.0
    ds = population_pairs(mdp, b)
    fm = FeatureMap.indicator(mdp.states)
    pi = tabular_policy(mdp.states, np.full((4, 2), 0.5))
    # ridge because unvisited (s, a) cells leave the system singular
    fits = fit_value_difference(ds, fm, pi, EvalConfig(gamma=0.5, ridge_lambda=1e-8))
    a = vd_point(fits.fit_pi, fits.fit_b, fits.bfit, mdp.states[1])
    c = vd_point(fits.fit_pi, fits.fit_b, fits.bfit, mdp.states[1], data=fits.data)
    assert c.std_err == pytest.approx(a.std_err, rel=1e-9, abs=1e-12)


def test_scenario_b_matches_monte_carlo():
    env = LinearEnvSpec("B")
    pi = scenario_target_policy()
    x = np.array([0.5, 0.5])
    ds = simulate_dataset(env, None, 60, 100, 6)
    fits = fit_value_difference(ds, BasisSpec().build(ds), pi, EvalConfig())
    iv = vd_point(fits.fit_pi, fits.fit_b, fits.bfit, x, data=fits.data)
    G = ReferenceDistribution.dirac(x)
    v_pi, _ = mc_true_value(env, pi, G, 0.5, N_reps=20000, horizon=40, seed=1)
    v_b, _ = mc_true_value(env, env.behavior_policy(), G, 0.5, N_reps=20000, horizon=40, seed=2)
    se = iv.std_err / np.sqrt(iv.n_obs)
    assert abs(iv.estimate - (v_pi - v_b)) < 3 * se


def test_truncation_rule():
    ds = simulate_dataset(LinearEnvSpec("D"), None, 40, 40, 9)
    part = partition_from_counts(40, 40, 2, 2)
    learner = FQILearner(BasisSpec(), 0.5)
    x = np.zeros(2)
    loose = save_vd(ds, part, learner, x, 1e-9, EvalConfig())
    vals = [b.interval.estimate for b in loose.per_block]
    sig = [b.interval.std_err for b in loose.per_block]
    assert loose.aggregate.estimate == pytest.approx(aggregate_inverse_sigma(vals, sig)[0])
    tight = save_vd(ds, part, learner, x, 1e3, EvalConfig())
    assert all(b.weight_sigma == 1e3 for b in tight.per_block)
    assert tight.aggregate.estimate == pytest.approx(np.mean(vals))
    assert loose.meta["clamp_counts"]["x"] >= 0
    with pytest.raises(InputError):
        save_vd(ds, part, learner, x, -1.0, EvalConfig())
