"""Online evaluation: collect data in batches under an epsilon-greedy version
of the current policy estimate, evaluate every new batch under the policy
that generated it, and pool the batch estimates with sqrt(T) weights."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .basis import BasisSpec, FeatureMap
from .core import (EvalConfig, Policy, ReferenceDistribution, TrajectoryDataset,
                   concat_datasets, uniform_policy)
from .envs import rollout
from .errors import InputError, RunError, SieveCIError
from .fqi import epsilon_greedy
from .save import BlockEstimate, SaveResult
from .sieve import fit_q, make_interval, value_integrated


@dataclass(frozen=True)
class OnPolicySchedule:
    K: int
    T_sched: tuple
    epsilon: float = 0.2
    n: int = 25

    def __post_init__(self):
        object.__setattr__(self, "T_sched", tuple(int(t) for t in self.T_sched))
        if self.K < 2:
            raise InputError("K must be >= 2")
        if len(self.T_sched) != self.K:
            raise InputError(f"T_sched needs {self.K} entries, got {len(self.T_sched)}")
        if any(t < 1 for t in self.T_sched):
            raise InputError("every batch length must be >= 1")
        if not (0.0 <= self.epsilon <= 1.0):
            raise InputError("epsilon must lie in [0, 1]")
        if self.n < 1:
            raise InputError("n must be >= 1")

    @classmethod
    def constant(cls, K: int, T: int, epsilon: float = 0.2, n: int = 25) -> "OnPolicySchedule":
        return cls(K, (T,) * K, epsilon, n)


def aggregate_sqrtT(values, sigmas, T_list, n: int = 1) -> tuple[float, float, float]:
    """Pool batch estimates with weights ``sqrt(T_k) / sigma_k``.

    Returns ``(V_tilde, sigma_tilde, scale)``; the CI half-width is
    ``z * sigma_tilde * scale`` with ``scale = {sum_k sqrt(n T_k / J)}^-1``
    over the ``J`` evaluated batches.  For equal lengths this is
    ``(n T J)^-1/2``, the same as pooling ``J`` blocks of ``n T`` records.
    """
    v = np.asarray(values, dtype=float)
    s = np.asarray(sigmas, dtype=float)
    T = np.asarray(T_list, dtype=float)
    if v.size == 0 or v.shape != s.shape or v.shape != T.shape:
        raise InputError("values, sigmas and T_list must be equal-length and nonempty")
    if np.any(~np.isfinite(s)) or np.any(s <= 0):
        raise InputError("every sigma must be a positive finite number")
    if np.any(T < 1):
        raise InputError("batch lengths must be >= 1")
    w = np.sqrt(T) / s
    v_t = float((w * v).sum() / w.sum())
    s_t = float(np.sqrt(T).sum() / w.sum())
    scale = 1.0 / float(np.sqrt(n * T / v.size).sum())
    return v_t, s_t, scale


class _Stream:
    """``n`` trajectories advanced batch by batch from their last state."""

    def __init__(self, env, n: int, rng: np.random.Generator):
        self.env = env
        self.rng = rng
        self.X = env.initial_states(n, rng)
        self.t = 0

    def batch(self, policy: Policy, T: int, index: int) -> TrajectoryDataset:
        try:
            states, actions, rewards = rollout(self.env, policy, self.X, T, self.rng)
        except SieveCIError:
            raise
        except Exception as exc:
            raise RunError(f"environment failed in batch {index}: {exc}", index) from exc
        ds = TrajectoryDataset.from_paths(states, actions, rewards, m=self.env.m,
                                          t_offset=self.t)
        self.X = states[:, -1]
        self.t += T
        return ds


def onpolicy_run(env, schedule: OnPolicySchedule,
                 learner: Callable[[TrajectoryDataset], Policy], G: ReferenceDistribution,
                 cfg: EvalConfig, basis: BasisSpec | FeatureMap | None = None,
                 seed: int = 0) -> SaveResult:
    """Run the batch schedule on ``env`` and return the pooled interval.

    Batch 1 uses uniformly random actions.  Batch ``k+1`` is generated by
    ``epsilon_greedy(pi_k, epsilon)`` where ``pi_k`` is learned from batches
    ``1..k``, and is evaluated under ``pi_k``.
    """
    basis = BasisSpec(eta=cfg.eta, degree=cfg.degree, L_override=cfg.L_override) \
        if basis is None else basis
    stream = _Stream(env, schedule.n, np.random.default_rng(seed))
    batches = [stream.batch(uniform_policy(env.m), schedule.T_sched[0], 1)]
    per_block = []
    for k in range(1, schedule.K):
        seen = batches[0] if k == 1 else concat_datasets(batches)
        pi = learner(seen)
        behavior = epsilon_greedy(pi, schedule.epsilon)
        new = stream.batch(behavior, schedule.T_sched[k], k + 1)
        fm = basis.build(new) if isinstance(basis, BasisSpec) else basis
        fit = fit_q(new, fm, pi, cfg, context=f"batch {k + 1} of {schedule.K}")
        iv = value_integrated(fit, G, pi, cfg.alpha)
        per_block.append(BlockEstimate(k + 1, pi.tag, iv, fm.L))
        batches.append(new)
    T_eval = list(schedule.T_sched[1:])
    v_t, s_t, scale = aggregate_sqrtT([b.interval.estimate for b in per_block],
                                      [b.interval.std_err for b in per_block],
                                      T_eval, schedule.n)
    n_eff = 1.0 / scale ** 2
    agg = make_interval(v_t, s_t, n_eff, cfg.alpha, {"K": schedule.K, "T_sched":
                                                     list(schedule.T_sched),
                                                     "epsilon": schedule.epsilon},
                        scale=scale)
    meta = {"schedule": {"K": schedule.K, "T_sched": list(schedule.T_sched),
                         "epsilon": schedule.epsilon, "n": schedule.n}, "seed": seed}
    return SaveResult(per_block, agg, schedule.K, meta)
