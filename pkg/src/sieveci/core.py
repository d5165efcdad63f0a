"""Domain types: transitions, trajectory datasets, policies, reference
distributions and evaluation settings.

Datasets are column-oriented (one numpy array per field) and sorted by
``(traj_id, t)``; the row-oriented :class:`TransitionRecord` view exists for
I/O and validation reports.  Every array is frozen after construction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .errors import InputError, UnknownStateError

POLICY_KINDS = (
    "deterministic_rule",
    "tabular_probabilities",
    "greedy_from_q",
    "epsilon_greedy",
    "uniform",
    "custom",
)

_PROB_TOL = 1e-12


def _frozen(a, dtype=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TransitionRecord:
    traj_id: int
    t: int
    state: tuple
    action: int
    reward: float
    next_state: tuple
    next_action: int | None = None


@dataclass(frozen=True, eq=False)
class TrajectoryDataset:
    """Observed transitions ``(X, A, Y, X')`` grouped by trajectory.

    ``next_actions`` holds ``-1`` where the trajectory has no transition at
    ``t + 1``.  ``weights`` (default all ones) lets callers feed exact
    population moments; every estimator normalises by ``weights.sum()``.
    """

    traj_id: np.ndarray
    t: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_actions: np.ndarray
    m: int
    weights: np.ndarray | None = None

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        next_states = np.asarray(self.next_states, dtype=float)
        if next_states.ndim == 1:
            next_states = next_states[:, None]
        n_rec = states.shape[0]
        object.__setattr__(self, "traj_id", _frozen(self.traj_id, np.int64))
        object.__setattr__(self, "t", _frozen(self.t, np.int64))
        object.__setattr__(self, "states", _frozen(states))
        object.__setattr__(self, "actions", _frozen(self.actions, np.int64))
        object.__setattr__(self, "rewards", _frozen(self.rewards, float))
        object.__setattr__(self, "next_states", _frozen(next_states))
        object.__setattr__(self, "next_actions", _frozen(self.next_actions, np.int64))
        if self.weights is not None:
            object.__setattr__(self, "weights", _frozen(self.weights, float))
        object.__setattr__(self, "m", int(self.m))
        for name in ("traj_id", "t", "actions", "rewards", "next_actions"):
            if getattr(self, name).shape != (n_rec,):
                raise InputError(f"{name} must have shape ({n_rec},)")
        if self.next_states.shape != states.shape:
            raise InputError("next_states must match states in shape")
        if self.weights is not None and self.weights.shape != (n_rec,):
            raise InputError("weights must have one entry per record")

    # ---- sizes -------------------------------------------------------
    @property
    def N(self) -> int:
        """Number of transition records."""
        return int(self.states.shape[0])

    @property
    def d(self) -> int:
        return int(self.states.shape[1])

    @property
    def traj_ids(self) -> np.ndarray:
        return np.unique(self.traj_id)

    @property
    def n(self) -> int:
        return int(self.traj_ids.size)

    @property
    def lengths(self) -> dict[int, int]:
        ids, counts = np.unique(self.traj_id, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    @property
    def total_weight(self) -> float:
        return float(self.N if self.weights is None else self.weights.sum())

    def weight_array(self) -> np.ndarray:
        return np.ones(self.N) if self.weights is None else np.asarray(self.weights)

    def common_length(self) -> int:
        """Return T when every trajectory has the same length, else raise."""
        lens = set(self.lengths.values())
        if len(lens) != 1:
            raise InputError(
                f"equal trajectory lengths required, found {sorted(lens)[:5]}"
            )
        return lens.pop()

    @property
    def has_next_action(self) -> np.ndarray:
        return self.next_actions >= 0

    # ---- construction --------------------------------------------------
    @classmethod
    def from_records(cls, records: Iterable[TransitionRecord], m: int) -> "TrajectoryDataset":
        recs = sorted(records, key=lambda r: (r.traj_id, r.t))
        if not recs:
            raise InputError("no records")
        return cls(
            traj_id=[r.traj_id for r in recs],
            t=[r.t for r in recs],
            states=[list(r.state) for r in recs],
            actions=[r.action for r in recs],
            rewards=[r.reward for r in recs],
            next_states=[list(r.next_state) for r in recs],
            next_actions=[-1 if r.next_action is None else r.next_action for r in recs],
            m=m,
        )

    @classmethod
    def from_paths(cls, states, actions, rewards, m: int, traj_offset: int = 0,
                   t_offset: int = 0) -> "TrajectoryDataset":
        """Build from rectangular arrays.

        ``states`` is ``(n, T + 1, d)`` (the final slice is the state after the
        last action); ``actions`` and ``rewards`` are ``(n, T)``.
        """
        states = np.asarray(states, dtype=float)
        if states.ndim == 2:
            states = states[:, :, None]
        actions = np.asarray(actions)
        rewards = np.asarray(rewards, dtype=float)
        n, T1, d = states.shape
        T = T1 - 1
        if actions.shape != (n, T) or rewards.shape != (n, T):
            raise InputError("actions/rewards must be (n, T) with states (n, T+1, d)")
        next_actions = np.full((n, T), -1, dtype=np.int64)
        if T > 1:
            next_actions[:, :-1] = actions[:, 1:]
        traj = np.repeat(np.arange(n) + traj_offset, T)
        tt = np.tile(np.arange(T) + t_offset, n)
        return cls(
            traj_id=traj,
            t=tt,
            states=states[:, :-1, :].reshape(n * T, d),
            actions=actions.reshape(-1),
            rewards=rewards.reshape(-1),
            next_states=states[:, 1:, :].reshape(n * T, d),
            next_actions=next_actions.reshape(-1),
            m=m,
        )

    def subset(self, idx) -> "TrajectoryDataset":
        """Records at positions ``idx`` (bool mask or integer index), order kept."""
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        else:
            idx = np.sort(idx)
        return TrajectoryDataset(
            traj_id=self.traj_id[idx],
            t=self.t[idx],
            states=self.states[idx],
            actions=self.actions[idx],
            rewards=self.rewards[idx],
            next_states=self.next_states[idx],
            next_actions=self.next_actions[idx],
            m=self.m,
            weights=None if self.weights is None else self.weights[idx],
        )

    def with_rewards(self, rewards) -> "TrajectoryDataset":
        return TrajectoryDataset(self.traj_id, self.t, self.states, self.actions, rewards,
                                 self.next_states, self.next_actions, self.m, self.weights)

    def relabel_trajectories(self, mapping: dict[int, int]) -> "TrajectoryDataset":
        """Rename trajectories and re-sort by ``(traj_id, t)``."""
        new_ids = np.array([mapping[int(i)] for i in self.traj_id], dtype=np.int64)
        order = np.lexsort((self.t, new_ids))
        return TrajectoryDataset(
            traj_id=new_ids[order], t=self.t[order], states=self.states[order],
            actions=self.actions[order], rewards=self.rewards[order],
            next_states=self.next_states[order], next_actions=self.next_actions[order],
            m=self.m, weights=None if self.weights is None else self.weights[order],
        )

    def records(self) -> list[TransitionRecord]:
        out = []
        for k in range(self.N):
            na = int(self.next_actions[k])
            out.append(TransitionRecord(
                traj_id=int(self.traj_id[k]),
                t=int(self.t[k]),
                state=tuple(float(v) for v in self.states[k]),
                action=int(self.actions[k]),
                reward=float(self.rewards[k]),
                next_state=tuple(float(v) for v in self.next_states[k]),
                next_action=None if na < 0 else na,
            ))
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.traj_id, self.t, self.states, self.actions, self.rewards,
                  self.next_states, self.next_actions):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


def concat_datasets(parts: Sequence[TrajectoryDataset]) -> TrajectoryDataset:
    """Concatenate datasets that cover disjoint ``(traj_id, t)`` cells.

    ``next_actions`` are re-derived so records that now have a successor in
    the combined data carry its action.
    """
    m = parts[0].m
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    traj, tt = cat("traj_id"), cat("t")
    order = np.lexsort((tt, traj))
    ds = TrajectoryDataset(
        traj_id=traj[order], t=tt[order], states=cat("states")[order],
        actions=cat("actions")[order], rewards=cat("rewards")[order],
        next_states=cat("next_states")[order], next_actions=cat("next_actions")[order],
        m=m,
    )
    na = np.array(ds.next_actions)
    same = (ds.traj_id[1:] == ds.traj_id[:-1]) & (ds.t[1:] == ds.t[:-1] + 1)
    na[:-1][same] = ds.actions[1:][same]
    return TrajectoryDataset(ds.traj_id, ds.t, ds.states, ds.actions, ds.rewards,
                             ds.next_states, na, m)


@dataclass(frozen=True)
class Violation:
    kind: str
    traj_id: int | None
    t: int | None
    message: str

    def __str__(self):
        where = "" if self.traj_id is None else f" (traj_id={self.traj_id}, t={self.t})"
        return f"{self.kind}{where}: {self.message}"


def validate_dataset(ds: TrajectoryDataset) -> list[Violation]:
    """List every invariant violation; an empty list means the dataset is valid."""
    out: list[Violation] = []
    if ds.N == 0:
        return [Violation("empty dataset", None, None, "total_transitions must be > 0")]
    m = ds.m
    for k in np.flatnonzero((ds.actions < 0) | (ds.actions >= m)):
        out.append(Violation("action out of range", int(ds.traj_id[k]), int(ds.t[k]),
                             f"action={int(ds.actions[k])} not in [0, {m})"))
    for k in np.flatnonzero(ds.next_actions >= m):
        out.append(Violation("next_action out of range", int(ds.traj_id[k]), int(ds.t[k]),
                             f"next_action={int(ds.next_actions[k])} not in [0, {m})"))
    bad = ~(np.isfinite(ds.states).all(axis=1) & np.isfinite(ds.next_states).all(axis=1)
            & np.isfinite(ds.rewards))
    for k in np.flatnonzero(bad):
        out.append(Violation("non-finite value", int(ds.traj_id[k]), int(ds.t[k]),
                             "state, next_state or reward is not finite"))

    order = np.lexsort((ds.t, ds.traj_id))
    if not np.array_equal(order, np.arange(ds.N)):
        out.append(Violation("unsorted", None, None, "records must be sorted by (traj_id, t)"))
    traj, tt = ds.traj_id[order], ds.t[order]
    starts = np.flatnonzero(np.r_[True, traj[1:] != traj[:-1]])
    ends = np.r_[starts[1:], ds.N]
    for s, e in zip(starts, ends):
        tid = int(traj[s])
        times = tt[s:e]
        if not np.array_equal(times, np.arange(e - s)):
            out.append(Violation("time gap", tid, int(times[0]),
                                 f"time indices must be 0..{e - s - 1}"))
            continue
        rows = order[s:e]
        for j in range(len(rows)):
            k = rows[j]
            if j + 1 < len(rows):
                k2 = rows[j + 1]
                if not np.array_equal(ds.next_states[k], ds.states[k2]):
                    out.append(Violation("chain break", tid, int(ds.t[k]),
                                         "next_state differs from the state at t+1"))
                if ds.next_actions[k] != ds.actions[k2]:
                    out.append(Violation("next_action mismatch", tid, int(ds.t[k]),
                                         "next_action differs from the action at t+1"))
            elif ds.next_actions[k] >= 0:
                out.append(Violation("dangling next_action", tid, int(ds.t[k]),
                                     "last transition must not carry next_action"))
    return out


# ---------------------------------------------------------------------------
# State lookup for finite state spaces
# ---------------------------------------------------------------------------

class StateIndex:
    """Maps state vectors of a finite state space to positions in ``states``."""

    def __init__(self, states):
        st = np.asarray(states, dtype=float)
        if st.ndim == 1:
            st = st[:, None]
        if st.shape[0] == 0:
            raise InputError("state list is empty")
        self.states = _frozen(st)
        self._lookup = {tuple(row): i for i, row in enumerate(st.tolist())}
        if len(self._lookup) != st.shape[0]:
            raise InputError("state list contains duplicates")
        self._dense = None
        if st.shape[1] == 1 and np.all(st == np.round(st)) and st.min() >= 0 and st.max() < 1e6:
            dense = np.full(int(st.max()) + 1, -1, dtype=np.int64)
            dense[st[:, 0].astype(np.int64)] = np.arange(st.shape[0])
            self._dense = dense

    def __len__(self):
        return self.states.shape[0]

    @property
    def d(self) -> int:
        return self.states.shape[1]

    def index(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :] if X.shape[0] == self.d else X[:, None]
        if X.shape[1] != self.d:
            raise InputError(f"state dimension {X.shape[1]} != {self.d}")
        if self._dense is not None:
            v = X[:, 0]
            ok = (v == np.round(v)) & (v >= 0) & (v < self._dense.size)
            idx = np.full(X.shape[0], -1, dtype=np.int64)
            idx[ok] = self._dense[v[ok].astype(np.int64)]
        else:
            idx = np.array([self._lookup.get(tuple(row), -1) for row in X.tolist()],
                           dtype=np.int64)
        if np.any(idx < 0):
            bad = X[np.flatnonzero(idx < 0)[0]]
            raise UnknownStateError(f"state {bad.tolist()} is not in the state list")
        return idx


class QTable:
    """Explicit Q-values over a finite state space, usable by greedy policies."""

    def __init__(self, states, values):
        self.index = states if isinstance(states, StateIndex) else StateIndex(states)
        self.values = _frozen(values, float)
        if self.values.shape[0] != len(self.index):
            raise InputError("Q-table rows must match the state list")

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def q_values(self, X) -> np.ndarray:
        return self.values[self.index.index(X)]


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

def _as_batch(X, d: int | None) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2:
        raise InputError("states must be a vector or an (N, d) array")
    if d is not None and X.shape[1] != d:
        raise InputError(f"state dimension {X.shape[1]} does not match policy dimension {d}")
    return X, single


def one_hot(actions, m: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.int64)
    out = np.zeros((actions.size, m))
    out[np.arange(actions.size), actions] = 1.0
    return out


@dataclass(frozen=True, eq=False)
class Policy:
    """Stationary policy mapping states to action distributions.

    ``payload`` by kind:

    * ``deterministic_rule``: callable ``X (N, d) -> actions (N,)``
    * ``tabular_probabilities``: ``(StateIndex, table (S, m))``
    * ``greedy_from_q``: object with ``q_values(X) -> (N, m)``
    * ``epsilon_greedy``: ``(base Policy, epsilon)``
    * ``uniform``: ``None``
    * ``custom``: callable ``X (N, d) -> probabilities (N, m)``
    """

    kind: str
    m: int
    payload: Any = None
    d: int | None = None
    tag: str = ""

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise InputError(f"unknown policy kind {self.kind!r}")
        if self.m < 1:
            raise InputError("policy needs at least one action")

    def probs(self, X) -> np.ndarray:
        """Action probabilities, ``(N, m)`` for a batch or ``(m,)`` for one state."""
        X, single = _as_batch(X, self.d)
        kind = self.kind
        if kind == "uniform":
            p = np.full((X.shape[0], self.m), 1.0 / self.m)
        elif kind == "deterministic_rule":
            acts = np.asarray(self.payload(X), dtype=np.int64).reshape(-1)
            if np.any((acts < 0) | (acts >= self.m)):
                raise InputError("deterministic rule returned an action out of range")
            p = one_hot(acts, self.m)
        elif kind == "tabular_probabilities":
            index, table = self.payload
            p = np.asarray(table, dtype=float)[index.index(X)]
        elif kind == "greedy_from_q":
            q = np.asarray(self.payload.q_values(X), dtype=float)
            # np.argmax returns the first maximiser: smallest index among exact ties
            p = one_hot(np.argmax(q, axis=1), self.m)
        elif kind == "epsilon_greedy":
            base, eps = self.payload
            p = (1.0 - eps) * base.probs(X) + eps / self.m
        else:
            p = np.asarray(self.payload(X), dtype=float).reshape(X.shape[0], self.m)
        return p[0] if single else p

    def greedy_actions(self, X) -> np.ndarray:
        """Most probable action, smallest index on ties."""
        return np.argmax(self.probs(np.atleast_2d(X)), axis=1)

    def sample(self, X, rng: np.random.Generator) -> np.ndarray:
        """Draw one action per row using exactly one uniform per row."""
        p = self.probs(np.atleast_2d(np.asarray(X, dtype=float)))
        u = rng.random(p.shape[0])
        cdf = np.cumsum(p, axis=1)
        acts = (u[:, None] >= cdf).sum(axis=1)
        return np.minimum(acts, self.m - 1)

    @property
    def is_deterministic(self) -> bool:
        return self.kind in ("deterministic_rule", "greedy_from_q")


def policy_probs(policy: Policy, x) -> np.ndarray:
    """Probability vector of ``policy`` at the single state ``x``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InputError("policy_probs expects a single state vector")
    return policy.probs(x)


def uniform_policy(m: int, d: int | None = None) -> Policy:
    return Policy("uniform", m, None, d, tag="uniform")


def deterministic_policy(rule: Callable, m: int, d: int | None = None, tag: str = "") -> Policy:
    return Policy("deterministic_rule", m, rule, d, tag=tag or "deterministic")


def tabular_policy(states, table, tag: str = "") -> Policy:
    index = states if isinstance(states, StateIndex) else StateIndex(states)
    table = np.asarray(table, dtype=float)
    if table.ndim != 2 or table.shape[0] != len(index):
        raise InputError("table must be (S, m) with one row per listed state")
    if np.any(table < 0) or np.any(np.abs(table.sum(axis=1) - 1.0) > _PROB_TOL):
        raise InputError("each table row must be a probability vector")
    table.setflags(write=False)
    return Policy("tabular_probabilities", table.shape[1], (index, table), index.d,
                  tag=tag or "tabular")


def custom_policy(fn: Callable, m: int, d: int | None = None, tag: str = "") -> Policy:
    return Policy("custom", m, fn, d, tag=tag or "custom")


# ---------------------------------------------------------------------------
# Reference distributions and configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReferenceDistribution:
    """Reference distribution of initial states.

    ``sampler`` draws ``draws`` points from ``generator`` with
    ``np.random.default_rng(seed)``; the same (seed, draws) always yields the
    same points, so value estimates and Monte Carlo truths can share them.
    ``generator`` is either ``{"family": "normal", "mean": [...], "cov": [[...]]}``
    or a callable ``(rng, count) -> (count, d)``.
    """

    kind: str
    x0: np.ndarray | None = None
    states: np.ndarray | None = None
    seed: int = 0
    draws: int = 10000
    generator: Any = None

    def __post_init__(self):
        if self.kind == "dirac":
            object.__setattr__(self, "x0", _frozen(np.atleast_1d(np.asarray(self.x0, float))))
        elif self.kind == "sample_set":
            st = np.asarray(self.states, dtype=float)
            if st.ndim == 1:
                st = st[:, None]
            if st.shape[0] == 0:
                raise InputError("sample_set must be non-empty")
            object.__setattr__(self, "states", _frozen(st))
        elif self.kind == "sampler":
            if int(self.draws) < 1:
                raise InputError("sampler needs draws >= 1")
            if self.generator is None:
                raise InputError("sampler needs a generator")
        else:
            raise InputError(f"unknown reference distribution kind {self.kind!r}")

    @classmethod
    def dirac(cls, x0) -> "ReferenceDistribution":
        return cls("dirac", x0=x0)

    @classmethod
    def sample_set(cls, states) -> "ReferenceDistribution":
        return cls("sample_set", states=states)

    @classmethod
    def normal(cls, mean, cov=None, seed: int = 0, draws: int = 10000) -> "ReferenceDistribution":
        mean = [float(v) for v in np.atleast_1d(mean)]
        cov = np.eye(len(mean)) if cov is None else np.asarray(cov, dtype=float)
        return cls("sampler", seed=seed, draws=draws,
                   generator={"family": "normal", "mean": mean, "cov": cov.tolist()})

    def _generate(self, rng, count) -> np.ndarray:
        gen = self.generator
        if callable(gen):
            return np.asarray(gen(rng, count), dtype=float).reshape(count, -1)
        if gen.get("family") != "normal":
            raise InputError(f"unsupported generator family {gen.get('family')!r}")
        mean = np.asarray(gen["mean"], dtype=float)
        cov = np.asarray(gen.get("cov", np.eye(mean.size)), dtype=float)
        chol = np.linalg.cholesky(cov)
        return mean + rng.standard_normal((count, mean.size)) @ chol.T

    def points(self, draws: int | None = None, seed: int | None = None) -> np.ndarray:
        """Support points of the (empirical) reference measure, equally weighted."""
        if self.kind == "dirac":
            return self.x0[None, :]
        if self.kind == "sample_set":
            return self.states
        rng = np.random.default_rng(self.seed if seed is None else seed)
        return self._generate(rng, int(self.draws if draws is None else draws))

    def initial_states(self, count: int, seed: int | None = None) -> np.ndarray:
        """``count`` starting states for rollouts.

        Samplers reuse :meth:`points` so that ``count == draws`` reproduces
        exactly the points used by value estimates.  Sample sets are cycled.
        """
        if self.kind == "dirac":
            return np.repeat(self.x0[None, :], count, axis=0)
        if self.kind == "sample_set":
            reps = -(-count // self.states.shape[0])
            return np.tile(self.states, (reps, 1))[:count]
        return self.points(draws=count, seed=seed)

    def describe(self) -> dict:
        if self.kind == "dirac":
            return {"kind": "dirac", "x0": self.x0.tolist()}
        if self.kind == "sample_set":
            return {"kind": "sample_set", "size": int(self.states.shape[0])}
        gen = "callable" if callable(self.generator) else self.generator
        return {"kind": "sampler", "seed": self.seed, "draws": self.draws, "generator": gen}


@dataclass(frozen=True)
class EvalConfig:
    gamma: float = 0.5
    alpha: float = 0.05
    eta: float = 3.0 / 7.0
    L_override: int | None = None
    ridge_lambda: float = 0.0
    g_draws: int = 10000
    seed: int = 0
    degree: int = 3

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0):
            raise InputError("gamma must lie in [0, 1)")
        if not (0.0 < self.alpha < 1.0):
            raise InputError("alpha must lie in (0, 1)")
        if self.ridge_lambda < 0:
            raise InputError("ridge_lambda must be >= 0")
        if self.g_draws < 1:
            raise InputError("g_draws must be >= 1")
