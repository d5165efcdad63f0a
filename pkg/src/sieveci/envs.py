"""Simulation environments, trajectory generation and value oracles.

All randomness flows through ``numpy.random.Generator`` (PCG64) objects.
Each environment step draws its noise before looking at the actions, so
two runs with equal generator states but different actions see identical
noise.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .core import (
    Policy,
    QTable,
    ReferenceDistribution,
    StateIndex,
    TrajectoryDataset,
    custom_policy,
    tabular_policy,
    uniform_policy,
)
from .errors import InputError

# ---------------------------------------------------------------------------
# Linear Gaussian scenarios A, B, D
# ---------------------------------------------------------------------------

_NOISE_SD = 0.5  # z ~ N(0, I/4)


@dataclass(frozen=True)
class LinearEnvSpec:
    variant: str = "A"
    d: int = 2
    m: int = 2
    episodic: bool = False

    def __post_init__(self):
        if self.variant not in ("A", "B", "D"):
            raise InputError(f"unknown linear variant {self.variant!r}")

    # -- batch interface -------------------------------------------------
    def initial_states(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, 2))

    def step(self, X, A, rng: np.random.Generator):
        X = np.asarray(X, dtype=float)
        A = np.asarray(A)
        z = rng.normal(0.0, _NOISE_SD, size=X.shape)
        if self.variant == "D":
            nxt = X * np.array([-0.75, 0.75]) + z
            y = 2.0 * nxt[:, 0] + nxt[:, 1]
        else:
            s = 2.0 * A - 1.0
            nxt = np.column_stack([0.75 * s * X[:, 0], -0.75 * s * X[:, 1]]) + z
            y = 2.0 * nxt[:, 0] + nxt[:, 1] - 0.25 * s
        return nxt, y, np.zeros(X.shape[0], dtype=bool)

    def behavior_prob_one(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.variant == "B":
            return 0.5 * expit(X[:, 0]) + 0.5 * expit(X[:, 1])
        return np.full(X.shape[0], 0.5)

    def behavior_policy(self) -> Policy:
        if self.variant == "B":
            return custom_policy(
                lambda X: np.column_stack([1.0 - self.behavior_prob_one(X),
                                           self.behavior_prob_one(X)]),
                2, 2, tag="scenarioB-behavior")
        return uniform_policy(2, 2)

    def describe(self) -> dict:
        return {"env": "linear", "variant": self.variant}


def linear_step(spec: LinearEnvSpec, x, a: int, rng: np.random.Generator):
    """One transition ``(next_state, reward)`` from state ``x`` under action ``a``."""
    if a not in (0, 1):
        raise InputError("action must be 0 or 1")
    nxt, y, _ = spec.step(np.asarray(x, dtype=float)[None, :], np.array([a]), rng)
    return nxt[0], float(y[0])


def behavior_action(spec: LinearEnvSpec, x, rng: np.random.Generator) -> int:
    p1 = spec.behavior_prob_one(np.asarray(x, dtype=float)[None, :])[0]
    return int(rng.random() < p1)


def scenario_target_policy() -> Policy:
    """Action 0 when both coordinates are positive, action 1 otherwise."""
    return Policy("deterministic_rule", 2,
                  lambda X: np.where((X[:, 0] > 0) & (X[:, 1] > 0), 0, 1), 2,
                  tag="quadrant-rule")


# ---------------------------------------------------------------------------
# Cliff Walking
# ---------------------------------------------------------------------------

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}


@dataclass(frozen=True)
class CliffEnvSpec:
    """4x12 Cliff Walking; cells are coded ``row * cols + col`` as 1-vectors.

    Entering the cliff costs -100, every other move -1, both plus Gaussian
    noise.  Cliff and goal entries send the agent back to the start, which
    is recorded as the transition's next state.
    """

    rows: int = 4
    cols: int = 12
    reward_noise_sd: float = 1.0
    step_reward: float = -1.0
    cliff_reward: float = -100.0
    d: int = 1
    m: int = 4
    episodic: bool = True

    @property
    def start(self) -> int:
        return (self.rows - 1) * self.cols

    @property
    def goal(self) -> int:
        return self.rows * self.cols - 1

    @property
    def cliff_cells(self) -> np.ndarray:
        return np.arange(self.start + 1, self.goal)

    def state_list(self) -> np.ndarray:
        """Cells the agent can occupy (everything except cliff and goal)."""
        cells = np.arange(self.rows * self.cols)
        keep = ~np.isin(cells, np.r_[self.cliff_cells, self.goal])
        return cells[keep].astype(float)[:, None]

    def _move(self, cells: np.ndarray, actions: np.ndarray):
        r, c = np.divmod(cells, self.cols)
        dr = np.array([_MOVES[a][0] for a in range(4)])[actions]
        dc = np.array([_MOVES[a][1] for a in range(4)])[actions]
        r2 = np.clip(r + dr, 0, self.rows - 1)
        c2 = np.clip(c + dc, 0, self.cols - 1)
        raw = r2 * self.cols + c2
        into_cliff = np.isin(raw, self.cliff_cells)
        at_goal = raw == self.goal
        mean_reward = np.where(into_cliff, self.cliff_reward, self.step_reward)
        reset = into_cliff | at_goal
        nxt = np.where(reset, self.start, raw)
        return nxt, mean_reward, reset

    def initial_states(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.full((n, 1), float(self.start))

    def step(self, X, A, rng: np.random.Generator):
        X = np.asarray(X, dtype=float)
        noise = rng.normal(0.0, 1.0, size=X.shape[0]) * self.reward_noise_sd
        cells = X[:, 0].astype(np.int64)
        A = np.asarray(A, dtype=np.int64)
        if np.any((A < 0) | (A > 3)):
            raise InputError("cliff actions must be in 0..3")
        nxt, mean_reward, reset = self._move(cells, A)
        return nxt.astype(float)[:, None], mean_reward + noise, reset

    def to_tabular(self, episodic: bool = False) -> "TabularMDP":
        """Mean-reward tabular model over :meth:`state_list`.

        The default is the continuing chain the data follow (resets lead to
        the start cell).  ``episodic=True`` routes cliff and goal entries to
        an extra absorbing zero-reward state appended last.
        """
        cells = self.state_list()[:, 0].astype(np.int64)
        index = {int(c): i for i, c in enumerate(cells)}
        S = cells.size + (1 if episodic else 0)
        P = np.zeros((S, 4, S))
        r = np.zeros((S, 4))
        for a in range(4):
            nxt, mean_reward, reset = self._move(cells, np.full(cells.size, a))
            for s in range(cells.size):
                target = S - 1 if (episodic and reset[s]) else index[int(nxt[s])]
                P[s, a, target] = 1.0
            r[:cells.size, a] = mean_reward
        states = self.state_list()
        if episodic:
            P[S - 1, :, S - 1] = 1.0
            states = np.vstack([states, [[-1.0]]])
        return TabularMDP(P=P, r=r, states=states)

    def optimal_policy(self, gamma: float = 0.5) -> Policy:
        """Greedy policy for the episodic task (shortest path avoiding the cliff)."""
        mdp = self.to_tabular(episodic=True)
        q = optimal_q(mdp, gamma)[:-1]
        return Policy("greedy_from_q", 4, QTable(self.state_list(), q), 1, tag="cliff-optimal")

    def behavior_policy(self, gamma: float = 0.5) -> Policy:
        """50-50 mixture of the optimal and the uniform random policy."""
        from .fqi import epsilon_greedy

        return epsilon_greedy(self.optimal_policy(gamma), 0.5)

    def describe(self) -> dict:
        return {"env": "cliff", "rows": self.rows, "cols": self.cols,
                "reward_noise_sd": self.reward_noise_sd}


def cliff_step(spec: CliffEnvSpec, cell: int, a: int, rng: np.random.Generator):
    """``(next_cell, reward, reset_flag)`` for one move."""
    nxt, y, reset = spec.step(np.array([[float(cell)]]), np.array([a]), rng)
    return int(nxt[0, 0]), float(y[0]), bool(reset[0])


# ---------------------------------------------------------------------------
# Tabular MDPs (oracle scaffolding)
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TabularMDP:
    P: np.ndarray  # (S, m, S)
    r: np.ndarray  # (S, m)
    states: np.ndarray | None = None  # (S, d) codes; default 0..S-1

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        r = np.asarray(self.r, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or r.shape != P.shape[:2]:
            raise InputError("P must be (S, m, S) and r (S, m)")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > 1e-12):
            raise InputError("each P[s, a] must be a probability vector")
        states = (np.arange(P.shape[0], dtype=float)[:, None] if self.states is None
                  else np.asarray(self.states, dtype=float).reshape(P.shape[0], -1))
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "states", states)

    @property
    def S(self) -> int:
        return self.P.shape[0]

    @property
    def m(self) -> int:
        return self.P.shape[1]

    @classmethod
    def random(cls, S: int, m: int, rng: np.random.Generator, sparsity: float = 0.0
               ) -> "TabularMDP":
        P = rng.random((S, m, S)) + 1e-3
        if sparsity > 0:
            P *= rng.random((S, m, S)) > sparsity
            P[..., 0] += 1e-3
        P /= P.sum(axis=2, keepdims=True)
        return cls(P=P, r=rng.normal(size=(S, m)))

    def policy_matrix(self, pi) -> np.ndarray:
        if isinstance(pi, Policy):
            return pi.probs(self.states)
        pm = np.asarray(pi, dtype=float)
        if pm.shape != (self.S, self.m):
            raise InputError("policy matrix must be (S, m)")
        return pm

    def state_distribution(self, pi) -> np.ndarray:
        """Stationary distribution of the state chain under ``pi``."""
        pm = self.policy_matrix(pi)
        Ps = np.einsum("sa,sat->st", pm, self.P)
        vals, vecs = np.linalg.eig(Ps.T)
        v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
        return np.abs(v) / np.abs(v).sum()


def _bellman_matrix(mdp: TabularMDP, pm: np.ndarray, gamma: float) -> np.ndarray:
    S, m = mdp.S, mdp.m
    PPi = (mdp.P.reshape(S * m, S)[:, :, None] * pm[None, :, :]).reshape(S * m, S * m)
    return np.eye(S * m) - gamma * PPi


def tabular_exact_q(mdp: TabularMDP, pi, gamma: float) -> np.ndarray:
    """Solve ``Q = r + gamma * P (Pi Q)`` exactly; returns ``(S, m)``."""
    if not (0.0 <= gamma < 1.0):
        raise InputError("gamma must lie in [0, 1)")
    pm = mdp.policy_matrix(pi)
    A = _bellman_matrix(mdp, pm, gamma)
    q = np.linalg.solve(A, mdp.r.reshape(-1))
    resid = np.abs(A @ q - mdp.r.reshape(-1)).max()
    assert resid <= 1e-10 * max(1.0, np.abs(q).max()), f"Bellman residual {resid:.3e}"
    return q.reshape(mdp.S, mdp.m)


def tabular_value(mdp: TabularMDP, pi, gamma: float) -> np.ndarray:
    q = tabular_exact_q(mdp, pi, gamma)
    return (mdp.policy_matrix(pi) * q).sum(axis=1)


def value_iteration(mdp: TabularMDP, gamma: float, tol: float = 1e-13,
                    max_iter: int = 100000) -> np.ndarray:
    """Optimal Q-function by plain value iteration (independent of :func:`optimal_q`)."""
    q = np.zeros((mdp.S, mdp.m))
    for _ in range(max_iter):
        q_new = mdp.r + gamma * mdp.P @ q.max(axis=1)
        if np.abs(q_new - q).max() < tol:
            return q_new
        q = q_new
    return q


def optimal_q(mdp: TabularMDP, gamma: float) -> np.ndarray:
    """Optimal Q-function by policy iteration with exact evaluation."""
    acts = np.zeros(mdp.S, dtype=np.int64)
    for _ in range(10 * mdp.S * mdp.m + 10):
        pm = np.zeros((mdp.S, mdp.m))
        pm[np.arange(mdp.S), acts] = 1.0
        q = tabular_exact_q(mdp, pm, gamma)
        cur = q[np.arange(mdp.S), acts]
        best = q.max(axis=1)
        improve = best > cur + 1e-12 * np.maximum(1.0, np.abs(best))
        if not improve.any():
            return q
        acts = np.where(improve, np.argmax(q, axis=1), acts)
    return q


# ---------------------------------------------------------------------------
# Data generation and Monte Carlo truth
# ---------------------------------------------------------------------------

def rollout(env, policy: Policy, X0, T: int, rng: np.random.Generator):
    """Run ``T`` steps from states ``X0``; returns ``(states (n, T+1, d), actions, rewards)``."""
    X = np.asarray(X0, dtype=float)
    n = X.shape[0]
    states = np.empty((n, T + 1, X.shape[1]))
    actions = np.empty((n, T), dtype=np.int64)
    rewards = np.empty((n, T))
    states[:, 0] = X
    for t in range(T):
        A = policy.sample(X, rng)
        X, Y, _ = env.step(X, A, rng)
        actions[:, t] = A
        rewards[:, t] = Y
        states[:, t + 1] = X
    return states, actions, rewards


def simulate_dataset(env, behavior: Policy | None, n: int, T: int, seed: int
                     ) -> TrajectoryDataset:
    """``n`` trajectories of length ``T`` generated under ``behavior``.

    ``behavior=None`` uses the environment's built-in behaviour policy.
    Episodic resets (Cliff Walking) stay inside a trajectory as ordinary
    transitions back to the start cell.
    """
    if n < 1 or T < 1:
        raise InputError("n and T must be >= 1")
    rng = np.random.default_rng(seed)
    behavior = env.behavior_policy() if behavior is None else behavior
    X0 = env.initial_states(n, rng)
    states, actions, rewards = rollout(env, behavior, X0, T, rng)
    return TrajectoryDataset.from_paths(states, actions, rewards, m=env.m)


def mc_true_value(env, pi: Policy, G: ReferenceDistribution, gamma: float,
                  N_reps: int = 10000, horizon: int = 500, seed: int = 0,
                  init_seed: int | None = None) -> tuple[float, float]:
    """Monte Carlo value of ``pi`` from initial states drawn from ``G``.

    Continuing environments sum ``gamma**t * Y_t`` over ``horizon`` steps;
    episodic ones stop each rollout at its first reset.  Returns the mean
    discounted return and its standard error.  Sampler distributions provide
    their own points (see :meth:`ReferenceDistribution.initial_states`), so
    ``N_reps == G.draws`` reuses the value estimator's integration points.
    """
    if not (0.0 <= gamma < 1.0):
        raise InputError("gamma must lie in [0, 1)")
    if not getattr(env, "episodic", False) and gamma ** horizon > 1e-8 * (1.0 - gamma):
        warnings.warn(f"horizon {horizon} leaves truncation weight {gamma ** horizon:.2e}",
                      RuntimeWarning, stacklevel=2)
    rng = np.random.default_rng(seed)
    X = G.initial_states(N_reps, seed=init_seed)
    returns = np.zeros(N_reps)
    alive = np.ones(N_reps, dtype=bool)
    disc = 1.0
    for _ in range(horizon):
        A = pi.sample(X, rng)
        X, Y, reset = env.step(X, A, rng)
        returns += disc * Y * alive
        disc *= gamma
        if getattr(env, "episodic", False):
            alive &= ~reset
            if not alive.any():
                break
    se = float(returns.std(ddof=1) / np.sqrt(N_reps)) if N_reps > 1 else 0.0
    return float(returns.mean()), se


def igc_reward(glucose):
    """Index of Glycemic Control reward for a glucose reading (mg/dL)."""
    g = np.asarray(glucose, dtype=float)
    if not np.all(np.isfinite(g)):
        raise InputError("glucose must be finite")
    low = -((80.0 - g) ** 2) / 30.0
    high = -(np.maximum(g - 140.0, 0.0) ** 1.35) / 30.0
    out = np.where(g < 80.0, low, np.where(g < 140.0, 0.0, high))
    return float(out) if out.ndim == 0 else out
