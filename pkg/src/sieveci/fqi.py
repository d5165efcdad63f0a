"""Policy learning: double fitted Q-iteration with linear sieve models,
greedy extraction (smallest maximiser on ties) and epsilon-greedy wrapping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .basis import BasisSpec, FeatureMap
from .core import Policy, QTable, TrajectoryDataset
from .errors import InputError, SingularSystemError


@dataclass(frozen=True)
class FQIConfig:
    max_iter: int = 200
    tol: float = 1e-6
    ridge_lambda: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        if self.max_iter < 1:
            raise InputError("max_iter must be >= 1")
        if self.tol <= 0:
            raise InputError("tol must be > 0")
        if self.ridge_lambda < 0:
            raise InputError("ridge_lambda must be >= 0")


@dataclass(frozen=True, eq=False)
class QParams:
    theta: np.ndarray  # (m, L), row a holds theta_a
    fm: FeatureMap
    converged: bool = True
    n_iter: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        th = np.array(self.theta, dtype=float)
        if th.ndim != 2 or th.shape[1] != self.fm.L:
            raise InputError("theta must be (m, L) with L matching the feature map")
        if not np.all(np.isfinite(th)):
            raise InputError("theta has non-finite entries")
        th.setflags(write=False)
        object.__setattr__(self, "theta", th)

    @property
    def m(self) -> int:
        return self.theta.shape[0]

    def q_values(self, X) -> np.ndarray:
        return self.fm.eval(X) @ self.theta.T

    def to_dict(self) -> dict:
        return {"theta": self.theta.tolist(), "converged": self.converged,
                "n_iter": self.n_iter, "feature_map": self.fm.to_dict()}


def _per_action_solvers(phi, actions, w, m, ridge):
    W = w.sum()
    solvers = []
    for a in range(m):
        rows = actions == a
        pa = phi[rows] * w[rows, None]
        gram = pa.T @ phi[rows] / W + ridge * np.eye(phi.shape[1])
        try:
            cf = sla.cho_factor(gram, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(f"Gram matrix for action {a} is singular", 0.0,
                                      "double_fqi") from exc
        solvers.append((rows, pa.T / W, cf))
    return solvers


def _regress(solvers, targets, L):
    theta = np.empty((len(solvers), L))
    for a, (rows, proj, cf) in enumerate(solvers):
        theta[a] = sla.cho_solve(cf, proj @ targets[rows], check_finite=False)
    return theta


def double_fqi(ds: TrajectoryDataset, fm: FeatureMap, gamma: float,
               cfg: FQIConfig = FQIConfig()) -> QParams:
    """Double fitted Q-iteration.

    Two parameter sets start at zero; each sweep regresses
    ``Y + gamma * Q(X', argmax Q(X', .; own); other)`` on the per-action
    features for both sets at once.  Stops when the sup-norm change of both
    is below ``cfg.tol`` or after ``cfg.max_iter`` sweeps, and returns the
    average of the two sets (``converged=False`` in the latter case).
    """
    if ds.N == 0:
        raise InputError("empty dataset")
    if not (0.0 <= gamma < 1.0):
        raise InputError("gamma must lie in [0, 1)")
    m, L = ds.m, fm.L
    phi = fm.eval(ds.states)
    phi_next = fm.eval(ds.next_states)
    y = np.asarray(ds.rewards, dtype=float)
    solvers = _per_action_solvers(phi, ds.actions, ds.weight_array(), m, cfg.ridge_lambda)
    rows = np.arange(ds.N)
    theta_a = np.zeros((m, L))
    theta_b = np.zeros((m, L))
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        qa = phi_next @ theta_a.T
        qb = phi_next @ theta_b.T
        target_a = y + gamma * qb[rows, np.argmax(qa, axis=1)]
        target_b = y + gamma * qa[rows, np.argmax(qb, axis=1)]
        new_a = _regress(solvers, target_a, L)
        new_b = _regress(solvers, target_b, L)
        delta = max(np.abs(new_a - theta_a).max(), np.abs(new_b - theta_b).max())
        theta_a, theta_b = new_a, new_b
        if delta < cfg.tol:
            converged = True
            break
    return QParams(0.5 * (theta_a + theta_b), fm, converged=converged, n_iter=it,
                   meta={"gamma": gamma, "L": L})


def greedy_policy(q, states=None, tag: str = "greedy") -> Policy:
    """Deterministic policy choosing the smallest maximiser of ``q``.

    ``q`` is a :class:`QParams`, a :class:`QTable`, or an ``(S, m)`` array of
    Q-values paired with ``states``.
    """
    if isinstance(q, np.ndarray) or isinstance(q, list):
        if states is None:
            raise InputError("an explicit Q-table needs its state list")
        q = QTable(states, q)
    if isinstance(q, QParams):
        return Policy("greedy_from_q", q.m, q, q.fm.d, tag=tag)
    if isinstance(q, QTable):
        return Policy("greedy_from_q", q.m, q, q.index.d, tag=tag)
    if hasattr(q, "q_values"):
        return Policy("greedy_from_q", int(getattr(q, "m")), q, None, tag=tag)
    raise InputError("unsupported Q representation")


def sargmax(values) -> int:
    """Smallest index among exact maximisers."""
    return int(np.argmax(np.asarray(values, dtype=float)))


def epsilon_greedy(base: Policy, epsilon: float, m: int | None = None) -> Policy:
    """Mix ``base`` with the uniform policy: ``(1 - eps) * base + eps / m``."""
    m = base.m if m is None else m
    if m != base.m:
        raise InputError("m does not match the base policy")
    if not (0.0 <= epsilon <= 1.0):
        raise InputError("epsilon must lie in [0, 1]")
    return Policy("epsilon_greedy", m, (base, float(epsilon)), base.d,
                  tag=f"eps{epsilon:g}-{base.tag}")


class FQILearner:
    """``learner(ds) -> Policy`` running double FQI on whatever data it is given.

    The basis is rebuilt from the training data each call, so its size
    follows the number of training records.
    """

    def __init__(self, basis: BasisSpec, gamma: float, cfg: FQIConfig = FQIConfig()):
        self.basis = basis
        self.gamma = gamma
        self.cfg = cfg

    def fit(self, ds: TrajectoryDataset) -> QParams:
        return double_fqi(ds, self.basis.build(ds), self.gamma, self.cfg)

    def __call__(self, ds: TrajectoryDataset) -> Policy:
        return greedy_policy(self.fit(ds), tag="fqi-greedy")
