"""Sieve bases: tensor-product cubic B-splines on normal-CDF transformed
states, and indicator bases for finite state spaces.

Tensor features are ordered dimension-major: the feature for per-coordinate
indices ``(i_0, ..., i_{d-1})`` sits at ``sum_j i_j * prod_{l<j} k_l`` so
coordinate 0 varies fastest.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .core import Policy, StateIndex, TrajectoryDataset
from .errors import DegenerateDataError, InputError, UnknownStateError

_UPPER = np.nextafter(1.0, 0.0)
_LOWER = np.finfo(float).tiny


def transform_state(x) -> np.ndarray:
    """Map each coordinate through the standard normal CDF, into (0, 1)."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InputError("state contains non-finite values")
    return np.clip(ndtr(x), _LOWER, _UPPER)


def choose_L(total_transitions: int, eta: float, d: int, degree: int = 3) -> tuple[int, int]:
    """Per-coordinate basis size ``k`` and ``L = k**d`` under ``floor(N**eta)``.

    ``k`` is the largest integer with ``k**d <= floor(N**eta)`` and
    ``k >= degree + 1``; when none exists the minimal ``k = degree + 1`` is used.
    """
    if total_transitions < 1:
        raise InputError("total_transitions must be >= 1")
    if not (0.0 < eta < 1.0):
        raise InputError("eta must lie in (0, 1)")
    cap = math.floor(float(total_transitions) ** eta)
    k = degree + 1
    if k ** d > cap:
        return k, k ** d
    while (k + 1) ** d <= cap:
        k += 1
    return k, k ** d


def per_dim_from_L(L: int, d: int, degree: int = 3) -> int:
    """Largest ``k >= degree + 1`` with ``k**d <= L`` (used for an explicit L)."""
    k = degree + 1
    while (k + 1) ** d <= L:
        k += 1
    return k


def bspline_basis_1d(u, knots, degree: int) -> np.ndarray:
    """Evaluate all B-splines of a clamped knot vector at points ``u``.

    Vectorised Cox-de Boor recursion; returns ``(len(u), len(knots) - degree - 1)``.
    The right end of the domain belongs to the last non-empty knot span.
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    t = np.asarray(knots, dtype=float)
    uu = u[:, None]
    B = ((t[:-1] <= uu) & (uu < t[1:])).astype(float)
    spans = np.flatnonzero(t[1:] > t[:-1])
    last = spans[-1]
    at_end = u >= t[last + 1]
    if np.any(at_end):
        B[at_end] = 0.0
        B[at_end, last] = 1.0
    nk = t.size
    for p in range(1, degree + 1):
        nb = nk - 1 - p
        t_i = t[:nb]
        t_ip = t[p:p + nb]
        t_i1 = t[1:1 + nb]
        t_ip1 = t[p + 1:p + 1 + nb]
        left_den = t_ip - t_i
        right_den = t_ip1 - t_i1
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(left_den > 0, (uu - t_i) / left_den, 0.0)
            right = np.where(right_den > 0, (t_ip1 - uu) / right_den, 0.0)
        B = left * B[:, :nb] + right * B[:, 1:nb + 1]
    return B


@dataclass(frozen=True)
class KnotSet:
    per_dim: tuple  # one clamped knot vector (np.ndarray) per coordinate
    degree: int = 3

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(int(k.size - self.degree - 1) for k in self.per_dim)

    def interior(self, j: int) -> np.ndarray:
        kv = self.per_dim[j]
        return kv[self.degree + 1:kv.size - self.degree - 1]

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "interior_knots": [self.interior(j).tolist() for j in range(len(self.per_dim))],
            "per_dim_count": list(self.counts),
        }


def clamped_knots(interior, degree: int) -> np.ndarray:
    interior = np.asarray(interior, dtype=float)
    kv = np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])
    kv.setflags(write=False)
    return kv


def _state_matrix(source) -> np.ndarray:
    if isinstance(source, TrajectoryDataset):
        return np.asarray(source.states)
    X = np.asarray(source, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def build_knots(source, per_dim_count: int, degree: int = 3) -> KnotSet:
    """Clamped knots with interior knots at equally spaced sample quantiles.

    ``source`` is a dataset (its ``states`` are used) or an ``(N, d)`` array.
    Coinciding quantiles are collapsed, which lowers that coordinate's basis
    size; a warning reports it.
    """
    if per_dim_count < degree + 1:
        raise InputError("per_dim_count must be >= degree + 1")
    U = transform_state(_state_matrix(source))
    n_int = per_dim_count - degree - 1
    probs = np.arange(1, n_int + 1) / (per_dim_count - degree)
    per_dim = []
    for j in range(U.shape[1]):
        col = U[:, j]
        distinct = np.unique(col).size
        if distinct < max(n_int, 2):
            raise DegenerateDataError(
                f"coordinate {j} has {distinct} distinct value(s); need at least {max(n_int, 2)}"
            )
        q = np.quantile(col, probs) if n_int else np.empty(0)
        q = q[(q > 0.0) & (q < 1.0)]
        uq = np.unique(q)
        if uq.size < n_int:
            warnings.warn(
                f"coordinate {j}: {n_int - uq.size} duplicate quantile knot(s) collapsed; "
                f"basis size reduced to {degree + 1 + uq.size}",
                RuntimeWarning,
                stacklevel=2,
            )
        per_dim.append(clamped_knots(uq, degree))
    return KnotSet(per_dim=tuple(per_dim), degree=degree)


class FeatureMap:
    """Evaluates ``Phi_L(x)``; see module docstring for the tensor ordering."""

    def __init__(self, kind: str, *, knots: KnotSet | None = None,
                 states: StateIndex | None = None):
        if kind == "tensor_bspline":
            if knots is None:
                raise InputError("tensor_bspline needs knots")
            self.counts = knots.counts
            self.L = int(np.prod(self.counts))
            self.d = len(knots.per_dim)
        elif kind == "indicator":
            if states is None:
                raise InputError("indicator basis needs a state list")
            self.counts = (len(states),)
            self.L = len(states)
            self.d = states.d
        else:
            raise InputError(f"unknown feature map kind {kind!r}")
        self.kind = kind
        self.knots = knots
        self.states = states

    @classmethod
    def bspline(cls, knots: KnotSet) -> "FeatureMap":
        return cls("tensor_bspline", knots=knots)

    @classmethod
    def indicator(cls, states) -> "FeatureMap":
        idx = states if isinstance(states, StateIndex) else StateIndex(states)
        return cls("indicator", states=idx)

    def __call__(self, X) -> np.ndarray:
        return self.eval(X)

    def eval(self, X) -> np.ndarray:
        """Features for a batch ``(N, d)``; returns ``(N, L)``."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.d:
            raise InputError(f"state dimension {X.shape[1]} != feature map dimension {self.d}")
        if self.kind == "indicator":
            idx = self.states.index(X)
            out = np.zeros((X.shape[0], self.L))
            out[np.arange(X.shape[0]), idx] = 1.0
            return out
        U = transform_state(X)
        out = None
        for j, kv in enumerate(self.knots.per_dim):
            Bj = bspline_basis_1d(U[:, j], kv, self.knots.degree)
            out = Bj if out is None else (Bj[:, :, None] * out[:, None, :]).reshape(X.shape[0], -1)
        return out

    def to_dict(self) -> dict:
        if self.kind == "indicator":
            return {"kind": "indicator", "L": self.L, "states": self.states.states.tolist()}
        return {"kind": "tensor_bspline", "L": self.L, "knots": self.knots.to_dict()}


def eval_features(fm: FeatureMap, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InputError("eval_features expects one state vector")
    return fm.eval(x[None, :])[0]


def xi_from_phi(Phi: np.ndarray, actions, m: int) -> np.ndarray:
    """Action-blocked features: ``Phi`` in block ``a``, zeros elsewhere."""
    actions = np.asarray(actions, dtype=np.int64)
    if np.any((actions < 0) | (actions >= m)):
        raise InputError("action out of range")
    N, L = Phi.shape
    out = np.zeros((N, m, L))
    out[np.arange(N), actions] = Phi
    return out.reshape(N, m * L)


def u_from_phi(Phi: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Policy-averaged features: block ``a`` is ``Phi * pi(a|x)``."""
    N, L = Phi.shape
    return (probs[:, :, None] * Phi[:, None, :]).reshape(N, probs.shape[1] * L)


def eval_xi(fm: FeatureMap, x, a: int, m: int) -> np.ndarray:
    if not (0 <= int(a) < m):
        raise InputError(f"action {a} not in [0, {m})")
    return xi_from_phi(fm.eval(np.atleast_1d(np.asarray(x, float))[None, :]), [a], m)[0]


def eval_U(fm: FeatureMap, x, pi: Policy) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return u_from_phi(fm.eval(x[None, :]), pi.probs(x[None, :]))[0]


@dataclass(frozen=True)
class BasisSpec:
    """Recipe for building a feature map from whatever data a fit sees.

    ``bspline`` sizes the basis with :func:`choose_L` on the record count
    (or ``L_override``) and places knots at the data's quantiles;
    ``indicator`` uses the fixed state list.
    """

    kind: str = "bspline"
    eta: float = 3.0 / 7.0
    degree: int = 3
    L_override: int | None = None
    states: tuple | None = field(default=None)

    def build(self, ds: TrajectoryDataset) -> FeatureMap:
        if self.kind == "indicator":
            if self.states is None:
                raise InputError("indicator BasisSpec needs states")
            return FeatureMap.indicator(np.asarray(self.states, dtype=float))
        if self.kind != "bspline":
            raise InputError(f"unknown basis kind {self.kind!r}")
        if self.L_override is not None:
            k = per_dim_from_L(int(self.L_override), ds.d, self.degree)
        else:
            k, _ = choose_L(ds.N, self.eta, ds.d, self.degree)
        return FeatureMap.bspline(build_knots(ds, k, self.degree))

    def describe(self) -> dict:
        return {"kind": self.kind, "eta": self.eta, "degree": self.degree,
                "L_override": self.L_override}
