"""Linear-sieve Q-function estimation for a fixed target policy, with
sandwich standard errors and normal confidence intervals for the value.

The fitted coefficients solve

    (Sigma_hat + lambda I) beta = b_hat,
    Sigma_hat = W^-1 sum w xi (xi - gamma U_pi(X'))^T,   b_hat = W^-1 sum w xi Y,

and the variance of ``u^T beta`` is ``u^T M^-1 Omega_hat M^-T u`` with
``M = Sigma_hat + lambda I`` and ``Omega_hat = W^-1 sum w xi xi^T eps^2``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.linalg as sla
from scipy.stats import norm

from .basis import FeatureMap, u_from_phi, xi_from_phi
from .core import EvalConfig, Policy, ReferenceDistribution, TrajectoryDataset
from .errors import InputError, SingularSystemError

RCOND_THRESHOLD = 1e-12
_CHUNK = 4096


def z_quantile(alpha: float) -> float:
    """Upper ``alpha/2`` quantile of the standard normal."""
    if not (0.0 < alpha < 1.0):
        raise InputError("alpha must lie in (0, 1)")
    return float(norm.ppf(1.0 - alpha / 2.0))


class Factorization:
    """LU factorisation of a square system with a reciprocal-condition check."""

    def __init__(self, M: np.ndarray, context: str | None = None):
        M = np.asarray(M, dtype=float)
        if not np.all(np.isfinite(M)):
            raise SingularSystemError("system matrix has non-finite entries", 0.0, context)
        anorm = np.abs(M).sum(axis=0).max() if M.size else 0.0
        if anorm == 0.0:
            raise SingularSystemError("system matrix is zero", 0.0, context)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu, piv = sla.lu_factor(M, check_finite=False)
        rcond, info = sla.lapack.dgecon(lu, anorm, norm="1")
        self.rcond = float(rcond)
        if not np.isfinite(self.rcond) or self.rcond < RCOND_THRESHOLD:
            raise SingularSystemError(
                f"reciprocal condition number {self.rcond:.3e} below {RCOND_THRESHOLD:g}",
                self.rcond, context,
            )
        self._lu = (lu, piv)

    def solve(self, rhs) -> np.ndarray:
        return sla.lu_solve(self._lu, rhs, check_finite=False)

    def solve_transposed(self, rhs) -> np.ndarray:
        return sla.lu_solve(self._lu, rhs, trans=1, check_finite=False)


@dataclass(frozen=True)
class ValueInterval:
    estimate: float
    std_err: float
    ci_lower: float
    ci_upper: float
    alpha: float
    n_obs: float
    meta: dict = field(default_factory=dict)

    @property
    def half_width(self) -> float:
        return 0.5 * (self.ci_upper - self.ci_lower)

    @property
    def length(self) -> float:
        return self.ci_upper - self.ci_lower

    def covers(self, value: float) -> bool:
        return bool(self.ci_lower <= value <= self.ci_upper)

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate, "std_err": self.std_err,
            "ci_lower": self.ci_lower, "ci_upper": self.ci_upper,
            "alpha": self.alpha, "n_obs": self.n_obs, "meta": self.meta,
        }


def make_interval(estimate: float, std_err: float, n_obs: float, alpha: float,
                  meta: dict | None = None, scale: float | None = None) -> ValueInterval:
    """``estimate +/- z * std_err * scale`` with ``scale = n_obs**-1/2`` by default."""
    if scale is None:
        scale = 1.0 / math.sqrt(n_obs)
    half = z_quantile(alpha) * std_err * scale
    return ValueInterval(float(estimate), float(std_err), float(estimate - half),
                         float(estimate + half), float(alpha), float(n_obs), dict(meta or {}))


@dataclass(frozen=True, eq=False)
class Design:
    """Per-record feature blocks for one (dataset, basis, policy) triple."""

    xi: np.ndarray       # (N, mL)
    u_next: np.ndarray   # (N, mL)
    y: np.ndarray        # (N,)
    w: np.ndarray        # (N,)

    @property
    def total_weight(self) -> float:
        return float(self.w.sum())


def build_design(ds: TrajectoryDataset, fm: FeatureMap, pi: Policy) -> Design:
    if ds.N == 0:
        raise InputError("empty record set")
    if pi.m != ds.m:
        raise InputError(f"policy has {pi.m} actions but data has {ds.m}")
    phi = fm.eval(ds.states)
    phi_next = fm.eval(ds.next_states)
    xi = xi_from_phi(phi, ds.actions, ds.m)
    u_next = u_from_phi(phi_next, pi.probs(ds.next_states))
    return Design(xi, u_next, np.asarray(ds.rewards, dtype=float), ds.weight_array())


def _system_from_design(des: Design, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    W = des.total_weight
    if W <= 0:
        raise InputError("record weights sum to zero")
    xw = des.xi * des.w[:, None]
    sigma = xw.T @ (des.xi - gamma * des.u_next) / W
    b = xw.T @ des.y / W
    return sigma, b


def assemble_system(ds: TrajectoryDataset, fm: FeatureMap, pi: Policy, gamma: float,
                    idx=None) -> tuple[np.ndarray, np.ndarray]:
    """``(Sigma_hat, b_hat)`` over the records of ``ds`` (optionally ``idx`` only)."""
    if not (0.0 <= gamma < 1.0):
        raise InputError("gamma must lie in [0, 1)")
    if idx is not None:
        ds = ds.subset(idx)
    return _system_from_design(build_design(ds, fm, pi), gamma)


@dataclass(frozen=True, eq=False)
class SieveFit:
    beta: np.ndarray
    sigma_mat: np.ndarray
    omega_mat: np.ndarray
    b_vec: np.ndarray
    n_obs: float
    fm: FeatureMap
    gamma: float
    ridge_lambda: float
    m: int
    policy: Policy | None
    resid: np.ndarray
    factor: Any = field(repr=False, default=None)
    design: Design | None = field(repr=False, default=None)
    meta: dict = field(default_factory=dict)

    @property
    def rcond(self) -> float:
        return self.factor.rcond

    def q_values(self, X) -> np.ndarray:
        """``Q_hat(x, a)`` for a batch of states, ``(N, m)``."""
        phi = self.fm.eval(X)
        return phi @ self.beta.reshape(self.m, self.fm.L).T

    def sandwich_variance(self, u: np.ndarray) -> float:
        """``u^T M^-1 Omega M^-T u`` evaluated as a weighted sum over records."""
        v = self.factor.solve_transposed(np.asarray(u, dtype=float))
        des = self.design
        proj = des.xi @ v
        var = float(np.sum(des.w * (proj * self.resid) ** 2) / des.total_weight)
        return max(var, 0.0)


def _fit_from_design(des: Design, fm: FeatureMap, gamma: float, ridge: float, m: int,
                     pi: Policy | None, context: str | None = None) -> SieveFit:
    sigma, b = _system_from_design(des, gamma)
    M = sigma + ridge * np.eye(sigma.shape[0]) if ridge > 0 else sigma
    fac = Factorization(M, context=context)
    beta = fac.solve(b)
    resid = des.y + gamma * (des.u_next @ beta) - des.xi @ beta
    xw = des.xi * (des.w * resid ** 2)[:, None]
    omega = xw.T @ des.xi / des.total_weight
    omega = 0.5 * (omega + omega.T)
    return SieveFit(beta=beta, sigma_mat=sigma, omega_mat=omega, b_vec=b,
                    n_obs=des.total_weight, fm=fm, gamma=gamma, ridge_lambda=ridge, m=m,
                    policy=pi, resid=resid, factor=fac, design=des,
                    meta={"L": fm.L, "gamma": gamma, "ridge_lambda": ridge})


def fit_q(ds: TrajectoryDataset, fm: FeatureMap, pi: Policy, cfg: EvalConfig,
          context: str | None = None) -> SieveFit:
    """Fit ``Q(pi; ., .)`` in the sieve space spanned by ``fm``.

    Raises :class:`SingularSystemError` when ``Sigma_hat + lambda I`` is
    numerically singular; retry with ``cfg.ridge_lambda > 0``.
    """
    fit = _fit_from_design(build_design(ds, fm, pi), fm, cfg.gamma, cfg.ridge_lambda,
                           ds.m, pi, context=context)
    fit.meta["policy"] = pi.tag
    return fit


def residuals(fit: SieveFit, ds: TrajectoryDataset | None = None) -> np.ndarray:
    """Temporal-difference residuals of ``fit`` on ``ds`` (default: its own data)."""
    if ds is None:
        return np.array(fit.resid)
    des = build_design(ds, fit.fm, fit.policy)
    return des.y + fit.gamma * (des.u_next @ fit.beta) - des.xi @ fit.beta


def assemble_omega(fit: SieveFit, ds: TrajectoryDataset | None = None) -> np.ndarray:
    if ds is None:
        return np.array(fit.omega_mat)
    des = build_design(ds, fit.fm, fit.policy)
    eps = des.y + fit.gamma * (des.u_next @ fit.beta) - des.xi @ fit.beta
    xw = des.xi * (des.w * eps ** 2)[:, None]
    return xw.T @ des.xi / des.total_weight


def mean_U(fm: FeatureMap, pi: Policy, points: np.ndarray) -> np.ndarray:
    """Average of ``U_pi(x)`` over equally weighted ``points``."""
    points = np.asarray(points, dtype=float)
    acc = np.zeros(pi.m * fm.L)
    for s in range(0, points.shape[0], _CHUNK):
        chunk = points[s:s + _CHUNK]
        acc += u_from_phi(fm.eval(chunk), pi.probs(chunk)).sum(axis=0)
    return acc / points.shape[0]


def _check_policy(fit: SieveFit, pi: Policy):
    if pi.m != fit.m:
        raise InputError("policy action count does not match the fit")


def interval_from_u(fit: SieveFit, u: np.ndarray, alpha: float, meta: dict | None = None
                    ) -> ValueInterval:
    est = float(u @ fit.beta)
    se = math.sqrt(fit.sandwich_variance(u))
    info = dict(fit.meta)
    info.update(meta or {})
    return make_interval(est, se, fit.n_obs, alpha, info)


def value_point(fit: SieveFit, x, pi: Policy, alpha: float = 0.05) -> ValueInterval:
    """Estimate and CI for ``V(pi; x)``."""
    _check_policy(fit, pi)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = mean_U(fit.fm, pi, x[None, :])
    return interval_from_u(fit, u, alpha, {"reference": {"kind": "dirac", "x0": x.tolist()}})


def value_integrated(fit: SieveFit, G: ReferenceDistribution, pi: Policy, alpha: float = 0.05,
                     g_draws: int | None = None, seed: int | None = None) -> ValueInterval:
    """Estimate and CI for ``V(pi; G) = int V(pi; x) G(dx)``.

    Sampler distributions are integrated by Monte Carlo over ``g_draws``
    points (default: the distribution's own seed and draw count).
    """
    _check_policy(fit, pi)
    pts = G.points(draws=g_draws, seed=seed)
    u = mean_U(fit.fm, pi, pts)
    return interval_from_u(fit, u, alpha, {"reference": G.describe()})
