"""Value difference ``V(pi; x) - V(b; x)`` between a target policy and the
unknown behaviour policy, pointwise and with sequential evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .basis import BasisSpec, FeatureMap, u_from_phi, xi_from_phi
from .core import EvalConfig, Policy, TrajectoryDataset
from .errors import InputError, PartitionError
from .save import BlockEstimate, BlockPartition, SaveResult, run_blocks
from .sieve import Design, Factorization, SieveFit, _fit_from_design, build_design, make_interval

PROB_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class BehaviorFit:
    """Linear-probability sieve fit ``b_hat(a|x) = Phi(x)^T alpha_a``."""

    alpha_coefs: np.ndarray   # (m, L)
    fm: FeatureMap
    factor: Factorization = field(repr=False)
    n_obs: float = 0.0

    @property
    def m(self) -> int:
        return self.alpha_coefs.shape[0]

    def raw_probs(self, X) -> np.ndarray:
        return self.fm.eval(X) @ self.alpha_coefs.T

    def probs(self, X) -> tuple[np.ndarray, int]:
        """Probabilities clamped into ``[PROB_FLOOR, 1]`` and the clamp count."""
        raw = self.raw_probs(X)
        clamped = int(np.sum((raw < PROB_FLOOR) | (raw > 1.0)))
        return np.clip(raw, PROB_FLOOR, 1.0), clamped


def fit_behavior_policy(ds: TrajectoryDataset, fm: FeatureMap, ridge_lambda: float = 0.0
                        ) -> BehaviorFit:
    """Regress the action indicators on ``Phi`` (one regression per action)."""
    if ds.N == 0:
        raise InputError("empty dataset")
    phi = fm.eval(ds.states)
    w = ds.weight_array()
    W = w.sum()
    pw = phi * w[:, None]
    psi = pw.T @ phi / W
    if ridge_lambda > 0:
        psi = psi + ridge_lambda * np.eye(fm.L)
    fac = Factorization(psi, context="behaviour policy regression")
    onehot = np.zeros((ds.N, ds.m))
    onehot[np.arange(ds.N), ds.actions] = 1.0
    alpha = fac.solve(pw.T @ onehot / W).T
    return BehaviorFit(alpha, fm, fac, float(W))


def _usable(ds: TrajectoryDataset) -> TrajectoryDataset:
    keep = ds.has_next_action
    if not keep.any():
        raise InputError("no record has a next action; the behaviour Q-function needs A'")
    return ds if keep.all() else ds.subset(keep)


def fit_q_behavior(ds: TrajectoryDataset, fm: FeatureMap, gamma: float,
                   ridge_lambda: float = 0.0) -> SieveFit:
    """Sieve fit of ``Q(b; ., .)`` using the observed next action ``A'``.

    Only records whose successor action is observed enter the fit.
    """
    if not (0.0 <= gamma < 1.0):
        raise InputError("gamma must lie in [0, 1)")
    use = _usable(ds)
    phi = fm.eval(use.states)
    phi_next = fm.eval(use.next_states)
    des = Design(xi_from_phi(phi, use.actions, use.m),
                 xi_from_phi(phi_next, use.next_actions, use.m),
                 np.asarray(use.rewards, dtype=float), use.weight_array())
    fit = _fit_from_design(des, fm, gamma, ridge_lambda, use.m, None,
                           context="behaviour Q-function")
    fit.meta["records_used"] = int(use.N)
    fit.meta["records_dropped"] = int(ds.N - use.N)
    return fit


@dataclass(frozen=True)
class VDFits:
    fit_pi: SieveFit
    fit_b: SieveFit
    bfit: BehaviorFit
    data: TrajectoryDataset


def fit_value_difference(ds: TrajectoryDataset, fm: FeatureMap, pi: Policy, cfg: EvalConfig
                         ) -> VDFits:
    """All three fits on the same records (those with an observed next action)."""
    use = _usable(ds)
    des = build_design(use, fm, pi)
    fit_pi = _fit_from_design(des, fm, cfg.gamma, cfg.ridge_lambda, use.m, pi,
                              context="target Q-function")
    fit_b = fit_q_behavior(use, fm, cfg.gamma, cfg.ridge_lambda)
    bfit = fit_behavior_policy(use, fm, cfg.ridge_lambda)
    return VDFits(fit_pi, fit_b, bfit, use)


def vd_point(fit_pi: SieveFit, fit_b: SieveFit, bfit: BehaviorFit, x, alpha: float = 0.05,
             data: TrajectoryDataset | None = None):
    """Estimate and CI for ``V(pi; x) - V(b; x)``.

    The standard error comes from the per-record influence terms: the
    target-fit martingale term, the behaviour-fit term, and the term for
    estimating ``b`` itself.  ``data`` (the records behind the fits) is only
    needed for the last one.
    """
    if fit_pi.design is None or fit_b.design is None:
        raise InputError("fits must carry their design")
    N = fit_pi.design.xi.shape[0]
    if fit_b.design.xi.shape[0] != N:
        raise InputError("target and behaviour fits must use the same records")
    pi = fit_pi.policy
    fm = fit_pi.fm
    m = fit_pi.m
    x = np.atleast_1d(np.asarray(x, dtype=float))[None, :]
    phi_x = fm.eval(x)
    b_x, clamp_x = bfit.probs(x)
    u_pi = u_from_phi(phi_x, pi.probs(x))[0]
    u_b = u_from_phi(phi_x, b_x)[0]
    vd = float(u_pi @ fit_pi.beta - u_b @ fit_b.beta)

    w = fit_pi.design.w
    term1 = fit_pi.design.xi @ fit_pi.factor.solve_transposed(u_pi) * fit_pi.resid
    term2 = fit_b.design.xi @ fit_b.factor.solve_transposed(u_b) * fit_b.resid
    psi = term1 - term2
    clamp_data = 0
    if data is not None:
        if data.N != N:
            raise InputError("data does not match the fitted records")
        q_b_x = (phi_x @ fit_b.beta.reshape(m, fm.L).T)[0]          # Q_hat(b; x, a)
        phi_d = fm.eval(data.states)
        b_d, clamp_data = bfit.probs(data.states)
        onehot = np.zeros((N, m))
        onehot[np.arange(N), data.actions] = 1.0
        lev = phi_d @ bfit.factor.solve_transposed(phi_x[0])       # Phi(X)^T Psi^-1 Phi(x)
        psi = psi - lev * ((onehot - b_d) @ q_b_x)
    var = float(np.sum(w * psi ** 2) / w.sum())
    meta = {"clamped_at_x": clamp_x, "clamped_in_data": clamp_data}
    return make_interval(vd, math.sqrt(max(var, 0.0)), float(w.sum()), alpha, meta)


def default_delta(ds: TrajectoryDataset) -> float:
    """``0.5 * N^(-1/6) * sd(Y)``."""
    sd = float(np.std(ds.rewards, ddof=1)) if ds.N > 1 else 1.0
    return 0.5 * ds.N ** (-1.0 / 6.0) * (sd if sd > 0 else 1.0)


def save_vd(ds: TrajectoryDataset, partition: BlockPartition,
            learner: Callable[[TrajectoryDataset], Policy], x, delta: float | None,
            cfg: EvalConfig, basis: BasisSpec | FeatureMap | None = None) -> SaveResult:
    """Sequential value-difference CI with weights ``max(sigma_k, delta)``."""
    ds.common_length()
    if partition.K < 2:
        raise PartitionError("at least two blocks are needed")
    delta = default_delta(ds) if delta is None else float(delta)
    if delta <= 0:
        raise InputError("delta must be > 0")
    basis = BasisSpec(eta=cfg.eta, degree=cfg.degree, L_override=cfg.L_override) \
        if basis is None else basis
    clamps = {"x": 0, "data": 0}

    def evaluate(view, pi, ctx):
        fm = basis.build(view) if isinstance(basis, BasisSpec) else basis
        fits = fit_value_difference(view, fm, pi, cfg)
        iv = vd_point(fits.fit_pi, fits.fit_b, fits.bfit, x, cfg.alpha, data=fits.data)
        clamps["x"] += iv.meta["clamped_at_x"]
        clamps["data"] += iv.meta["clamped_in_data"]
        return iv, fm.L

    steps = run_blocks(ds, partition, learner, evaluate)
    per_block = [BlockEstimate(b, pi.tag, iv, L, max(iv.std_err, delta))
                 for b, pi, iv, L in steps]
    inv = np.array([1.0 / b.weight_sigma for b in per_block])
    est = np.array([b.interval.estimate for b in per_block])
    v_t = float((inv * est).sum() / inv.sum())
    s_t = float(inv.size / inv.sum())
    K = partition.K
    agg = make_interval(v_t, s_t, ds.N * (K - 1) / K, cfg.alpha,
                        {"K": K, "delta": delta, "x": np.atleast_1d(x).tolist()})
    meta = {"partition": partition.to_dict(), "delta": delta, "clamp_counts": clamps}
    return SaveResult(per_block, agg, K, meta)
