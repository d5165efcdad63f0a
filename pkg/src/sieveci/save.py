"""Sequential value evaluation over ordered data blocks.

Trajectories are split into ``K_n`` groups and time points into ``K_T``
groups; block ``(kn, kt)`` holds their intersection.  Blocks are visited
with ``kn`` varying fastest, so every later block lies strictly later in
time or strictly later in trajectory order than all earlier ones.  The
policy evaluated on block ``k+1`` is learned from blocks ``1..k`` only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .basis import BasisSpec, FeatureMap
from .core import EvalConfig, Policy, ReferenceDistribution, TrajectoryDataset
from .errors import InputError, PartitionError, SingularSystemError
from .sieve import ValueInterval, fit_q, make_interval, value_integrated


def _splits(total: int, size: int) -> list[tuple[int, int]]:
    """``[lo, hi)`` ranges of ``size`` with the remainder added to the last one."""
    k = total // size
    edges = [j * size for j in range(k)] + [total]
    return [(edges[j], edges[j + 1]) for j in range(k)]


@dataclass(frozen=True)
class BlockPartition:
    """Ordered rectangular blocks over (trajectory rank, time rank) cells.

    ``rects[k] = (i_lo, i_hi, t_lo, t_hi)`` with half-open ranges; ranks refer
    to the sorted trajectory ids and the sorted time indices of a dataset.
    """

    K_n: int
    K_T: int
    n_min: int
    T_min: int
    n: int
    T: int
    rects: tuple

    @property
    def K(self) -> int:
        return self.K_n * self.K_T

    def cells(self, k: int) -> np.ndarray:
        """``(i, t)`` rank pairs of block ``k`` (0-based), shape ``(|I_k|, 2)``."""
        i_lo, i_hi, t_lo, t_hi = self.rects[k]
        ii, tt = np.meshgrid(np.arange(i_lo, i_hi), np.arange(t_lo, t_hi), indexing="ij")
        return np.column_stack([ii.ravel(), tt.ravel()])

    @property
    def blocks(self) -> list[np.ndarray]:
        return [self.cells(k) for k in range(self.K)]

    def labels(self, ds: TrajectoryDataset) -> np.ndarray:
        """Block number of every record of ``ds`` (which must be n x T)."""
        ids = ds.traj_ids
        times = np.unique(ds.t)
        if ids.size != self.n or times.size != self.T or ds.N != self.n * self.T:
            raise PartitionError(
                f"partition is for {self.n} x {self.T} records, data has "
                f"{ids.size} trajectories, {times.size} time points and {ds.N} records"
            )
        i_rank = np.searchsorted(ids, ds.traj_id)
        t_rank = np.searchsorted(times, ds.t)
        lab = np.full(ds.N, -1, dtype=np.int64)
        for k, (i_lo, i_hi, t_lo, t_hi) in enumerate(self.rects):
            sel = (i_rank >= i_lo) & (i_rank < i_hi) & (t_rank >= t_lo) & (t_rank < t_hi)
            lab[sel] = k
        return lab

    def record_indices(self, ds: TrajectoryDataset) -> list[np.ndarray]:
        lab = self.labels(ds)
        return [np.flatnonzero(lab == k) for k in range(self.K)]

    def to_dict(self) -> dict:
        return {"K_n": self.K_n, "K_T": self.K_T, "n_min": self.n_min, "T_min": self.T_min,
                "n": self.n, "T": self.T, "rects": [list(r) for r in self.rects]}


def check_ordering(partition: BlockPartition, exhaustive: bool = False) -> list[tuple[int, int]]:
    """Return ``(earlier, later)`` block pairs that break the ordering rule.

    A cell ``(i2, t2)`` of a later block must satisfy ``t2 > t1`` or
    ``i2 > i1`` against every cell ``(i1, t1)`` of every earlier block.  The
    default check uses block rectangles; ``exhaustive=True`` compares all
    cell pairs directly.
    """
    bad = []
    for k2 in range(1, partition.K):
        for k1 in range(k2):
            if exhaustive:
                c1, c2 = partition.cells(k1), partition.cells(k2)
                ok = (c2[None, :, 1] > c1[:, None, 1]) | (c2[None, :, 0] > c1[:, None, 0])
                broken = not ok.all()
            else:
                i1_lo, i1_hi, t1_lo, t1_hi = partition.rects[k1]
                i2_lo, i2_hi, t2_lo, t2_hi = partition.rects[k2]
                # some pair fails iff a cell of k1 is >= a cell of k2 in both ranks
                broken = (i1_hi - 1 >= i2_lo) and (t1_hi - 1 >= t2_lo)
            if broken:
                bad.append((k1, k2))
    return bad


def partition_from_counts(n: int, T: int, K_n: int, K_T: int) -> BlockPartition:
    """Partition with ``K_n`` trajectory groups and ``K_T`` time groups."""
    if K_n < 1 or K_T < 1:
        raise PartitionError("K_n and K_T must be >= 1")
    if K_n > n or K_T > T:
        raise PartitionError(f"cannot split {n} x {T} into {K_n} x {K_T} blocks")
    return make_partition(n, T, n // K_n, T // K_T)


def make_partition(n: int, T: int, n_min: int, T_min: int) -> BlockPartition:
    if not (1 <= n_min <= n) or not (1 <= T_min <= T):
        raise PartitionError("need 1 <= n_min <= n and 1 <= T_min <= T")
    i_ranges = _splits(n, n_min)
    t_ranges = _splits(T, T_min)
    if len(i_ranges) * len(t_ranges) < 2:
        raise PartitionError("at least two blocks are needed")
    rects = tuple((i_lo, i_hi, t_lo, t_hi)
                  for (t_lo, t_hi) in t_ranges for (i_lo, i_hi) in i_ranges)
    part = BlockPartition(len(i_ranges), len(t_ranges), n_min, T_min, n, T, rects)
    bad = check_ordering(part)
    assert not bad, f"block ordering violated for pairs {bad[:3]}"
    return part


def _view(ds: TrajectoryDataset, idx) -> TrajectoryDataset:
    """Records ``idx`` with ``next_action`` cleared where the successor is outside."""
    sub = ds.subset(idx)
    na = np.full(sub.N, -1, dtype=np.int64)
    same = (sub.traj_id[1:] == sub.traj_id[:-1]) & (sub.t[1:] == sub.t[:-1] + 1)
    na[:-1][same] = sub.next_actions[:-1][same]
    return TrajectoryDataset(sub.traj_id, sub.t, sub.states, sub.actions, sub.rewards,
                             sub.next_states, na, sub.m, sub.weights)


def block_fit_and_eval(ds: TrajectoryDataset, block, pi: Policy, basis, cfg: EvalConfig,
                       G: ReferenceDistribution, context: str | None = None) -> ValueInterval:
    """Fit on the records ``block`` only and return the interval for ``V(pi; G)``.

    ``basis`` is a :class:`BasisSpec` (sized and placed from the block's own
    records) or a ready :class:`FeatureMap`.
    """
    block = np.asarray(block)
    if block.size == 0:
        raise InputError("empty block")
    sub = _view(ds, block)
    fm = basis.build(sub) if isinstance(basis, BasisSpec) else basis
    fit = fit_q(sub, fm, pi, cfg, context=context)
    return value_integrated(fit, G, pi, cfg.alpha)


def aggregate_inverse_sigma(values, sigmas) -> tuple[float, float]:
    """Inverse-sigma weighted mean and the harmonic mean of the sigmas."""
    v = np.asarray(values, dtype=float)
    s = np.asarray(sigmas, dtype=float)
    if v.size == 0 or v.shape != s.shape:
        raise InputError("values and sigmas must be equal-length and nonempty")
    if np.any(~np.isfinite(s)) or np.any(s <= 0):
        raise InputError("every sigma must be a positive finite number")
    inv = 1.0 / s
    return float((v * inv).sum() / inv.sum()), float(v.size / inv.sum())


@dataclass(frozen=True)
class BlockEstimate:
    block: int           # 1-based id of the evaluated block
    policy_tag: str
    interval: ValueInterval
    L: int | None = None
    weight_sigma: float | None = None

    def to_dict(self) -> dict:
        out = {"block": self.block, "policy": self.policy_tag, "L": self.L}
        out.update(self.interval.to_dict())
        if self.weight_sigma is not None:
            out["weight_sigma"] = self.weight_sigma
        return out


@dataclass(frozen=True)
class SaveResult:
    per_block: list
    aggregate: ValueInterval
    K: int
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"K": self.K, "aggregate": self.aggregate.to_dict(),
                "per_block": [b.to_dict() for b in self.per_block], "meta": self.meta}


def permute_trajectories(ds: TrajectoryDataset, seed: int) -> TrajectoryDataset:
    """Relabel trajectories by a seeded random permutation of their order."""
    ids = ds.traj_ids
    perm = np.random.default_rng(seed).permutation(ids.size)
    return ds.relabel_trajectories({int(i): int(ids[p]) for i, p in zip(ids, perm)})


def run_blocks(ds: TrajectoryDataset, partition: BlockPartition,
               learner: Callable[[TrajectoryDataset], Policy],
               evaluate: Callable[[TrajectoryDataset, Policy, str], tuple]) -> list:
    """Fit on each prefix and evaluate the next block.

    ``evaluate(block_view, policy, context)`` returns ``(interval, L)``.  The
    learner only ever receives records of the prefix.
    """
    idx = partition.record_indices(ds)
    out = []
    for k in range(1, partition.K):
        prefix = np.concatenate(idx[:k])
        ctx = f"block {k + 1} of {partition.K}"
        try:
            pi = learner(_view(ds, prefix))
            interval, L = evaluate(_view(ds, idx[k]), pi, ctx)
        except SingularSystemError as exc:
            if exc.context is None or ctx not in str(exc.context):
                exc.context = ctx if exc.context is None else f"{ctx}: {exc.context}"
            raise
        out.append((k + 1, pi, interval, L))
    return out


def save_evaluate(ds: TrajectoryDataset, partition: BlockPartition,
                  learner: Callable[[TrajectoryDataset], Policy], G: ReferenceDistribution,
                  cfg: EvalConfig, basis: BasisSpec | FeatureMap | None = None,
                  permute_seed: int | None = None) -> SaveResult:
    """Value of the sequentially learned policies with an aggregate CI.

    The half-width is ``z * sigma_tilde / sqrt(N (K - 1) / K)`` with ``N``
    the total record count (``n T`` for rectangular data).
    """
    ds.common_length()
    if partition.K < 2:
        raise PartitionError("at least two blocks are needed")
    if permute_seed is not None:
        ds = permute_trajectories(ds, permute_seed)
    basis = BasisSpec(eta=cfg.eta, degree=cfg.degree, L_override=cfg.L_override) \
        if basis is None else basis

    def evaluate(view, pi, ctx):
        fm = basis.build(view) if isinstance(basis, BasisSpec) else basis
        fit = fit_q(view, fm, pi, cfg, context=ctx)
        return value_integrated(fit, G, pi, cfg.alpha), fm.L

    steps = run_blocks(ds, partition, learner, evaluate)
    per_block = [BlockEstimate(b, pi.tag, iv, L) for b, pi, iv, L in steps]
    v = [b.interval.estimate for b in per_block]
    s = [b.interval.std_err for b in per_block]
    try:
        v_agg, s_agg = aggregate_inverse_sigma(v, s)
    except InputError as exc:
        raise InputError(f"cannot aggregate blocks: {exc}") from exc
    K = partition.K
    n_eff = ds.N * (K - 1) / K
    agg = make_interval(v_agg, s_agg, n_eff, cfg.alpha,
                        {"K": K, "K_n": partition.K_n, "K_T": partition.K_T})
    return SaveResult(per_block, agg, K, {"partition": partition.to_dict(),
                                          "permute_seed": permute_seed})

