"""Configuration, replication loop, truth caching and reports.

A run is described by a plain dict with ``env``, ``policy``, ``data``,
``estimator``, ``experiment`` and (for online runs) ``onpolicy`` sections;
:func:`resolve_config` fills in defaults so every report echoes the exact
settings that produced it.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .basis import BasisSpec
from .core import (EvalConfig, Policy, ReferenceDistribution, TrajectoryDataset,
                   uniform_policy)
from .envs import CliffEnvSpec, LinearEnvSpec, mc_true_value, scenario_target_policy, \
    simulate_dataset
from .errors import InputError
from .fqi import FQIConfig, FQILearner
from .onpolicy import OnPolicySchedule, onpolicy_run
from .save import partition_from_counts, save_evaluate
from .sieve import fit_q, value_integrated
from .value_diff import save_vd

DEFAULTS = {
    "env": {"name": "linear", "variant": "A", "reward_noise_sd": 1.0},
    "policy": {"kind": "scenario_target"},
    "data": {"source": "simulate", "n": 25, "T": 30, "path": None, "m": None},
    "estimator": {
        "gamma": 0.5, "alpha": 0.05, "eta": 3.0 / 7.0, "L": None, "ridge": None,
        "basis": None, "kn": None, "kt": None, "delta": None, "x": None,
        "reference": None, "fqi": {"max_iter": 200, "tol": 1e-6, "ridge": 1e-9},
    },
    "experiment": {
        "reps": 0, "seed": 0, "workers": 1, "permute_seed": None,
        "truth": {"N_reps": 10000, "horizon": 500, "seed": 20231, "reference_n": None,
                  "reference_T": None, "reference_seed": 99},
    },
    "onpolicy": {"K": 4, "T": 280, "epsilon": 0.2, "n": 25},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(cfg: dict | None) -> dict:
    """Defaults merged with ``cfg``; environment-dependent fields filled in."""
    out = _merge(DEFAULTS, cfg or {})
    unknown = set(out) - set(DEFAULTS)
    if unknown:
        raise InputError(f"unknown config section(s): {sorted(unknown)}")
    env, est = out["env"], out["estimator"]
    cliff = env["name"] == "cliff"
    if env["name"] not in ("linear", "cliff"):
        raise InputError(f"unknown env {env['name']!r}")
    if est["basis"] is None:
        est["basis"] = "indicator" if cliff else "bspline"
    if est["ridge"] is None:
        est["ridge"] = 1e-9 if cliff else 0.0
    if est["kn"] is None:
        est["kn"] = 3 if cliff else 2
    if est["kt"] is None:
        est["kt"] = 1 if cliff else 2
    if est["reference"] is None:
        est["reference"] = ({"kind": "dirac", "x0": [float(CliffEnvSpec().start)]} if cliff
                            else {"kind": "normal", "mean": [0.0, 0.0],
                                  "cov": [[1.0, 0.0], [0.0, 1.0]], "seed": 123, "draws": 10000})
    if est["x"] is None:
        est["x"] = [float(CliffEnvSpec().start)] if cliff else [0.0, 0.0]
    tr = out["experiment"]["truth"]
    if tr["reference_n"] is None:
        tr["reference_n"] = 5000 if cliff else 1000
    if tr["reference_T"] is None:
        tr["reference_T"] = 13 if cliff else 100
    return out


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_env(cfg: dict):
    e = cfg["env"]
    if e["name"] == "cliff":
        return CliffEnvSpec(reward_noise_sd=float(e.get("reward_noise_sd", 1.0)))
    return LinearEnvSpec(e.get("variant", "A"))


def build_reference(spec: dict) -> ReferenceDistribution:
    kind = spec.get("kind")
    if kind == "dirac":
        return ReferenceDistribution.dirac(spec["x0"])
    if kind == "sample_set":
        return ReferenceDistribution.sample_set(spec["states"])
    if kind == "normal":
        return ReferenceDistribution.normal(spec["mean"], spec.get("cov"),
                                            seed=int(spec.get("seed", 0)),
                                            draws=int(spec.get("draws", 10000)))
    raise InputError(f"unknown reference distribution kind {kind!r}")


def build_eval_config(cfg: dict) -> EvalConfig:
    e = cfg["estimator"]
    return EvalConfig(gamma=float(e["gamma"]), alpha=float(e["alpha"]), eta=float(e["eta"]),
                      L_override=None if e["L"] is None else int(e["L"]),
                      ridge_lambda=float(e["ridge"]), seed=int(cfg["experiment"]["seed"]))


def build_basis(cfg: dict, env) -> BasisSpec:
    e = cfg["estimator"]
    if e["basis"] == "indicator":
        if not hasattr(env, "state_list"):
            raise InputError("indicator basis needs a finite-state environment")
        return BasisSpec(kind="indicator", states=tuple(map(tuple, env.state_list())))
    return BasisSpec(kind="bspline", eta=float(e["eta"]),
                     L_override=None if e["L"] is None else int(e["L"]))


def build_learner(cfg: dict, env) -> FQILearner:
    f = cfg["estimator"]["fqi"]
    return FQILearner(build_basis(cfg, env), float(cfg["estimator"]["gamma"]),
                      FQIConfig(max_iter=int(f["max_iter"]), tol=float(f["tol"]),
                                ridge_lambda=float(f["ridge"])))


def build_policy(cfg: dict, env) -> Policy:
    kind = cfg["policy"]["kind"]
    gamma = float(cfg["estimator"]["gamma"])
    if kind == "scenario_target":
        return scenario_target_policy()
    if kind == "uniform":
        return uniform_policy(env.m, getattr(env, "d", None))
    if kind == "behavior":
        return env.behavior_policy(gamma) if isinstance(env, CliffEnvSpec) else env.behavior_policy()
    if kind in ("optimal", "cliff_optimal"):
        if not isinstance(env, CliffEnvSpec):
            raise InputError("an exact optimal policy is only available for the cliff env")
        return env.optimal_policy(gamma)
    raise InputError(f"unknown policy kind {kind!r}")


def behavior_for(env, cfg: dict) -> Policy:
    gamma = float(cfg["estimator"]["gamma"])
    return env.behavior_policy(gamma) if isinstance(env, CliffEnvSpec) else env.behavior_policy()


# ---------------------------------------------------------------------------
# Seeds, truth values
# ---------------------------------------------------------------------------

def derive_seed(master: int, rep: int, stream: int = 0) -> int:
    """Seed for replication ``rep``; independent of worker scheduling."""
    return int(np.random.SeedSequence([int(master), int(rep), int(stream)]).generate_state(1)[0])


def policy_fingerprint(pi: Policy, env) -> str:
    """Hash of the action probabilities on a fixed probe set of states."""
    if hasattr(env, "state_list"):
        probe = env.state_list()
    else:
        probe = np.random.default_rng(12345).normal(size=(512, 2)) * 1.5
    h = hashlib.sha256(np.ascontiguousarray(pi.probs(probe)).tobytes())
    h.update(pi.kind.encode())
    return h.hexdigest()[:16]


class TruthCache:
    """Memoised Monte Carlo values keyed by env, policy, gamma, G and budget."""

    def __init__(self):
        self._store: dict = {}

    def __len__(self):
        return len(self._store)

    def value(self, env, pi: Policy, G: ReferenceDistribution, gamma: float, N_reps: int,
              horizon: int, seed: int) -> tuple[float, float]:
        key = (json.dumps(env.describe(), sort_keys=True), policy_fingerprint(pi, env),
               float(gamma), json.dumps(G.describe(), sort_keys=True), int(horizon),
               int(N_reps), int(seed))
        if key not in self._store:
            self._store[key] = mc_true_value(env, pi, G, gamma, N_reps, horizon, seed)
        return self._store[key]


_TRUTHS = TruthCache()


def reference_policy(cfg: dict, env) -> Policy:
    """Double-FQI policy learned from one large behaviour dataset."""
    tr = cfg["experiment"]["truth"]
    ds = simulate_dataset(env, behavior_for(env, cfg), int(tr["reference_n"]),
                          int(tr["reference_T"]), int(tr["reference_seed"]))
    return build_learner(cfg, env)(ds)


def _truth(cfg: dict, env, pi: Policy, G: ReferenceDistribution) -> float:
    tr = cfg["experiment"]["truth"]
    return _TRUTHS.value(env, pi, G, float(cfg["estimator"]["gamma"]), int(tr["N_reps"]),
                         int(tr["horizon"]), int(tr["seed"]))[0]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class ExperimentReport:
    command: str
    config: dict
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    result: dict | None = None

    def to_dict(self) -> dict:
        return {"command": self.command, "config": self.config, "summary": self.summary,
                "records": self.records, "result": self.result}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=_json_default)

    def text_summary(self) -> str:
        lines = [f"{self.command}"]
        env = self.config.get("env", {})
        data = self.config.get("data", {})
        est = self.config.get("estimator", {})
        lines.append(f"  env={env.get('name')}{'/' + env['variant'] if env.get('name') == 'linear' else ''}"
                     f"  n={data.get('n')}  T={data.get('T')}  gamma={est.get('gamma')}"
                     f"  alpha={est.get('alpha')}")
        if self.summary:
            rows = [("reps", f"{self.summary['reps']:d}"),
                    ("ECP", f"{self.summary['ECP']:.3f}"),
                    ("AL", f"{self.summary['AL']:.4f}"),
                    ("log(MSE)", f"{self.summary['log_MSE']:.2f}"),
                    ("truth", f"{self.summary['truth_mean']:.5f}")]
            width = max(len(r[0]) for r in rows)
            lines += [f"  {k:<{width}}  {v:>10}" for k, v in rows]
        if self.result:
            agg = self.result.get("aggregate", self.result)
            se = agg.get("std_err", agg.get("se"))
            lines.append(f"  estimate {agg['estimate']:.5f}  se {se:.5f}  "
                         f"CI [{agg['ci_lower']:.5f}, {agg['ci_upper']:.5f}]")
        return "\n".join(lines)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def summarize(records: list) -> dict:
    if not records:
        return {}
    est = np.array([r["estimate"] for r in records])
    lo = np.array([r["ci_lower"] for r in records])
    hi = np.array([r["ci_upper"] for r in records])
    truth = np.array([r["truth"] for r in records])
    cov = np.array([r["covered"] for r in records], dtype=float)
    mse = float(np.mean((est - truth) ** 2))
    return {"reps": len(records), "ECP": float(cov.mean()), "AL": float(np.mean(hi - lo)),
            "MSE": mse, "log_MSE": math.log(mse) if mse > 0 else float("-inf"),
            "truth_mean": float(truth.mean())}


def _record(rep: int, seed: int, interval, truth: float) -> dict:
    return {"rep": rep, "seed": seed, "estimate": interval.estimate, "se": interval.std_err,
            "ci_lower": interval.ci_lower, "ci_upper": interval.ci_upper,
            "covered": bool(interval.covers(truth)), "truth": float(truth)}


def run_replications(fn, reps: int, master_seed: int, workers: int = 1) -> list:
    """Call ``fn(rep, seed)`` for every replication; results ordered by ``rep``."""
    seeds = [derive_seed(master_seed, r) for r in range(reps)]
    if workers <= 1 or reps <= 1:
        return [fn(r, s) for r, s in zip(range(reps), seeds)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(reps), seeds))


# ---------------------------------------------------------------------------
# Single replications.  Module level, and rebuilt from the plain config dict,
# so worker processes receive nothing that needs pickling beyond JSON types.
# ---------------------------------------------------------------------------

def _dataset(cfg: dict, env, seed: int) -> TrajectoryDataset:
    d = cfg["data"]
    return simulate_dataset(env, behavior_for(env, cfg), int(d["n"]), int(d["T"]), seed)


def _parts(cfg: dict):
    env = build_env(cfg)
    return env, build_reference(cfg["estimator"]["reference"])


def _fixed_once(cfg, truth, rep, seed):
    env, G = _parts(cfg)
    pi = build_policy(cfg, env)
    ds = _dataset(cfg, env, seed)
    ec = build_eval_config(cfg)
    fit = fit_q(ds, build_basis(cfg, env).build(ds), pi, ec)
    return _record(rep, seed, value_integrated(fit, G, pi, ec.alpha), truth)


def _optimal_once(cfg, truth, rep, seed):
    env, G = _parts(cfg)
    ds = _dataset(cfg, env, seed)
    d, e = cfg["data"], cfg["estimator"]
    part = partition_from_counts(int(d["n"]), int(d["T"]), int(e["kn"]), int(e["kt"]))
    ps = cfg["experiment"]["permute_seed"]
    res = save_evaluate(ds, part, build_learner(cfg, env), G, build_eval_config(cfg),
                        basis=build_basis(cfg, env),
                        permute_seed=None if ps is None else derive_seed(int(ps), rep))
    return _record(rep, seed, res.aggregate, truth)


def _onpolicy_once(cfg, truth, rep, seed):
    env, G = _parts(cfg)
    o = cfg["onpolicy"]
    sched = OnPolicySchedule.constant(int(o["K"]), int(o["T"]), float(o["epsilon"]), int(o["n"]))
    res = onpolicy_run(env, sched, build_learner(cfg, env), G, build_eval_config(cfg),
                       basis=build_basis(cfg, env), seed=seed)
    return _record(rep, seed, res.aggregate, truth)


def _vd_once(cfg, truth, rep, seed):
    env = build_env(cfg)
    ds = _dataset(cfg, env, seed)
    d, e = cfg["data"], cfg["estimator"]
    part = partition_from_counts(int(d["n"]), int(d["T"]), int(e["kn"]), int(e["kt"]))
    res = save_vd(ds, part, build_learner(cfg, env), np.asarray(e["x"], dtype=float),
                  e["delta"], build_eval_config(cfg), basis=build_basis(cfg, env))
    return _record(rep, seed, res.aggregate, truth)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def _report(command: str, cfg: dict, fn) -> ExperimentReport:
    exp = cfg["experiment"]
    records = run_replications(fn, int(exp["reps"]), int(exp["seed"]), int(exp["workers"]))
    return ExperimentReport(command, cfg, records, summarize(records))


def experiment_fixed(cfg: dict) -> ExperimentReport:
    """Fixed target policy: one interval, or coverage over replications."""
    cfg = resolve_config(cfg)
    G = build_reference(cfg["estimator"]["reference"])
    ec = build_eval_config(cfg)
    if cfg["data"]["source"] == "csv":
        from .io import load_trajectories_csv

        ds = load_trajectories_csv(cfg["data"]["path"], cfg["data"]["m"])
        cfg["data"]["n"], cfg["data"]["T"] = int(ds.n), ds.N // max(int(ds.n), 1)
        env = build_env(cfg)
        pi = build_policy(cfg, env)
        fit = fit_q(ds, build_basis(cfg, env).build(ds), pi, ec)
        iv = value_integrated(fit, G, pi, ec.alpha)
        return ExperimentReport("evaluate-fixed", cfg, result=iv.to_dict())
    env = build_env(cfg)
    pi = build_policy(cfg, env)
    if int(cfg["experiment"]["reps"]) < 1:
        rec = _fixed_once(cfg, float("nan"), 0, int(cfg["experiment"]["seed"]))
        return ExperimentReport("evaluate-fixed", cfg, result=rec)
    truth = _truth(cfg, env, pi, G)
    return _report("evaluate-fixed", cfg, partial(_fixed_once, cfg, truth))


def optimal_truth(cfg: dict, env, G: ReferenceDistribution) -> float:
    return _truth(cfg, env, reference_policy(cfg, env), G)


def experiment_optimal(cfg: dict) -> ExperimentReport:
    """Sequential evaluation of the learned policy; truth from a reference policy."""
    cfg = resolve_config(cfg)
    env = build_env(cfg)
    G = build_reference(cfg["estimator"]["reference"])
    if int(cfg["experiment"]["reps"]) < 1:
        rec = _optimal_once(cfg, float("nan"), 0, int(cfg["experiment"]["seed"]))
        return ExperimentReport("evaluate-optimal", cfg, result=rec)
    truth = optimal_truth(cfg, env, G)
    return _report("evaluate-optimal", cfg, partial(_optimal_once, cfg, truth))


def experiment_onpolicy(cfg: dict) -> ExperimentReport:
    cfg = resolve_config(cfg)
    env = build_env(cfg)
    G = build_reference(cfg["estimator"]["reference"])
    o = cfg["onpolicy"]
    cfg["data"]["n"], cfg["data"]["T"] = int(o["n"]), int(o["T"])
    if int(cfg["experiment"]["reps"]) < 1:
        rec = _onpolicy_once(cfg, float("nan"), 0, int(cfg["experiment"]["seed"]))
        return ExperimentReport("onpolicy", cfg, result=rec)
    truth = optimal_truth(cfg, env, G)
    return _report("onpolicy", cfg, partial(_onpolicy_once, cfg, truth))


def vd_truth(cfg: dict, env) -> float:
    x = cfg["estimator"]["x"]
    G = ReferenceDistribution.dirac(x)
    if isinstance(env, LinearEnvSpec) and env.variant == "D":
        return 0.0
    return _truth(cfg, env, reference_policy(cfg, env), G) - _truth(cfg, env, behavior_for(env, cfg), G)


def experiment_value_diff(cfg: dict) -> ExperimentReport:
    cfg = resolve_config(cfg)
    env = build_env(cfg)
    if int(cfg["experiment"]["reps"]) < 1:
        rec = _vd_once(cfg, float("nan"), 0, int(cfg["experiment"]["seed"]))
        return ExperimentReport("value-diff", cfg, result=rec)
    truth = vd_truth(cfg, env)
    return _report("value-diff", cfg, partial(_vd_once, cfg, truth))


def simulate_to_csv(cfg: dict, path) -> TrajectoryDataset:
    from .io import write_trajectories_csv

    cfg = resolve_config(cfg)
    env = build_env(cfg)
    ds = _dataset(cfg, env, int(cfg["experiment"]["seed"]))
    write_trajectories_csv(ds, path)
    return ds
