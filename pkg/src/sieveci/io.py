"""CSV reading and writing for trajectory data.

Columns: ``traj_id,t,state_0,...,state_{d-1},action,reward``.  A row with
empty ``action`` and ``reward`` at ``t = T_i`` is the terminal state of the
trajectory and supplies the next state of its last transition.
"""

from __future__ import annotations

import csv
import os
import warnings

import numpy as np

from .core import TrajectoryDataset, Violation, validate_dataset
from .errors import ParseError, ValidationError


def _fmt(v: float) -> str:
    v = float(v)
    if v.is_integer() and abs(v) < 2 ** 53:
        return str(int(v))
    return repr(v)


def _header(d: int) -> list[str]:
    return ["traj_id", "t"] + [f"state_{j}" for j in range(d)] + ["action", "reward"]


def write_trajectories_csv(ds: TrajectoryDataset, path) -> None:
    """Write ``ds`` with one terminal-state row after each trajectory.

    Floats are written with ``repr`` so reading the file back reproduces the
    values bit for bit.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(ds.d))
        N = ds.N
        for k in range(N):
            w.writerow([int(ds.traj_id[k]), int(ds.t[k])]
                       + [_fmt(v) for v in ds.states[k]]
                       + [int(ds.actions[k]), _fmt(ds.rewards[k])])
            last = (k == N - 1 or ds.traj_id[k + 1] != ds.traj_id[k]
                    or ds.t[k + 1] != ds.t[k] + 1)
            if last:
                w.writerow([int(ds.traj_id[k]), int(ds.t[k]) + 1]
                           + [_fmt(v) for v in ds.next_states[k]] + ["", ""])


def _parse_rows(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        header = [h.strip() for h in header]
        d = len(header) - 4
        if d < 1 or header != _header(d):
            raise ParseError(f"unexpected header {header!r}", 1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
            try:
                traj = int(row[0])
                t = int(row[1])
                state = [float(c) for c in row[2:2 + d]]
            except ValueError as exc:
                raise ParseError(f"bad number: {exc}", lineno) from None
            a_txt, r_txt = row[-2].strip(), row[-1].strip()
            if (a_txt == "") != (r_txt == ""):
                raise ParseError("action and reward must both be present or both empty", lineno)
            if a_txt == "":
                action, reward = None, None
            else:
                try:
                    action, reward = int(a_txt), float(r_txt)
                except ValueError as exc:
                    raise ParseError(f"bad action/reward: {exc}", lineno) from None
            rows.append((lineno, traj, t, state, action, reward))
    return d, rows


def load_trajectories_csv(path, m: int | None = None) -> TrajectoryDataset:
    """Read a trajectory CSV into a dataset.

    ``m`` defaults to one more than the largest action in the file.
    Trajectories without a terminal-state row lose their last transition,
    with a warning.
    """
    if not os.path.exists(path):
        raise ParseError(f"no such file: {path}")
    d, rows = _parse_rows(path)
    if not rows:
        raise ValidationError([Violation("empty dataset", None, None, "file has no rows")])
    groups: dict[int, list] = {}
    order = []
    for r in rows:
        if r[1] not in groups:
            groups[r[1]] = []
            order.append(r[1])
        groups[r[1]].append(r)
    violations = []
    cols = {k: [] for k in ("traj", "t", "s", "a", "y", "s2", "a2")}
    dropped = 0
    for traj in sorted(order):
        g = groups[traj]
        for prev, cur in zip(g, g[1:]):
            if cur[2] <= prev[2]:
                violations.append(Violation("unsorted", traj, cur[2],
                                            f"line {cur[0]}: t={cur[2]} after t={prev[2]}"))
            elif cur[2] != prev[2] + 1:
                violations.append(Violation("time gap", traj, cur[2],
                                            f"line {cur[0]}: t jumps from {prev[2]}"))
        for r in g[:-1]:
            if r[4] is None:
                violations.append(Violation("terminal row not last", traj, r[2],
                                            f"line {r[0]}"))
        if violations:
            continue
        for j, r in enumerate(g):
            if r[4] is None:
                continue
            if j + 1 == len(g):
                dropped += 1
                if cols["traj"] and cols["traj"][-1] == traj:
                    cols["a2"][-1] = -1
                continue
            nxt = g[j + 1]
            cols["traj"].append(traj)
            cols["t"].append(r[2])
            cols["s"].append(r[3])
            cols["a"].append(r[4])
            cols["y"].append(r[5])
            cols["s2"].append(nxt[3])
            cols["a2"].append(-1 if nxt[4] is None else nxt[4])
    if violations:
        raise ValidationError(violations)
    if dropped:
        warnings.warn(f"{dropped} trajectory(ies) lack a terminal state row; "
                      "their last transition was dropped", RuntimeWarning, stacklevel=2)
    if not cols["traj"]:
        raise ValidationError([Violation("empty dataset", None, None, "no complete transition")])
    acts = np.asarray(cols["a"], dtype=np.int64)
    m = int(acts.max()) + 1 if m is None else int(m)
    ds = TrajectoryDataset(
        traj_id=cols["traj"], t=cols["t"], states=np.asarray(cols["s"], dtype=float).reshape(-1, d),
        actions=acts, rewards=cols["y"],
        next_states=np.asarray(cols["s2"], dtype=float).reshape(-1, d),
        next_actions=cols["a2"], m=m,
    )
    problems = validate_dataset(ds)
    if problems:
        raise ValidationError(problems)
    return ds
