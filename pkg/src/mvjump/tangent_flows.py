"""Tangent flows of the decoupled path: in the initial state and in the initial law.

``run_linear_jump_sde`` replays a recorded path and integrates a generic
linear equation with jumps on the same events.  The state tangent and the
Lions tangent are instances of it; batch versions for estimators run
through the vectorized scheme and agree with the replay to round-off.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ._engine import BankSummary, Compensator, _lions_drift_source, _lions_jump_source
from .errors import BankTooSmall, BlowUp, FixedPointDivergence
from .jump_driver import LevyModel
from .measure_kit import EmpiricalMeasure
from ._engine import BLOWUP
from .mv_simulator import LawFlow, PathBundle, run_paths, sample_initial

MIN_BANK = 32


# ------------------------------------------------------------------ generic linear equation

@dataclass
class LinearJumpSpec:
    """dY = (a1 Y + a2 + E'[a3 Y']) ds on drift steps, and the same with the
    jump callbacks at every event of the base path.

    Drift callbacks take (s, x, mu), jump callbacks (s, x, u, mu); the
    coupling kernels take an extra primed position v.  Each returns one
    matrix (or vector) for a single state x of shape (d,).  ``None`` stands
    for zero.
    """

    a0: np.ndarray
    a1_drift: Optional[Callable] = None
    a1_jump: Optional[Callable] = None
    a2_drift: Optional[Callable] = None
    a2_jump: Optional[Callable] = None
    a3_drift: Optional[Callable] = None
    a3_jump: Optional[Callable] = None

    @property
    def coupled(self) -> bool:
        return self.a3_drift is not None or self.a3_jump is not None


@dataclass
class PrimedBank:
    """Auxiliary paths seen through the primed expectation: positions and tangents per node."""

    X: np.ndarray
    Y: np.ndarray

    @property
    def size(self) -> int:
        return self.X.shape[1]


def _coupling(a3, s, x, mu, bank, k, Y):
    if a3 is None:
        return 0.0
    if isinstance(bank, str):
        return a3(s, x, mu, x) @ Y
    return np.mean([a3(s, x, mu, bank.X[k, m]) @ bank.Y[k, m] for m in range(bank.size)], axis=0)


def run_linear_jump_sde(spec: LinearJumpSpec, base: PathBundle, law: LawFlow, primed_bank=None) -> np.ndarray:
    """Integrate the linear equation along ``base`` with the base path's jump events.

    ``primed_bank`` is a PrimedBank, or ``"self"`` to close the coupling on
    the solution itself (a deterministic mean-field equation).
    """
    if spec.coupled:
        if primed_bank is None:
            raise BankTooSmall("a coupled linear equation needs a primed bank")
        if not isinstance(primed_bank, str) and primed_bank.size < 2:
            raise BankTooSmall(f"primed bank has {primed_bank.size} paths, at least 2 are needed")
    grid = base.grid
    K = grid.shape[0] - 1
    Y = np.array(spec.a0, dtype=float)
    path = np.empty((K + 1,) + Y.shape)
    path[0] = Y
    times = np.array([ev.time for ev in base.jumps])
    marks = np.array([ev.mark for ev in base.jumps])
    pre = base.jump_pre_states
    j = 0
    for k in range(K):
        s, h = grid[k], grid[k + 1] - grid[k]
        x = base.X[k]
        mu = law.at(s)
        inc = _coupling(spec.a3_drift, s, x, mu, primed_bank, k, Y)
        if spec.a1_drift is not None:
            inc = inc + spec.a1_drift(s, x, mu) @ Y
        if spec.a2_drift is not None:
            inc = inc + spec.a2_drift(s, x, mu)
        Y = Y + h * inc
        while j < len(times) and times[j] <= grid[k + 1] + 1e-15:
            xm, u = pre[j], marks[j]
            inc = _jump_coupling(spec, s, xm, u, mu, primed_bank, k, Y)
            if spec.a1_jump is not None:
                inc = inc + spec.a1_jump(s, xm, u, mu) @ Y
            if spec.a2_jump is not None:
                inc = inc + spec.a2_jump(s, xm, u, mu)
            Y = Y + inc
            j += 1
        if not np.all(np.isfinite(Y)) or np.max(np.abs(Y)) > BLOWUP:
            raise BlowUp(f"linear equation left the admissible range at t={grid[k + 1]:.6g}")
        path[k + 1] = Y
    return path


def _jump_coupling(spec, s, x, u, mu, bank, k, Y):
    if spec.a3_jump is None:
        return 0.0
    if isinstance(bank, str):
        return spec.a3_jump(s, x, u, mu, x) @ Y
    return np.mean([spec.a3_jump(s, x, u, mu, bank.X[k, m]) @ bank.Y[k, m] for m in range(bank.size)], axis=0)


# ------------------------------------------------------------------ state tangent

def simulate_dx_flow(cs, lm: LevyModel, base: PathBundle, law: LawFlow) -> np.ndarray:
    """State tangent along ``base``: identity start, db_dx (compensated) on drift steps, dc_dx at jumps."""
    comp = Compensator(cs, lm)
    d = cs.dim

    def a1_drift(s, x, mu):
        xx = x[None, :]
        return (np.asarray(cs.db_dx(xx, mu)) - comp.integral(cs.dc_dx, xx, mu))[0]

    def a1_jump(s, x, u, mu):
        return np.asarray(cs.dc_dx(x[None, :], np.array([u]), mu))[0]

    spec = LinearJumpSpec(a0=np.eye(d), a1_drift=a1_drift, a1_jump=a1_jump)
    return run_linear_jump_sde(spec, base, law)


# ------------------------------------------------------------------ primed bank

@dataclass
class BankReport:
    summary: BankSummary
    sweep_changes: list
    size: int


def build_bank(cs, lm: LevyModel, law: LawFlow, grid, v_points, bank_size: int, seed: int, *,
               sweeps: int = 2, threads: int = 1) -> BankReport:
    """Primed paths for the Lions tangent.

    For each pinned point v, ``bank_size`` paths started at v carry their
    state tangents; ``bank_size`` paths started from the initial law carry
    their own Lions tangents, closed by fixed-point sweeps from zero.
    """
    if bank_size < MIN_BANK:
        raise BankTooSmall(f"bank size {bank_size} is below the minimum {MIN_BANK}")
    if sweeps < 1:
        raise ValueError("at least one fixed-point sweep is required")
    v_points = np.atleast_2d(np.asarray(v_points, dtype=float))
    if v_points.shape[0] == 0:
        raise ValueError("v_points must be nonempty")
    grid = np.asarray(grid, dtype=float)
    K = grid.shape[0] - 1
    d = cs.dim
    V = v_points.shape[0]
    general = not cs.lions_v_free
    rec = "all" if general else "none"

    jv_mean = np.empty((K + 1, V, d, d))
    xv = jv = None
    if general:
        xv = np.empty((K + 1, V, bank_size, d))
        jv = np.empty((K + 1, V, bank_size, d, d))
    for r, v in enumerate(v_points):
        pinned = run_paths(cs, lm, np.tile(v, (bank_size, 1)), law, grid, seed, tag=f"bank_pin_{r}",
                           track_J=True, reduce_means=True, record=rec, record_tangents=general, threads=threads)
        jv_mean[:, r] = pinned.out.J_mean_nodes
        if general:
            xv[:, r] = pinned.out.X_nodes
            jv[:, r] = pinned.out.J_nodes

    x_theta = sample_initial(law.measures[0], bank_size, seed, tag="bank_theta_init")
    yth_mean = np.zeros((K + 1, V, d, d))
    xth = yth = None
    if general:
        yth = np.zeros((K + 1, V, bank_size, d, d))
    changes = []
    for sweep in range(sweeps):
        summary = BankSummary(v_points, jv_mean, yth_mean, xv, jv, xth, yth)
        if general and xth is None:
            summary.xth = np.zeros((K + 1, bank_size, d))
        out = run_paths(cs, lm, x_theta, law, grid, seed, tag="bank_theta", bank=summary, reduce_means=True,
                        record=rec, record_tangents=general, threads=threads).out
        change = float(np.max(np.abs(out.Y_mean_nodes - yth_mean)))
        changes.append(change)
        yth_mean = out.Y_mean_nodes
        if general:
            xth = out.X_nodes
            yth = np.transpose(out.Y_nodes, (0, 2, 1, 3, 4))
        if len(changes) >= 2 and changes[-2] > 1e-14 and changes[-1] >= changes[-2]:
            raise FixedPointDivergence(f"bank sweep changes did not decrease: {changes}")
    return BankReport(BankSummary(v_points, jv_mean, yth_mean, xv, jv, xth, yth), changes, bank_size)


# ------------------------------------------------------------------ Lions tangent

@dataclass
class TangentState:
    grid: np.ndarray
    dx: np.ndarray
    dmu: dict
    bank: BankReport

    def write_csv(self, path: str | Path) -> None:
        keys = list(self.dmu)
        d = self.dx.shape[-1]
        entries = [(i, j) for i in range(d) for j in range(d)]
        suffix = (lambda i, j: "") if d == 1 else (lambda i, j: f"[{i},{j}]")
        header = ["t"] + [f"dx{suffix(i, j)}" for i, j in entries]
        for v in keys:
            label = ";".join(repr(float(c)) for c in v)
            header += [f"dmu({label}){suffix(i, j)}" for i, j in entries]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k, t in enumerate(self.grid):
                row = [repr(float(t))] + [repr(float(self.dx[k, i, j])) for i, j in entries]
                for v in keys:
                    row += [repr(float(self.dmu[v][k, i, j])) for i, j in entries]
                w.writerow(row)


def simulate_dmu_flow(cs, lm: LevyModel, base: PathBundle, law: LawFlow, v_points, bank_size: int, seed: int, *,
                      sweeps: int = 2, threads: int = 1, bank: Optional[BankReport] = None) -> TangentState:
    """Lions tangent of ``base`` at each pinned point, plus its state tangent."""
    grid = base.grid
    if bank is None:
        bank = build_bank(cs, lm, law, grid, v_points, bank_size, seed, sweeps=sweeps, threads=threads)
    summary = bank.summary
    comp = Compensator(cs, lm)
    second = None
    d = cs.dim

    def node(s):
        return int(np.searchsorted(grid, s + 1e-12, side="right")) - 1

    dmu = {}
    for r, v in enumerate(summary.v_points):
        def a2_drift(s, x, mu, r=r):
            k = node(s)
            Sb, _ = _lions_drift_source(cs, comp, second, x[None, :], mu, summary, k,
                                        summary.jv_mean[k] + summary.yth_mean[k], False)
            return Sb[0, r]

        def a2_jump(s, x, u, mu, r=r):
            k = node(s)
            Sc, _, _ = _lions_jump_source(cs, second, x[None, :], np.array([u]), mu, summary, k,
                                          summary.jv_mean[k] + summary.yth_mean[k], False)
            return Sc[0, r]

        def a1_drift(s, x, mu):
            xx = x[None, :]
            return (np.asarray(cs.db_dx(xx, mu)) - comp.integral(cs.dc_dx, xx, mu))[0]

        def a1_jump(s, x, u, mu):
            return np.asarray(cs.dc_dx(x[None, :], np.array([u]), mu))[0]

        spec = LinearJumpSpec(a0=np.zeros((d, d)), a1_drift=a1_drift, a1_jump=a1_jump,
                              a2_drift=a2_drift, a2_jump=a2_jump)
        dmu[tuple(float(c) for c in v)] = run_linear_jump_sde(spec, base, law)
    dx = simulate_dx_flow(cs, lm, base, law)
    return TangentState(grid, dx, dmu, bank)
