"""Interacting particle systems, decoupled paths against a frozen law flow,
Picard iteration in the law, the restart (flow) check and moment tables."""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ._engine import SchemeOutput, run_scheme
from .errors import LawFlowGap, NonContraction
from .jump_driver import DEFAULT_BLOCK, EventFeed, JumpEvent, LevyModel, substream
from .measure_kit import EmpiricalMeasure, empirical_from_samples, wasserstein2_1d

TIME_TOL = 1e-12


# ------------------------------------------------------------------ law flow

@dataclass(frozen=True, eq=False)
class LawFlow:
    """Measures at increasing times, read left-continuously in between."""

    grid: np.ndarray
    measures: tuple

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        measures = tuple(self.measures)
        if grid.ndim != 1 or grid.shape[0] == 0 or len(measures) != grid.shape[0]:
            raise ValueError("one measure per grid node is required")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("law-flow grid must be strictly increasing")
        if len({m.dim for m in measures}) != 1:
            raise ValueError("all measures of a law flow must share their dimension")
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "measures", measures)

    @property
    def dim(self) -> int:
        return self.measures[0].dim

    def at(self, t: float) -> EmpiricalMeasure:
        if t < self.grid[0] - TIME_TOL or t > self.grid[-1] + TIME_TOL:
            raise LawFlowGap(f"time {t:.6g} outside the law flow range [{self.grid[0]:.6g}, {self.grid[-1]:.6g}]")
        k = int(np.searchsorted(self.grid, t + TIME_TOL, side="right")) - 1
        return self.measures[max(k, 0)]

    def check_covers(self, grid: np.ndarray) -> None:
        grid = np.asarray(grid, dtype=float)
        if grid[0] < self.grid[0] - TIME_TOL or grid[-1] > self.grid[-1] + TIME_TOL:
            raise LawFlowGap(f"simulation grid [{grid[0]:.6g}, {grid[-1]:.6g}] not covered by the law flow "
                             f"[{self.grid[0]:.6g}, {self.grid[-1]:.6g}]")

    @classmethod
    def constant(cls, mu: EmpiricalMeasure, grid: np.ndarray) -> "LawFlow":
        grid = np.asarray(grid, dtype=float)
        return cls(grid, (mu,) * grid.shape[0])

    def summary_rows(self) -> list[tuple]:
        """(t, mean, var, w2_to_prev) per node, first coordinate only for d > 1."""
        rows = []
        prev = None
        for t, mu in zip(self.grid, self.measures):
            m = float(mu.mean[0])
            var = float(mu.expect(mu.points[:, 0] ** 2)) - m * m
            w2 = 0.0 if prev is None else (wasserstein2_1d(prev, mu) if mu.dim == 1 else float("nan"))
            rows.append((float(t), m, var, w2))
            prev = mu
        return rows

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "mean", "var", "w2_to_prev"])
            for row in self.summary_rows():
                w.writerow([repr(v) for v in row])


def sup_w2_gap(a: LawFlow, b: LawFlow) -> tuple[float, np.ndarray]:
    """Largest node-wise W2 distance between two flows on the same grid."""
    if a.grid.shape != b.grid.shape or np.any(np.abs(a.grid - b.grid) > TIME_TOL):
        raise ValueError("law flows live on different grids")
    per_node = np.array([wasserstein2_1d(m1, m2) for m1, m2 in zip(a.measures, b.measures)])
    return float(per_node.max()), per_node


# ------------------------------------------------------------------ bundles

@dataclass
class PathBundle:
    """One simulated trajectory with the jumps it consumed."""

    grid: np.ndarray
    X: np.ndarray
    jumps: list
    jump_states: np.ndarray
    x0: np.ndarray
    lineage: dict
    jump_pre_states: Optional[np.ndarray] = None
    J: Optional[np.ndarray] = None
    Y: Optional[np.ndarray] = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.X)):
            raise ValueError("path bundle contains non-finite states")


class PathBatch(Sequence):
    """A population of paths stored as arrays; indexing yields PathBundle views."""

    def __init__(self, out: SchemeOutput, root_seed: int, tag, first_path: int = 0):
        self.out = out
        self.root_seed = root_seed
        self.tag = tag
        self.first_path = first_path

    def __len__(self) -> int:
        return self.out.X.shape[0]

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        i = int(i)
        if i < 0:
            i += len(self)
        out = self.out
        if out.X_nodes is None or len(out.record_index) != len(out.grid):
            raise ValueError("path bundles need every node recorded (record='all')")
        ev = out.events
        if ev is not None:
            lo, hi = np.searchsorted(ev["path"], [i, i + 1])
            jumps = [JumpEvent(float(t), float(m), bool(a))
                     for t, m, a in zip(ev["time"][lo:hi], ev["mark"][lo:hi], ev["atom"][lo:hi])]
            states, pre = ev["after"][lo:hi], ev["before"][lo:hi]
        else:
            jumps, states, pre = [], np.zeros((0, out.X.shape[1])), np.zeros((0, out.X.shape[1]))
        return PathBundle(
            grid=out.grid, X=out.X_nodes[:, i, :], jumps=jumps, jump_states=states, x0=out.x0[i],
            jump_pre_states=pre,
            lineage={"root_seed": self.root_seed, "tag": self.tag, "path": self.first_path + i},
            J=None if out.J_nodes is None else out.J_nodes[:, i],
            Y=None if out.Y_nodes is None else out.Y_nodes[:, i],
        )

    @property
    def X_T(self) -> np.ndarray:
        return self.out.X


def write_jump_log(bundle: PathBundle, path: str | Path) -> None:
    """Record per jump: little-endian f64 time, f64 mark, f64[d] state after the jump."""
    d = bundle.X.shape[1]
    rec = np.empty((len(bundle.jumps), 2 + d), dtype="<f8")
    for j, ev in enumerate(bundle.jumps):
        rec[j, 0], rec[j, 1] = ev.time, ev.mark
    rec[:, 2:] = bundle.jump_states
    rec.tofile(path)


def read_jump_log(path: str | Path, dim: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype="<f8").reshape(-1, 2 + dim)
    return raw[:, 0], raw[:, 1], raw[:, 2:]


# ------------------------------------------------------------------ initial laws

def sample_initial(theta_sampler, n: int, root_seed: int, tag="theta") -> np.ndarray:
    """Draw n initial states from an EmpiricalMeasure, a callable (n, rng) or a fixed point."""
    rng = substream(root_seed, tag)
    if isinstance(theta_sampler, EmpiricalMeasure):
        idx = rng.choice(theta_sampler.size, size=n, p=theta_sampler.weights)
        return np.array(theta_sampler.points[idx], dtype=float)
    if callable(theta_sampler):
        arr = np.asarray(theta_sampler(n, rng), dtype=float)
        return arr[:, None] if arr.ndim == 1 else arr
    point = np.atleast_1d(np.asarray(theta_sampler, dtype=float))
    return np.broadcast_to(point, (n, point.shape[0])).copy()


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.shape[0] < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing with at least two nodes")
    if np.max(np.diff(grid)) > 0.1 + TIME_TOL:
        raise ValueError("grid step must not exceed 0.1")
    return grid


def uniform_grid(T: float, h: float, t0: float = 0.0) -> np.ndarray:
    K = int(round((T - t0) / h))
    if abs(K * h - (T - t0)) > 1e-9 * max(1.0, T):
        raise ValueError(f"step {h} does not divide the horizon {T - t0}")
    return t0 + h * np.arange(K + 1)


# ------------------------------------------------------------------ particle system

def simulate_particle_system(cs, lm: LevyModel, theta_sampler, n_particles: int, grid, root_seed: int, *,
                             x0: Optional[np.ndarray] = None, refresh_times=None, record="all",
                             record_events: bool = False, tag="particles") -> tuple[LawFlow, PathBatch]:
    """Euler scheme for the interacting system; the empirical law is refreshed at grid nodes.

    Returns the law flow (one measure per refresh node plus the terminal
    node) and the particle paths.
    """
    grid = _check_grid(grid)
    if n_particles < 2:
        raise ValueError("a particle system needs at least two particles")
    if x0 is None:
        x0 = sample_initial(theta_sampler, n_particles, root_seed)
    x0 = np.asarray(x0, dtype=float).reshape(n_particles, -1)
    feed = EventFeed(lm, root_seed, tag, n_particles)
    out = run_scheme(cs, lm, x0, grid, feed, refresh_times=refresh_times, record=record,
                     record_events=record_events)
    times = list(out.law_times)
    measures = list(out.law_nodes)
    if grid[-1] - times[-1] > TIME_TOL:
        times.append(grid[-1])
        measures.append(EmpiricalMeasure(out.X, np.full(n_particles, 1.0 / n_particles)))
    return LawFlow(np.array(times), tuple(measures)), PathBatch(out, root_seed, tag)


# ------------------------------------------------------------------ decoupled paths

def _merge_outputs(parts: list[SchemeOutput], sizes: list[int]) -> SchemeOutput:
    first = parts[0]
    n_total = sum(sizes)

    def cat(name, axis):
        vals = [getattr(p, name) for p in parts]
        return None if vals[0] is None else np.concatenate(vals, axis=axis)

    def wmean(name):
        vals = [getattr(p, name) for p in parts]
        if vals[0] is None:
            return None
        return sum(v * (s / n_total) for v, s in zip(vals, sizes))

    events = None
    if first.events is not None:
        offs = np.cumsum([0] + sizes[:-1])
        events = {}
        for key in first.events:
            chunks = []
            for p, off in zip(parts, offs):
                val = p.events[key]
                chunks.append(val + off if key == "path" else val)
            events[key] = np.concatenate(chunks)
    return SchemeOutput(
        grid=first.grid, x0=cat("x0", 0), X=cat("X", 0), record_index=first.record_index,
        X_nodes=cat("X_nodes", 1), J=cat("J", 0), Y=cat("Y", 0), G=cat("G", 0), A=cat("A", 0),
        KG=cat("KG", 0), KJ=cat("KJ", 0), KY=cat("KY", 0), J_nodes=cat("J_nodes", 1), Y_nodes=cat("Y_nodes", 1),
        J_mean_nodes=wmean("J_mean_nodes"), Y_mean_nodes=wmean("Y_mean_nodes"), events=events,
    )


def run_paths(cs, lm: LevyModel, x0: np.ndarray, law: LawFlow, grid, root_seed: int, *, tag="decoupled",
              first_path: int = 0, threads: int = 1, block_size: int = DEFAULT_BLOCK, **engine_kw) -> PathBatch:
    """Decoupled paths from the rows of x0, processed in fixed blocks.

    Block boundaries and event streams do not depend on ``threads``, so the
    result is identical for any worker count.
    """
    grid = _check_grid(grid)
    law.check_covers(grid)
    x0 = np.asarray(x0, dtype=float)
    n = x0.shape[0]
    starts = list(range(0, n, block_size))

    def work(s):
        m = min(block_size, n - s)
        feed = EventFeed(lm, root_seed, tag, m, first_path=first_path + s)
        return run_scheme(cs, lm, x0[s:s + m], grid, feed, law_at=law.at, **engine_kw), m

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, starts))
    else:
        results = [work(s) for s in starts]
    parts, sizes = zip(*results)
    out = parts[0] if len(parts) == 1 else _merge_outputs(list(parts), list(sizes))
    return PathBatch(out, root_seed, tag, first_path)


def simulate_decoupled(cs, lm: LevyModel, x, law: LawFlow, grid, seed: int, *, tag="decoupled",
                       path_index: int = 0) -> PathBundle:
    """One decoupled path started at x reading the frozen law flow."""
    x = np.atleast_1d(np.asarray(x, dtype=float))[None, :]
    batch = run_paths(cs, lm, x, law, grid, seed, tag=tag, first_path=path_index, record="all",
                      record_events=True)
    return batch[0]


# ------------------------------------------------------------------ Picard iteration

@dataclass
class PicardResult:
    flows: list
    gaps: list
    node_gaps: list
    ratio: float
    non_contraction: bool
    diagnostics: str = ""


def picard_law_iteration(cs, lm: LevyModel, theta_sampler, n_particles: int, grid, n_iter: int,
                         root_seed: int, *, tag="particles") -> PicardResult:
    """Stage 0 freezes the initial law; stage n runs the classical SDE against stage n-1.

    Every stage uses the particle system's initial draws and jump events, so
    the stages converge to the interacting system with that noise.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be at least 1")
    grid = _check_grid(grid)
    x0 = sample_initial(theta_sampler, n_particles, root_seed)
    mu0 = EmpiricalMeasure(x0, np.full(n_particles, 1.0 / n_particles))
    flows = [LawFlow.constant(mu0, grid)]
    gaps, node_gaps = [], []
    for _ in range(n_iter):
        batch = run_paths(cs, lm, x0, flows[-1], grid, root_seed, tag=tag, record="all")
        nodes = batch.out.X_nodes
        w = np.full(n_particles, 1.0 / n_particles)
        flow = LawFlow(grid, tuple(EmpiricalMeasure(nodes[k], w) for k in range(len(grid))))
        gap, per_node = sup_w2_gap(flow, flows[-1])
        flows.append(flow)
        gaps.append(gap)
        node_gaps.append(per_node)
    rising = 0
    flag = False
    for a, b in zip(gaps[1:], gaps[2:]):
        rising = rising + 1 if b > a else 0
        flag = flag or rising >= 2
    diag = ""
    if flag:
        diag = "stage gaps " + ", ".join(f"{g:.3e}" for g in gaps)
        warnings.warn(str(NonContraction(f"Picard gaps increased for two consecutive stages: {diag}")),
                      RuntimeWarning, stacklevel=2)
    positive = [(i, g) for i, g in enumerate(gaps) if g > 0]
    ratio = float("nan")
    if len(positive) >= 2:
        i, g = zip(*positive)
        ratio = float(math.exp(np.polyfit(i, np.log(g), 1)[0]))
    return PicardResult(flows, gaps, node_gaps, ratio, flag, diag)


# ------------------------------------------------------------------ flow property

@dataclass
class FlowReport:
    max_discrepancy: float
    mean_discrepancy: float
    h: float
    t_restart: float
    n_paths: int


def check_flow_property(cs, lm: LevyModel, x, theta_sampler, s: float, t: float, r: float, h: float,
                        seed: int, *, n_particles: int = 2000, n_paths: int = 200,
                        snap_mid_step: bool = True) -> FlowReport:
    """Direct run on [s, r] against a run restarted at t from the achieved states and law.

    Both runs step on the union of the grids s + jh and t + jh and consume
    the same jump events.  The direct law is refreshed at s + jh, the
    restarted law at t + jh, so any gap is the scheme's law-freezing error.
    With ``snap_mid_step`` the restart time moves to the middle of its step.
    """
    if not s < t < r:
        raise ValueError("need s < t < r")
    if snap_mid_step:
        t = s + (math.floor((t - s) / h + TIME_TOL) + 0.5) * h
    base = np.arange(s, r + TIME_TOL, h)
    shifted = np.arange(t, r + TIME_TOL, h)
    grid = np.union1d(np.round(base, 14), np.round(shifted, 14))
    grid = grid[(grid >= s - TIME_TOL) & (grid <= r + TIME_TOL)]
    grid = np.unique(np.concatenate((grid, [r])))
    grid = grid[np.concatenate(([True], np.diff(grid) > 1e-11))]
    k_t = int(np.argmin(np.abs(grid - t)))
    x = np.atleast_1d(np.asarray(x, dtype=float))

    theta0 = sample_initial(theta_sampler, n_particles, seed)
    law_direct, particles = simulate_particle_system(cs, lm, None, n_particles, grid, seed, x0=theta0,
                                                     refresh_times=base, record=np.array([k_t]))
    x_start = np.broadcast_to(x, (n_paths, x.shape[0]))
    direct = run_paths(cs, lm, x_start, law_direct, grid, seed, record=np.array([k_t, len(grid) - 1]))

    tail = grid[k_t:]
    law_restart, _ = simulate_particle_system(cs, lm, None, n_particles, tail, seed,
                                              x0=particles.out.X_nodes[0], refresh_times=shifted, record="terminal")
    composed = run_paths(cs, lm, direct.out.X_nodes[0], law_restart, tail, seed, record="terminal")
    gap = np.linalg.norm(direct.out.X - composed.out.X, axis=1)
    return FlowReport(float(gap.max()), float(gap.mean()), h, float(grid[k_t]), n_paths)


# ------------------------------------------------------------------ moments

@dataclass
class MomentReport:
    times: np.ndarray
    sup_norm: np.ndarray
    increment_h: np.ndarray
    increment: np.ndarray
    increment_power: np.ndarray
    root_slope: float
    power_slope: float
    p: float


def moment_report(bundles, p: float = 2.0, h_list: Optional[Sequence[float]] = None) -> MomentReport:
    """Sup-norms E[sup_{s<=t}|X_s|^p]^(1/p) per node and small-time increments.

    ``root_slope`` is the log-log slope of E[sup_{s<=h}|X_s - x|^p]^(1/p)
    against h; ``power_slope`` that of the p-th power.
    """
    if p < 2:
        raise ValueError("p must be at least 2")
    if isinstance(bundles, PathBatch):
        out = bundles.out
        if len(out.record_index) != len(out.grid):
            raise ValueError("moment_report needs every node recorded")
        grid = out.grid
        paths = np.transpose(out.X_nodes, (1, 0, 2))
    else:
        grid = bundles[0].grid
        paths = np.stack([b.X for b in bundles])
    norms = np.linalg.norm(paths, axis=2)
    running = np.maximum.accumulate(norms, axis=1)
    sup_norm = np.mean(running ** p, axis=0) ** (1.0 / p)
    dev = np.linalg.norm(paths - paths[:, :1, :], axis=2)
    dev_sup = np.maximum.accumulate(dev, axis=1)
    if h_list is None:
        h_list = [grid[k] - grid[0] for k in (1, 2, 4, 8, 16, 32) if k < len(grid)]
    h_arr = np.asarray(h_list, dtype=float)
    idx = [int(np.argmin(np.abs(grid - grid[0] - hh))) for hh in h_arr]
    power = np.array([np.mean(dev_sup[:, k] ** p) for k in idx])
    inc = power ** (1.0 / p)
    ok = inc > 0
    root_slope = float(np.polyfit(np.log(h_arr[ok]), np.log(inc[ok]), 1)[0]) if ok.sum() >= 2 else float("nan")
    power_slope = float(np.polyfit(np.log(h_arr[ok]), np.log(power[ok]), 1)[0]) if ok.sum() >= 2 else float("nan")
    return MomentReport(grid, sup_norm, h_arr, inc, power, root_slope, power_slope, p)


def tail_probability(bundles, radius: float, t_list: Sequence[float]) -> np.ndarray:
    """Empirical P(sup_{s<=t}|X_s - x| >= radius) for each t."""
    out = bundles.out
    grid = out.grid
    dev = np.linalg.norm(out.X_nodes - out.X_nodes[:1], axis=2)
    dev_sup = np.maximum.accumulate(dev, axis=0)
    return np.array([np.mean(dev_sup[int(np.argmin(np.abs(grid - grid[0] - tt)))] >= radius) for tt in t_list])
