"""Carré du champ and generator processes, integration-by-parts weights and
the gradient and density estimators built on them.

For a tangent V (the state tangent, the identity, a Lions tangent or their
sum) and M = Gamma^{-1}, W = M V, the weight

    Z_i = -2 (A^T W)_i + sum_{j,a,b} M_ja Gamma[Gamma_ab, X_j] W_bi
          - sum_{j,a} M_ja Gamma[V_ai, X_j]

satisfies E[grad f(X)^T V_i] = E[f(X) Z_i].  It is the divergence of
W_i = M V_i computed with the product rule; the last two terms vanish only
when Gamma and V are deterministic.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ._engine import Compensator, SchemeOutput, resolve_second_order
from .errors import InsufficientDecades, NonPSD, SingularGamma, UnsupportedDimension
from .jump_driver import LevyModel
from .measure_kit import dirac
from .mv_simulator import LawFlow, PathBundle, run_paths, uniform_grid

GAMMA_FLOOR = 1e-10
N_BATCHES = 50


# ------------------------------------------------------------------ per-path replay

@dataclass
class MalliavinState:
    """Gamma[X_t] and A[X_t] along one path plus the per-jump bottom contributions."""

    grid: np.ndarray
    gamma: np.ndarray
    agen: Optional[np.ndarray]
    jump_times: np.ndarray
    jump_gamma: np.ndarray
    jump_agen: Optional[np.ndarray] = None


def _replay(cs, lm: LevyModel, base: PathBundle, law: LawFlow, on_drift, on_jump):
    grid = base.grid
    comp = Compensator(cs, lm)
    pre = base.jump_pre_states
    j = 0
    for k in range(len(grid) - 1):
        s, h = grid[k], grid[k + 1] - grid[k]
        mu = law.at(s)
        x = base.X[k][None, :]
        P = np.eye(cs.dim) + h * (np.asarray(cs.db_dx(x, mu)) - comp.integral(cs.dc_dx, x, mu))[0]
        on_drift(k, s, h, x, mu, P, comp)
        while j < len(base.jumps) and base.jumps[j].time <= grid[k + 1] + 1e-15:
            ev = base.jumps[j]
            on_jump(k, ev, pre[j][None, :], np.array([ev.mark]), mu)
            j += 1
        yield k


def _check_psd(G: np.ndarray, t: float) -> np.ndarray:
    G = 0.5 * (G + G.T)
    tr = float(np.trace(G))
    if G.shape[0] > 1 or tr < 0:
        lo = float(np.linalg.eigvalsh(G).min())
        if lo < -1e-8 * max(abs(tr), 1e-300):
            raise NonPSD(f"Gamma has eigenvalue {lo:.3e} (trace {tr:.3e}) at t={t:.6g}")
    return G


def propagate_gamma(cs, lm: LevyModel, base: PathBundle, law: LawFlow) -> MalliavinState:
    """Gamma along ``base``: P Gamma P^T on drift steps, Q Gamma Q^T + gamma[c] at jumps."""
    d = cs.dim
    K = len(base.grid) - 1
    path = np.zeros((K + 1, d, d))
    G = np.zeros((d, d))
    times, contrib = [], []

    def on_drift(k, s, h, x, mu, P, comp):
        nonlocal G
        G = P @ G @ P.T

    def on_jump(k, ev, xm, u, mu):
        nonlocal G
        Q = np.eye(d) + np.asarray(cs.dc_dx(xm, u, mu))[0]
        src = np.zeros((d, d)) if ev.from_atom else np.asarray(cs.gamma_c(xm, u, mu))[0]
        G = Q @ G @ Q.T + src
        times.append(ev.time)
        contrib.append(src)

    for k in _replay(cs, lm, base, law, on_drift, on_jump):
        G = _check_psd(G, base.grid[k + 1])
        path[k + 1] = G
    return MalliavinState(base.grid, path, None, np.array(times), np.array(contrib).reshape(-1, d, d))


def propagate_A(cs, lm: LevyModel, base: PathBundle, law: LawFlow, state: MalliavinState) -> MalliavinState:
    """A along ``base`` from the Gamma path: P A + h/2 H:Gamma on drift steps,
    Q A + 1/2 C2:Gamma + a[c] at jumps."""
    d = cs.dim
    second = resolve_second_order(cs, lm, law.at(base.grid[0]), need_lions=False)
    K = len(base.grid) - 1
    path = np.zeros((K + 1, d))
    A = np.zeros(d)
    G = np.zeros((d, d))
    contrib = []

    def on_drift(k, s, h, x, mu, P, comp):
        nonlocal A, G
        H = (np.asarray(second["d2b_dx2"](x, mu)) - comp.integral(second["d2c_dx2"], x, mu))[0]
        A = P @ A + 0.5 * h * np.einsum("ijl,jl->i", H, G)
        G = P @ G @ P.T

    def on_jump(k, ev, xm, u, mu):
        nonlocal A, G
        Q = np.eye(d) + np.asarray(cs.dc_dx(xm, u, mu))[0]
        C2 = np.asarray(second["d2c_dx2"](xm, u, mu))[0]
        src = np.zeros(d) if ev.from_atom else np.asarray(cs.a_c(xm, u, mu))[0]
        gsrc = np.zeros((d, d)) if ev.from_atom else np.asarray(cs.gamma_c(xm, u, mu))[0]
        A = Q @ A + 0.5 * np.einsum("ijl,jl->i", C2, G) + src
        G = Q @ G @ Q.T + gsrc
        contrib.append(src)

    for k in _replay(cs, lm, base, law, on_drift, on_jump):
        path[k + 1] = A
    return MalliavinState(base.grid, state.gamma, path, state.jump_times, state.jump_gamma,
                          np.array(contrib).reshape(-1, d))


# ------------------------------------------------------------------ weights

@dataclass
class WeightSample:
    kind: str
    index: int
    value: float
    path: int
    v: Optional[tuple] = None


def gamma_rejections(G: np.ndarray, floor: float = GAMMA_FLOOR) -> np.ndarray:
    """True where Gamma is too close to singular relative to its trace."""
    tr = np.trace(G, axis1=1, axis2=2)
    if G.shape[1] == 1:
        lo = G[:, 0, 0]
    else:
        lo = np.linalg.eigvalsh(0.5 * (G + np.transpose(G, (0, 2, 1))))[:, 0]
    return ~(tr > 0) | (lo <= floor * tr)


def _weight(G, A, KG, V, KV, ok):
    """Divergence weight for tangent V (n,d,q) with cross tensor KV (n,d,q,d) or None."""
    n, d = A.shape
    Gs = np.where(ok[:, None, None], G, np.eye(d))
    M = np.linalg.inv(Gs)
    W = np.einsum("nab,nbq->naq", M, V)
    Z = -2.0 * np.einsum("na,naq->nq", A, W)
    Z += np.einsum("nja,nabj,nbq->nq", M, KG, W)
    if KV is not None:
        Z -= np.einsum("nja,naqj->nq", M, KV)
    return np.where(ok[:, None], Z, 0.0)


def weights_from_output(out: SchemeOutput, *, floor: float = GAMMA_FLOOR, delta_index: Optional[int] = None) -> dict:
    """All first-order weights for a simulated batch.

    Returns ``Z2`` (identity tangent), ``Z1`` (state tangent, if tracked),
    ``Zmu`` (n, V, d) (Lions tangents, if tracked), ``Zdelta`` (state plus
    Lions tangent at ``delta_index``) and the rejection mask.
    """
    G, A, KG = out.G, out.A, out.KG
    if G is None or KG is None:
        raise ValueError("weights need the Gamma, A and cross tracks")
    n, d = A.shape
    rejected = gamma_rejections(G, floor)
    ok = ~rejected
    res = {"rejected": rejected}
    eye = np.broadcast_to(np.eye(d), (n, d, d))
    res["Z2"] = _weight(G, A, KG, eye, None, ok)
    if out.J is not None:
        res["Z1"] = _weight(G, A, KG, out.J, out.KJ, ok)
    if out.Y is not None:
        V = out.Y.shape[1]
        res["Zmu"] = np.stack([_weight(G, A, KG, out.Y[:, v], out.KY[:, v], ok) for v in range(V)], axis=1)
        if delta_index is not None and out.J is not None:
            res["Zdelta"] = _weight(G, A, KG, out.J + out.Y[:, delta_index],
                                    out.KJ + out.KY[:, delta_index], ok)
    return res


def _sample(kind, i, weights, key, path, v=None):
    arr = weights[key]
    if weights["rejected"][path]:
        raise SingularGamma(f"path {path} has a singular Gamma")
    val = arr[path, v, i] if v is not None else arr[path, i]
    return WeightSample(kind, i, float(val), path, None if v is None else (v,))


def weight_Z1(i: int, weights: dict, path: int = 0) -> WeightSample:
    return _sample("Z1", i, weights, "Z1", path)


def weight_Z2(i: int, weights: dict, path: int = 0) -> WeightSample:
    return _sample("Z2", i, weights, "Z2", path)


def weight_Zmu1(i: int, v_index: int, weights: dict, path: int = 0) -> WeightSample:
    return _sample("Zmu1", i, weights, "Zmu", path, v_index)


# ------------------------------------------------------------------ batch simulation

@dataclass
class WeightBatch:
    X: np.ndarray
    weights: dict
    out: SchemeOutput

    @property
    def rejected(self) -> np.ndarray:
        return self.weights["rejected"]

    @property
    def rejection_rate(self) -> float:
        return float(self.rejected.mean())


def simulate_weights(cs, lm: LevyModel, x, law: LawFlow, grid, n_paths: int, seed: int, *, bank=None,
                     delta_index: Optional[int] = None, tag="weights", threads: int = 1,
                     floor: float = GAMMA_FLOOR, record_events: bool = False) -> WeightBatch:
    """Decoupled paths from x with state tangent, optional Lions tangents and all weights."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x0 = np.broadcast_to(x, (n_paths, x.shape[0]))
    summary = None if bank is None else getattr(bank, "summary", bank)
    batch = run_paths(cs, lm, x0, law, grid, seed, tag=tag, track_J=True, bank=summary, track_malliavin=True,
                      threads=threads, record_events=record_events)
    w = weights_from_output(batch.out, floor=floor, delta_index=delta_index)
    return WeightBatch(batch.out.X, w, batch.out)


def batch_means(values: np.ndarray, n_batches: int = N_BATCHES) -> tuple[np.ndarray, np.ndarray]:
    """Mean along axis 0 and its standard error from contiguous batch means."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    b = max(2, min(n_batches, n))
    size = n // b
    trimmed = values[: size * b]
    means = trimmed.reshape((b, size) + values.shape[1:]).mean(axis=1)
    return values.mean(axis=0), means.std(axis=0, ddof=1) / math.sqrt(b)


# ------------------------------------------------------------------ gradient estimator

@dataclass
class GradientEstimate:
    value: np.ndarray
    se: np.ndarray
    rejection_rate: float
    n_paths: int
    per_path: Optional[np.ndarray] = None


def _apply_f(f, X):
    vals = np.asarray(f(X), dtype=float)
    return vals.reshape(X.shape[0])


def pair_weight(f, batch: WeightBatch, key: str, v_index: Optional[int] = None,
                n_batches: int = N_BATCHES) -> GradientEstimate:
    """E[f(X) Z] over accepted paths, with batch-means standard errors."""
    ok = ~batch.rejected
    Z = batch.weights[key]
    if v_index is not None:
        Z = Z[:, v_index]
    fx = _apply_f(f, batch.X)
    prod = (fx[:, None] * Z)[ok]
    val, se = batch_means(prod, n_batches)
    return GradientEstimate(val, se, batch.rejection_rate, batch.X.shape[0], prod)


def estimate_gradient_x(f, cs, lm: LevyModel, t: float, x, law: LawFlow, n_paths: int, seed: int, *,
                        h: Optional[float] = None, mode: str = "x", bank=None, threads: int = 1,
                        floor: float = GAMMA_FLOOR) -> GradientEstimate:
    """Gradient in x of E[f(X_t^x)] by the state-tangent weight.

    In ``"delta_x"`` mode the initial law moves with x and the Lions weight
    at v = x is added; ``law`` must then be the flow started from x and
    ``bank`` a primed bank pinned at x.
    """
    if n_paths < 1000:
        raise ValueError("at least 1000 paths are required")
    grid = _grid_to(law, t, h)
    if mode == "x":
        wb = simulate_weights(cs, lm, x, law, grid, n_paths, seed, threads=threads, floor=floor)
        return pair_weight(f, wb, "Z1")
    if mode == "delta_x":
        if bank is None:
            raise ValueError("delta_x mode needs a primed bank pinned at x")
        wb = simulate_weights(cs, lm, x, law, grid, n_paths, seed, bank=bank, delta_index=0, threads=threads,
                              floor=floor)
        return pair_weight(f, wb, "Zdelta")
    raise ValueError(f"unknown mode {mode!r}")


def _grid_to(law: LawFlow, t: float, h: Optional[float]) -> np.ndarray:
    if h is None:
        grid = law.grid[law.grid <= t + 1e-12]
        if abs(grid[-1] - t) > 1e-12:
            grid = np.append(grid, t)
        return grid
    return uniform_grid(t, h, law.grid[0])


# ------------------------------------------------------------------ density

@dataclass
class DensityEstimate:
    y: np.ndarray
    p_hat: np.ndarray
    se: np.ndarray
    n_rejected: int
    integral: float
    hist_p: np.ndarray
    hist_se: np.ndarray
    bin_width: float
    n_paths: int

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["y", "p_hat", "se", "n_rejected"])
            for y, p, s in zip(self.y, self.p_hat, self.se):
                w.writerow([repr(float(y)), repr(float(p)), repr(float(s)), self.n_rejected])


def _tail_weight_sums(X: np.ndarray, Z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """sum_i 1{X_i > y} Z_i for every y, by sorting once."""
    order = np.argsort(X, kind="stable")
    xs, zs = X[order], Z[order]
    suffix = np.concatenate((np.cumsum(zs[::-1])[::-1], [0.0]))
    return suffix[np.searchsorted(xs, y, side="right")]


def density_from_samples(X: np.ndarray, Z: np.ndarray, y_grid, n_rejected: int = 0,
                         n_batches: int = N_BATCHES) -> DensityEstimate:
    """p(y) = E[1{X > y} Z] with batch-means errors, plus a histogram on the same points."""
    y = np.asarray(y_grid, dtype=float)
    n = X.shape[0]
    b = max(2, min(n_batches, n))
    size = n // b
    per_batch = np.array([_tail_weight_sums(X[i * size:(i + 1) * size], Z[i * size:(i + 1) * size], y) / size
                          for i in range(b)])
    p_hat = _tail_weight_sums(X, Z, y) / n
    se = per_batch.std(axis=0, ddof=1) / math.sqrt(b)
    q75, q25 = np.percentile(X, [75, 25])
    width = 2.0 * (q75 - q25) * n ** (-1.0 / 3.0)
    if not width > 0:
        width = 1.0
    lo = y - 0.5 * width
    counts = np.searchsorted(np.sort(X), lo + width, side="right") - np.searchsorted(np.sort(X), lo, side="right")
    frac = counts / n
    hist_p = frac / width
    hist_se = np.sqrt(frac * (1 - frac) / n) / width
    integral = float(np.trapezoid(p_hat, y)) if len(y) > 1 else float("nan")
    return DensityEstimate(y, p_hat, se, int(n_rejected), integral, hist_p, hist_se, float(width), n)


def estimate_density_ibp(cs, lm: LevyModel, t: float, x, law: LawFlow, y_grid, n_paths: int, seed: int, *,
                         h: Optional[float] = None, threads: int = 1, floor: float = GAMMA_FLOOR) -> DensityEstimate:
    """Density of X_t^x in dimension 1 from the identity-tangent weight."""
    if cs.dim != 1:
        raise UnsupportedDimension("the density estimator is implemented for d = 1")
    grid = _grid_to(law, t, h)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x0 = np.broadcast_to(x, (n_paths, 1))
    out = run_paths(cs, lm, x0, law, grid, seed, tag="weights", track_malliavin=True, threads=threads).out
    w = weights_from_output(out, floor=floor)
    ok = ~w["rejected"]
    return density_from_samples(out.X[ok, 0], w["Z2"][ok, 0], y_grid, int((~ok).sum()))


# ------------------------------------------------------------------ Gamma scaling

@dataclass
class ScalingFit:
    slope: float
    intercept: float
    t: np.ndarray
    estimates: np.ndarray
    se: np.ndarray
    rejected: np.ndarray


def gamma_inverse_moment_scaling(cs, lm: LevyModel, x, t_list: Sequence[float], p: float, n_paths: int,
                                 seed: int, *, law: Optional[LawFlow] = None, threads: int = 1) -> ScalingFit:
    """Log-log fit of E[|Gamma_t|^{-p} | Gamma_t > 0] against t (d = 1 uses Gamma itself,
    d > 1 its determinant to the power 1/d)."""
    t_arr = np.asarray(sorted(t_list), dtype=float)
    if t_arr.shape[0] < 2 or math.log10(t_arr[-1] / t_arr[0]) < 1.5:
        raise InsufficientDecades("t_list must span at least 1.5 decades")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    est, ses, rej = [], [], []
    for i, t in enumerate(t_arr):
        steps = max(1, int(math.ceil(t / 0.01)))
        grid = np.linspace(0.0, t, steps + 1)
        flow = law if law is not None else LawFlow.constant(dirac(x), grid)
        out = run_paths(cs, lm, np.broadcast_to(x, (n_paths, x.shape[0])), flow, grid, seed, tag=f"gscale_{i}",
                        track_malliavin=True, track_cross=False, threads=threads).out
        G = out.G
        size = G[:, 0, 0] if cs.dim == 1 else np.linalg.det(G) ** (1.0 / cs.dim)
        ok = size > 0
        val, se = batch_means(size[ok] ** (-p))
        est.append(float(val))
        ses.append(float(se))
        rej.append(int((~ok).sum()))
    est = np.array(est)
    slope, intercept = np.polyfit(np.log(t_arr), np.log(est), 1)
    return ScalingFit(float(slope), float(intercept), t_arr, est, np.array(ses), np.array(rej))
