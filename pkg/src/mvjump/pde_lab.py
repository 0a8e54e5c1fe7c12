"""Terminal-value functions of (state, law), their Monte Carlo values and
gradients, the nonlocal generator by quadrature, PDE residuals and the
chain rule for functionals of the law flow."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import MissingDerivatives, UnsupportedTerminal
from .jump_driver import LevyModel, nu_rule
from .malliavin_engine import N_BATCHES, batch_means, simulate_weights
from .measure_kit import EmpiricalMeasure, empirical_from_samples
from .mv_simulator import LawFlow, run_paths, sample_initial, simulate_particle_system, uniform_grid
from .tangent_flows import build_bank

EPS_L = 1e-4


# ------------------------------------------------------------------ terminal functions

@dataclass(frozen=True)
class TerminalFunction:
    """g(x, mu) evaluated row-wise on x of shape (n, d).

    ``separable`` = (g1, G, G_prime) marks the family g1(x) + G(m(mu));
    ``dg_dx``, ``dg_dmu`` and ``flat`` are closed-form derivatives used by
    the generator (``flat`` is the flat derivative in its last argument).
    """

    g: Callable
    smoothness: str = "smooth"
    dg_dx: Optional[Callable] = None
    dg_dmu: Optional[Callable] = None
    flat: Optional[Callable] = None
    growth_q: float = 1.0
    growth_c: float = 1.0
    separable: Optional[tuple] = None
    label: str = "g"

    def __call__(self, x, mu) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.asarray(self.g(x, mu), dtype=float).reshape(x.shape[0])

    def check_growth(self, probes, mu: EmpiricalMeasure) -> bool:
        x = np.atleast_2d(np.asarray(probes, dtype=float))
        bound = self.growth_c * (1 + np.linalg.norm(x, axis=1) + math.sqrt(mu.second_moment)) ** self.growth_q
        return bool(np.all(np.abs(self(x, mu)) <= bound))


def separable(g1: Callable, G: Callable, G_prime: Callable, *, g1_prime: Optional[Callable] = None,
              smoothness: str = "smooth", label: str = "separable") -> TerminalFunction:
    """g(x, mu) = g1(x) + G(m(mu)) in d = 1, with g1 acting on arrays of shape (n,)."""

    def g(x, mu):
        return g1(x[:, 0]) + G(float(mu.mean[0]))

    dg_dx = None
    if g1_prime is not None:
        def dg_dx(x, mu):
            return np.asarray(g1_prime(x[:, 0]), dtype=float).reshape(-1, 1)

    def dg_dmu(x, mu, v):
        v = np.atleast_2d(v)
        return np.full((v.shape[0], 1), float(G_prime(float(mu.mean[0]))))

    def flat(x, mu, y):
        y = np.atleast_2d(y)
        return float(G_prime(float(mu.mean[0]))) * y[:, 0]

    return TerminalFunction(g, smoothness, dg_dx, dg_dmu, flat, separable=(g1, G, G_prime), label=label)


def linear_x() -> TerminalFunction:
    return separable(lambda x: x, lambda m: 0.0, lambda m: 0.0, g1_prime=np.ones_like, label="linear_x")


def mean_g() -> TerminalFunction:
    return separable(np.zeros_like, lambda m: m, lambda m: 1.0, g1_prime=np.zeros_like, label="mean")


def indicator(q0: float) -> TerminalFunction:
    return separable(lambda x: (x > q0).astype(float), lambda m: 0.0, lambda m: 0.0,
                     smoothness="measurable", label=f"indicator({q0})")


def constant_g(value: float = 1.0) -> TerminalFunction:
    return separable(lambda x: np.full_like(x, value), lambda m: 0.0, lambda m: 0.0,
                     g1_prime=np.zeros_like, label=f"const({value})")


@dataclass
class PdeQuery:
    """Point (t, x, theta) at which U and its derivatives are estimated."""

    cs: object
    lm: LevyModel
    t: float
    x: np.ndarray
    theta: object
    g: TerminalFunction
    n_paths: int = 10_000
    n_particles: int = 10_000
    h: float = 0.01
    seed: int = 0
    bank_size: int = 256
    threads: int = 1

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError("t must be positive")
        if self.n_paths < 1000:
            raise ValueError("the Monte Carlo budget must be at least 1000 paths")
        self.x = np.atleast_1d(np.asarray(self.x, dtype=float))


@dataclass
class Estimate:
    value: float
    se: float


def _law(q: PdeQuery, grid, seed=None):
    seed = q.seed if seed is None else seed
    law, _ = simulate_particle_system(q.cs, q.lm, q.theta, q.n_particles, grid, seed, record="none")
    return law


def evaluate_U(q: PdeQuery) -> Estimate:
    """Mean of g(X_t^x, mu_t) over decoupled paths against one particle law flow."""
    grid = uniform_grid(q.t, q.h)
    law = _law(q, grid)
    batch = run_paths(q.cs, q.lm, np.broadcast_to(q.x, (q.n_paths, q.x.shape[0])), law, grid, q.seed,
                      threads=q.threads)
    mu_t = law.at(q.t)
    vals = q.g(batch.X_T, mu_t)
    val, se = batch_means(vals)
    return Estimate(float(val), math.hypot(float(se), _law_part_se(q.g, mu_t)))


def _law_part_se(g: TerminalFunction, mu_t: EmpiricalMeasure) -> float:
    """Delta-method error of G(m(mu_t)) from the particle spread (separable g only)."""
    if g.separable is None:
        return 0.0
    G_prime = g.separable[2]
    m = float(mu_t.mean[0])
    var = float(mu_t.expect(mu_t.points[:, 0] ** 2)) - m * m
    return abs(float(G_prime(m))) * math.sqrt(max(var, 0.0) / mu_t.size)


def grad_x_U(q: PdeQuery) -> Estimate:
    """E[g(X_t, mu_t) Z1] with the state-tangent weight."""
    grid = uniform_grid(q.t, q.h)
    law = _law(q, grid)
    wb = simulate_weights(q.cs, q.lm, q.x, law, grid, q.n_paths, q.seed, threads=q.threads)
    ok = ~wb.rejected
    vals = q.g(wb.X, law.at(q.t))[:, None] * wb.weights["Z1"]
    val, se = batch_means(vals[ok])
    return Estimate(val, se)


def grad_mu_U(q: PdeQuery, v_points) -> dict:
    """Lions derivative of U at each v for g = g1(x) + G(m(mu)).

    The g1 part pairs with the Lions weight; the G part is
    G'(m_t) times the primed average of the state and Lions tangents.
    """
    if q.g.separable is None:
        raise UnsupportedTerminal(f"{q.g.label} is not of the form g1(x) + G(m(mu))")
    g1, G, G_prime = q.g.separable
    grid = uniform_grid(q.t, q.h)
    law = _law(q, grid)
    v_points = np.atleast_2d(np.asarray(v_points, dtype=float))
    bank = build_bank(q.cs, q.lm, law, grid, v_points, q.bank_size, q.seed, threads=q.threads)
    wb = simulate_weights(q.cs, q.lm, q.x, law, grid, q.n_paths, q.seed, bank=bank, threads=q.threads)
    ok = ~wb.rejected
    g1x = np.asarray(g1(wb.X[:, 0]), dtype=float)
    m_t = float(law.at(q.t).mean[0])
    tangent_mean = bank.summary.jv_mean[-1] + bank.summary.yth_mean[-1]
    out = {}
    for r, v in enumerate(v_points):
        vals = g1x[:, None] * wb.weights["Zmu"][:, r]
        val, se = batch_means(vals[ok])
        val = val + float(G_prime(m_t)) * tangent_mean[r][0]
        out[tuple(float(c) for c in v)] = Estimate(val, se)
    return out


# ------------------------------------------------------------------ generator

@dataclass
class GeneratorValue:
    value: float
    interval: float
    terms: dict


def apply_generator_L(F: TerminalFunction, x, mu: EmpiricalMeasure, cs, lm: LevyModel, *,
                      eps_L: float = EPS_L, hess_bound: Optional[float] = None) -> GeneratorValue:
    """Nonlocal generator applied to F at (x, mu).

    Terms: dF/dx . b, E_mu[dF/dmu . b], the state-jump integral and the
    law-jump integral (each atom y moved to y + c(y, u, mu), in flat form).
    The state-jump integral below ``eps_L`` is bounded by a Taylor interval.
    """
    if F.dg_dx is None or F.dg_dmu is None:
        raise MissingDerivatives(f"{F.label} needs closed-form x and measure derivatives")
    x = np.atleast_1d(np.asarray(x, dtype=float))[None, :]
    d = x.shape[1]
    dFx = np.asarray(F.dg_dx(x, mu), dtype=float).reshape(d)
    drift_x = float(dFx @ cs.b(x, mu)[0])
    lions = np.asarray(F.dg_dmu(x, mu, mu.points), dtype=float).reshape(mu.size, d)
    drift_mu = float(mu.weights @ np.sum(lions * cs.b(mu.points, mu), axis=1))

    lower = max(lm.truncation_eps, eps_L)
    rule = nu_rule(lm, lower, lm.R0, cs.bottom.breakpoints)
    nq = rule.nodes.shape[0]
    jump_x = 0.0
    if nq:
        xr = np.repeat(x, nq, axis=0)
        cx = cs.c(xr, rule.nodes, mu)
        integrand = F(xr + cx, mu) - F(x, mu)[0] - cx @ dFx
        jump_x = float(rule.weights @ integrand)

    jump_mu = 0.0
    if nq and F.flat is not None:
        n = mu.size
        ys = np.repeat(mu.points, nq, axis=0)
        us = np.tile(rule.nodes, n)
        cy = cs.c(ys, us, mu)
        lions_rep = np.repeat(lions, nq, axis=0)
        integrand = F.flat(x, mu, ys + cy) - F.flat(x, mu, ys) - np.sum(lions_rep * cy, axis=1)
        jump_mu = float(mu.weights @ (integrand.reshape(n, nq) @ rule.weights))
    elif nq:
        raise MissingDerivatives(f"{F.label} needs its flat derivative for the law-jump term")

    interval = 0.0
    if lm.truncation_eps < lower:
        tail = nu_rule(lm, lm.truncation_eps, lower)
        ct = cs.c(np.repeat(x, tail.nodes.shape[0], axis=0), tail.nodes, mu)
        if hess_bound is None:
            hess_bound = _hessian_probe(F, x, mu)
        interval = 0.5 * hess_bound * float(tail.weights @ np.sum(ct**2, axis=1))
    terms = dict(drift_x=drift_x, drift_mu=drift_mu, jump_x=jump_x, jump_mu=jump_mu)
    return GeneratorValue(drift_x + drift_mu + jump_x + jump_mu, interval, terms)


def _hessian_probe(F, x, mu, step=1e-4) -> float:
    d = x.shape[1]
    best = 0.0
    for i in range(d):
        e = np.zeros((1, d))
        e[0, i] = step
        val = (F(x + e, mu)[0] - 2 * F(x, mu)[0] + F(x - e, mu)[0]) / step**2
        best = max(best, abs(val))
    return best


# ------------------------------------------------------------------ PDE residual

@dataclass
class ResidualReport:
    residual: float
    se: float
    replicas: np.ndarray
    dt: float
    quadrature_interval: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return abs(self.residual) <= self.tolerance


def _residual_replica(q: PdeQuery, dt: float, seed: int) -> float:
    cs, lm = q.cs, q.lm
    grid = uniform_grid(q.t + dt, q.h)
    k_lo = int(round((q.t - dt) / q.h))
    k_mid = int(round(q.t / q.h))
    k_hi = len(grid) - 1
    theta = sample_initial(q.theta, q.n_particles, seed)
    law, _ = simulate_particle_system(cs, lm, None, q.n_particles, grid, seed, x0=theta, record="none")
    mu0 = law.measures[0]
    sub = grid[: k_mid + 1]
    v = q.x[None, :]
    bank = build_bank(cs, lm, law, sub, v, q.bank_size, seed)
    x0 = np.broadcast_to(q.x, (q.n_paths, q.x.shape[0]))
    full = run_paths(cs, lm, x0, law, grid, seed, tag="residual", record=np.array([k_lo, k_hi]), threads=q.threads)
    wb = simulate_weights(cs, lm, q.x, law, sub, q.n_paths, seed, bank=bank, tag="residual", threads=q.threads)
    g_lo = q.g(full.out.X_nodes[0], law.at(grid[k_lo]))
    g_hi = q.g(full.out.X_nodes[1], law.at(grid[k_hi]))
    time_diff = (g_hi - g_lo) / (grid[k_hi] - grid[k_lo])
    g_mid = q.g(wb.X, law.at(grid[k_mid]))
    grad_x = g_mid * wb.weights["Z1"][:, 0]
    g1, G, G_prime = q.g.separable
    m_t = float(law.at(grid[k_mid]).mean[0])
    tangent_mean = (bank.summary.jv_mean[-1] + bank.summary.yth_mean[-1])[0, 0, 0]
    grad_mu = np.asarray(g1(wb.X[:, 0]), dtype=float) * wb.weights["Zmu"][:, 0, 0] + G_prime(m_t) * tangent_mean
    b_x = float(cs.b(v, mu0)[0, 0])
    b_mean = float(mu0.expect(cs.b(mu0.points, mu0)[:, 0]))
    ok = ~wb.rejected
    return float(time_diff.mean() - np.mean(grad_x[ok]) * b_x - np.mean(grad_mu[ok]) * b_mean)


def pde_residual(q: PdeQuery, dt: float = 0.01, replicas: int = 8) -> ResidualReport:
    """(d/dt - L) U at (t, x, theta) with U frozen to its first-order expansion.

    The time derivative is a central difference on common paths; L acts on
    the affine surrogate U + dU/dx (x' - x) + E[dU/dmu (v') - ...], whose
    gradients come from the integration-by-parts weights, so the jump terms
    of L vanish identically.  Independent replicas give the error bar.
    """
    if q.g.separable is None:
        raise UnsupportedTerminal(f"{q.g.label} is outside the separable family")
    if q.theta is None:
        raise ValueError("an initial law is required")
    vals = np.array([_residual_replica(q, dt, q.seed * 1000 + r) for r in range(replicas)])
    res = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(replicas)) if replicas > 1 else float("inf")
    tol = 3 * se + dt**2
    return ResidualReport(res, se, vals, dt, 0.0, tol)


# ------------------------------------------------------------------ semigroup and boundary

@dataclass
class SemigroupReport:
    direct: Estimate
    restarted: Estimate
    gap: float
    combined_se: float


def check_semigroup(q: PdeQuery, shift: float) -> SemigroupReport:
    """U(t + shift, x, theta) against E[U(t, X_shift, [X_shift])] with a restart at ``shift``."""
    cs, lm = q.cs, q.lm
    total = q.t + shift
    grid = uniform_grid(total, q.h)
    k_s = int(round(shift / q.h))
    theta = sample_initial(q.theta, q.n_particles, q.seed)
    law, particles = simulate_particle_system(cs, lm, None, q.n_particles, grid, q.seed, x0=theta,
                                              record=np.array([k_s]))
    x0 = np.broadcast_to(q.x, (q.n_paths, q.x.shape[0]))
    direct = run_paths(cs, lm, x0, law, grid, q.seed, tag="semigroup", record=np.array([k_s, len(grid) - 1]),
                       threads=q.threads)
    d_vals = q.g(direct.out.X, law.at(total))
    val, se = batch_means(d_vals)
    d_est = Estimate(float(val), math.hypot(float(se), _law_part_se(q.g, law.at(total))))

    tail = grid[k_s:]
    restart_seed = q.seed + 7919
    law2, _ = simulate_particle_system(cs, lm, None, q.n_particles, tail, restart_seed,
                                       x0=particles.out.X_nodes[0], record="none", tag="particles_restart")
    again = run_paths(cs, lm, direct.out.X_nodes[0], law2, tail, restart_seed, tag="semigroup_restart",
                      threads=q.threads)
    r_vals = q.g(again.out.X, law2.at(total))
    val, se = batch_means(r_vals)
    r_est = Estimate(float(val), math.hypot(float(se), _law_part_se(q.g, law2.at(total))))
    return SemigroupReport(d_est, r_est, abs(d_est.value - r_est.value), math.hypot(d_est.se, r_est.se))


def boundary_gaps(q: PdeQuery, t_list: Sequence[float]) -> np.ndarray:
    """|U(t, x, theta) - g(x, theta)| for each t, all from one set of paths."""
    cs, lm = q.cs, q.lm
    t_arr = np.asarray(t_list, dtype=float)
    grid = uniform_grid(float(t_arr.max()), q.h)
    idx = np.array([int(round(t / q.h)) for t in t_arr])
    law = _law(q, grid)
    x0 = np.broadcast_to(q.x, (q.n_paths, q.x.shape[0]))
    batch = run_paths(cs, lm, x0, law, grid, q.seed, tag="boundary", record=idx, threads=q.threads)
    g0 = q.g(q.x[None, :], law.measures[0])[0]
    return np.array([abs(float(np.mean(q.g(batch.out.X_nodes[i], law.at(grid[k])))) - g0)
                     for i, k in enumerate(idx)])


# ------------------------------------------------------------------ chain rule

@dataclass
class ChainRuleReport:
    lhs: float
    rhs: float
    drift_term: float
    jump_term: float
    se: float
    gap: float
    mode: str


def law_jump_term(F, mu: EmpiricalMeasure, cs, lm: LevyModel, mode: str = "flat") -> float:
    """Jump integrand of the chain rule at one node.

    ``flat``: sum_i w_i int [dF/dm(y_i + c) - dF/dm(y_i) - dF/dmu(y_i) c] nu(du).
    ``common_shift``: int [F(mu moved by c) - F(mu) - E_mu[dF/dmu c]] nu(du),
    moving every atom at once with the same mark.
    """
    rule = nu_rule(lm, breakpoints=cs.bottom.breakpoints)
    nq = rule.nodes.shape[0]
    if nq == 0:
        return 0.0
    n = mu.size
    lions = np.asarray(F.lions_derivative(mu, mu.points), dtype=float).reshape(n)
    if mode == "flat":
        ys = np.repeat(mu.points, nq, axis=0)
        us = np.tile(rule.nodes, n)
        cy = cs.c(ys, us, mu)[:, 0]
        integrand = (np.asarray(F.flat_derivative(mu, ys + cy[:, None])) - np.asarray(F.flat_derivative(mu, ys))
                     - np.repeat(lions, nq) * cy)
        return float(mu.weights @ (integrand.reshape(n, nq) @ rule.weights))
    if mode == "common_shift":
        vals = np.empty(nq)
        for j, u in enumerate(rule.nodes):
            cy = cs.c(mu.points, np.full(n, u), mu)
            vals[j] = F.evaluate(mu.with_points(mu.points + cy)) - F.evaluate(mu) - float(mu.weights @ (lions * cy[:, 0]))
        return float(rule.weights @ vals)
    raise ValueError(f"unknown mode {mode!r}")


def verify_chain_rule(F, cs, lm: LevyModel, theta, T: float, n_particles: int, h: float, seed: int, *,
                      mode: str = "flat") -> ChainRuleReport:
    """F(mu_T) - F(mu_0) from a particle law flow against the time integral of
    E[dF/dmu b] plus the law-jump term.

    The error bar comes from the per-particle martingale parts
    sum_k dF/dmu(mu_k, X_k^i) (X_{k+1}^i - X_k^i - h b(X_k^i, mu_k)).
    """
    grid = uniform_grid(T, h)
    law, particles = simulate_particle_system(cs, lm, theta, n_particles, grid, seed, record="all")
    X = particles.out.X_nodes
    lhs = F.evaluate(law.measures[-1]) - F.evaluate(law.measures[0])
    drift, jump = 0.0, 0.0
    xi = np.zeros(n_particles)
    for k in range(len(grid) - 1):
        mu = law.at(grid[k])
        dk = grid[k + 1] - grid[k]
        lions = np.asarray(F.lions_derivative(mu, X[k]), dtype=float).reshape(n_particles)
        b = cs.b(X[k], mu)[:, 0]
        drift += dk * float(mu.weights @ (lions * b))
        jump += dk * law_jump_term(F, mu, cs, lm, mode)
        xi += lions * (X[k + 1, :, 0] - X[k, :, 0] - dk * b)
    rhs = drift + jump
    se = float(xi.std(ddof=1) / math.sqrt(n_particles))
    return ChainRuleReport(float(lhs), float(rhs), drift, jump, se, float(abs(lhs - rhs)), mode)


def write_pde_json(path: str | Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
