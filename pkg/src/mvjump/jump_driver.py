"""Poisson random measure with a truncated stable-like intensity.

The jump intensity is nu(du) = k |u|^(-1-alpha) du on 0 < |u| <= R0 plus an
optional finite list of atoms.  Jumps with |u| < eps are dropped.

Random streams are derived from a root seed by ``substream`` which keys a
``numpy.random.SeedSequence`` on (tag, block, window, purpose).  Paths are
grouped in fixed-size blocks and time is cut in fixed windows, so the events
seen by a path never depend on the time grid, on how many paths are
simulated alongside it, or on how many workers run the blocks.
"""

from __future__ import annotations

import math
import warnings
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .errors import InvalidWindow, NonConvergentLimit, QuadratureFailure

DEFAULT_BLOCK = 8192
DEFAULT_WINDOW = 1.0 / 64.0


def _psi_square(u):
    return np.square(u)


@dataclass(frozen=True)
class LevyModel:
    """Stable-like jump intensity truncated at ``truncation_eps``.

    ``finite_part`` is a tuple of (location, rate) atoms.  ``psi`` is the
    ellipticity profile (default u**2) and ``exponent_a`` the matching
    Assumption-a exponent, alpha/2 for the default profile.
    """

    alpha: float
    k: float = 1.0
    truncation_eps: float = 1e-3
    R0: float = 1.0
    finite_part: tuple = ()
    psi: Callable = _psi_square
    psi_name: str = "u2"
    exponent_a: float | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 2.0:
            raise ValueError(f"alpha must lie in (0, 2), got {self.alpha}")
        if self.k < 0:
            raise ValueError("scale k must be nonnegative")
        if not 0.0 < self.truncation_eps < self.R0:
            raise ValueError("truncation_eps must lie in (0, R0)")
        atoms = tuple((float(loc), float(rate)) for loc, rate in self.finite_part)
        if any(rate < 0 for _, rate in atoms):
            raise ValueError("atom rates must be nonnegative")
        object.__setattr__(self, "finite_part", atoms)
        if self.exponent_a is None and self.psi_name == "u2":
            object.__setattr__(self, "exponent_a", self.alpha / 2.0)

    @property
    def lambda_eps(self) -> float:
        """Mass of the truncated stable part, 2k(eps^-a - R0^-a)/a."""
        return lambda_eps(self.alpha, self.k, self.truncation_eps, self.R0)

    @property
    def atom_rate(self) -> float:
        return float(sum(rate for _, rate in self.finite_part))

    @property
    def total_rate(self) -> float:
        return self.lambda_eps + self.atom_rate

    @property
    def symmetric(self) -> bool:
        """True when the atoms (if any) come in mirrored pairs of equal rate."""
        atoms = sorted(self.finite_part)
        mirrored = sorted((-loc, rate) for loc, rate in self.finite_part)
        return all(abs(a[0] - b[0]) < 1e-15 and abs(a[1] - b[1]) < 1e-15 for a, b in zip(atoms, mirrored))

    def density(self, u):
        """Density of the stable part on eps <= |u| <= R0 (zero elsewhere)."""
        a = np.abs(np.asarray(u, dtype=float))
        inside = (a >= self.truncation_eps) & (a <= self.R0)
        return np.where(inside, self.k * np.power(np.where(inside, a, 1.0), -1.0 - self.alpha), 0.0)


def lambda_eps(alpha: float, k: float, eps: float, R0: float = 1.0) -> float:
    return 2.0 * k * (eps ** (-alpha) - R0 ** (-alpha)) / alpha


@dataclass(frozen=True)
class JumpEvent:
    time: float
    mark: float
    from_atom: bool = False


# ---------------------------------------------------------------- streams

def _tag_code(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    return zlib.crc32(str(tag).encode("utf-8"))


def substream(root_seed: int, *key) -> np.random.Generator:
    """Independent generator for ``key`` (strings are hashed with CRC32)."""
    seq = np.random.SeedSequence(int(root_seed), spawn_key=tuple(_tag_code(k) for k in key))
    return np.random.Generator(np.random.PCG64(seq))


# ---------------------------------------------------------------- sampling

def _stable_magnitudes(lm: LevyModel, v: np.ndarray) -> np.ndarray:
    e_a = lm.truncation_eps ** (-lm.alpha)
    r_a = lm.R0 ** (-lm.alpha)
    return np.power(e_a - v * (e_a - r_a), -1.0 / lm.alpha)


def sample_marks(lm: LevyModel, v: np.ndarray, sign_draw: np.ndarray, cat_draw: np.ndarray | None = None):
    """Map uniform variates to marks.  Returns (marks, from_atom flags)."""
    marks = _stable_magnitudes(lm, v) * np.where(sign_draw < 0.5, -1.0, 1.0)
    atom_flags = np.zeros(marks.shape, dtype=bool)
    if lm.finite_part and cat_draw is not None:
        rates = np.array([lm.lambda_eps] + [r for _, r in lm.finite_part])
        cdf = np.cumsum(rates) / rates.sum()
        cat = np.minimum(np.searchsorted(cdf, cat_draw, side="right"), len(rates) - 1)
        locs = np.array([0.0] + [loc for loc, _ in lm.finite_part])
        atom_flags = cat > 0
        marks = np.where(atom_flags, locs[cat], marks)
    return marks, atom_flags


def sample_jumps(lm: LevyModel, t0: float, t1: float, rng: np.random.Generator) -> list[JumpEvent]:
    """Jump events of one path on [t0, t1], sorted by time."""
    if not t0 < t1:
        raise InvalidWindow(f"empty window [{t0}, {t1}]")
    rate = lm.total_rate
    if rate <= 0.0:
        return []
    n = int(rng.poisson(rate * (t1 - t0)))
    times = np.sort(t0 + (t1 - t0) * rng.random(n))
    marks, flags = sample_marks(lm, rng.random(n), rng.random(n), rng.random(n) if lm.finite_part else None)
    return [JumpEvent(float(t), float(m), bool(f)) for t, m, f in zip(times, marks, flags)]


@dataclass
class StepEvents:
    """Events of one time step for a population, sorted by (path, time)."""

    path: np.ndarray
    time: np.ndarray
    mark: np.ndarray
    from_atom: np.ndarray
    rank: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.rank is None:
            self.rank = _ranks(self.path)

    @property
    def size(self) -> int:
        return self.path.shape[0]


def _ranks(path: np.ndarray) -> np.ndarray:
    """Position of each event inside its path group (input sorted by path)."""
    n = path.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    start = np.ones(n, dtype=bool)
    start[1:] = path[1:] != path[:-1]
    idx = np.arange(n)
    first = np.maximum.accumulate(np.where(start, idx, 0))
    return idx - first


class EventFeed:
    """Jump events for the global path range [first_path, first_path + n_paths).

    Events are generated per (block, window) from keyed streams; a path's
    events depend only on (root_seed, tag, global path index).
    """

    def __init__(self, lm: LevyModel, root_seed: int, tag, n_paths: int, first_path: int = 0,
                 block_size: int = DEFAULT_BLOCK, window: float = DEFAULT_WINDOW):
        self.lm = lm
        self.root_seed = int(root_seed)
        self.tag = tag
        self.n_paths = int(n_paths)
        self.first_path = int(first_path)
        self.block_size = int(block_size)
        self.window = float(window)
        self._cache: dict[int, tuple] = {}

    def _window_events(self, w: int):
        if w in self._cache:
            return self._cache[w]
        lm = self.lm
        B = self.block_size
        lo_g, hi_g = self.first_path, self.first_path + self.n_paths
        paths, times, marks, flags = [], [], [], []
        rate = lm.total_rate * self.window
        for b in range(lo_g // B, (hi_g - 1) // B + 1 if self.n_paths else 0):
            lo = max(lo_g - b * B, 0)
            hi = min(hi_g - b * B, B)
            if rate <= 0.0:
                continue
            counts = substream(self.root_seed, self.tag, b, w, 0).poisson(rate, B)
            csum = np.concatenate(([0], np.cumsum(counts)))
            n_pre, n_end = int(csum[lo]), int(csum[hi])
            take = slice(n_pre, n_end)
            t = substream(self.root_seed, self.tag, b, w, 1).random(n_end)[take]
            v = substream(self.root_seed, self.tag, b, w, 2).random(n_end)[take]
            s = substream(self.root_seed, self.tag, b, w, 3).random(n_end)[take]
            cat = substream(self.root_seed, self.tag, b, w, 4).random(n_end)[take] if lm.finite_part else None
            m, f = sample_marks(lm, v, s, cat)
            local = np.repeat(np.arange(lo, hi), counts[lo:hi]) + b * B - lo_g
            paths.append(local)
            times.append((w + t) * self.window)
            marks.append(m)
            flags.append(f)
        if paths:
            p = np.concatenate(paths)
            t = np.concatenate(times)
            m = np.concatenate(marks)
            f = np.concatenate(flags)
            order = np.argsort(t, kind="stable")
            out = (p[order], t[order], m[order], f[order])
        else:
            out = (np.zeros(0, np.int64), np.zeros(0), np.zeros(0), np.zeros(0, bool))
        self._cache[w] = out
        return out

    def events(self, t_a: float, t_b: float) -> StepEvents:
        """Events with t_a < time <= t_b, sorted by (path, time)."""
        w0 = int(math.floor(t_a / self.window))
        w1 = int(math.floor(t_b / self.window))
        for w in [w for w in self._cache if w < w0]:
            del self._cache[w]
        chunks = []
        for w in range(w0, w1 + 1):
            p, t, m, f = self._window_events(w)
            i0 = np.searchsorted(t, t_a, side="right")
            i1 = np.searchsorted(t, t_b, side="right")
            if i1 > i0:
                chunks.append((p[i0:i1], t[i0:i1], m[i0:i1], f[i0:i1]))
        if not chunks:
            return StepEvents(np.zeros(0, np.int64), np.zeros(0), np.zeros(0), np.zeros(0, bool))
        p, t, m, f = (np.concatenate(z) for z in zip(*chunks))
        order = np.lexsort((t, p))
        return StepEvents(p[order], t[order], m[order], f[order])


# ---------------------------------------------------------------- quadrature

@dataclass(frozen=True)
class NuRule:
    """Fixed quadrature rule: sum(weights * f(nodes)) ~ integral of f against nu."""

    nodes: np.ndarray
    weights: np.ndarray

    def integrate(self, values: np.ndarray) -> np.ndarray:
        return np.tensordot(self.weights, values, axes=(0, 0))


def nu_rule(lm: LevyModel, lower: float | None = None, upper: float | None = None,
            breakpoints: Sequence[float] = (), nodes_per_panel: int = 24,
            include_atoms: bool = True) -> NuRule:
    """Gauss-Legendre rule in log|u| over lower <= |u| <= upper, both signs."""
    lo = lm.truncation_eps if lower is None else lower
    hi = lm.R0 if upper is None else upper
    nodes, weights = [], []
    if lm.k > 0 and hi > lo:
        cuts = sorted({math.log(lo), math.log(hi), *[math.log(b) for b in breakpoints if lo < b < hi]})
        edges = []
        for a, b in zip(cuts[:-1], cuts[1:]):
            n_sub = max(1, int(math.ceil((b - a) / 1.0)))
            edges.extend(np.linspace(a, b, n_sub + 1)[:-1].tolist())
        edges.append(cuts[-1])
        gx, gw = np.polynomial.legendre.leggauss(nodes_per_panel)
        for a, b in zip(edges[:-1], edges[1:]):
            s = 0.5 * (b - a) * gx + 0.5 * (b + a)
            ws = 0.5 * (b - a) * gw * lm.k * np.exp(-lm.alpha * s)
            mag = np.exp(s)
            nodes.extend([mag, -mag])
            weights.extend([ws, ws])
    if include_atoms and lm.finite_part:
        nodes.append(np.array([loc for loc, _ in lm.finite_part]))
        weights.append(np.array([rate for _, rate in lm.finite_part]))
    if not nodes:
        return NuRule(np.zeros(0), np.zeros(0))
    return NuRule(np.concatenate(nodes), np.concatenate(weights))


def integrate_nu(lm: LevyModel, f: Callable[[float], float], lower: float | None = None,
                 upper: float | None = None, rtol: float = 1e-8, breakpoints: Sequence[float] = ()) -> float:
    """Adaptive quadrature of a scalar f against the truncated measure (plus atoms)."""
    lo = lm.truncation_eps if lower is None else lower
    hi = lm.R0 if upper is None else upper
    total, err = 0.0, 0.0
    if lm.k > 0 and hi > lo:
        pts = sorted(math.log(b) for b in breakpoints if lo < b < hi) or None
        for sign in (1.0, -1.0):
            g = lambda s, sign=sign: f(sign * math.exp(s)) * lm.k * math.exp(-lm.alpha * s)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", integrate.IntegrationWarning)
                val, e = integrate.quad(g, math.log(lo), math.log(hi), epsabs=0.0, epsrel=rtol * 0.1,
                                        limit=500, points=pts)
            total += val
            err += e
    for loc, rate in lm.finite_part:
        total += rate * f(loc)
    if err > rtol * max(abs(total), 1.0):
        raise QuadratureFailure(f"quadrature error {err:.2e} above tolerance (value {total:.6g})")
    return total


def compensator_drift(lm: LevyModel, cs, x, mu) -> np.ndarray:
    """Integral of c(x, u, mu) over |u| >= eps against nu."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = x.shape[0]
    if cs.c_odd_in_u and lm.symmetric:
        return np.zeros(d)
    xx = x[None, :]
    out = np.empty(d)
    for i in range(d):
        f = lambda u, i=i: float(cs.c(xx, np.array([u]), mu)[0, i])
        out[i] = integrate_nu(lm, f, breakpoints=getattr(cs.bottom, "breakpoints", ()))
    return out


# ---------------------------------------------------------------- Assumption a

def laplace_exponent_untruncated(lm: LevyModel, lam: float) -> float:
    """Integral of (exp(-lam psi(u)) - 1) against the untruncated stable part."""
    total = 0.0
    for sign in (1.0, -1.0):
        def g(s):
            u = sign * math.exp(s)
            return -math.expm1(-lam * float(lm.psi(u))) * lm.k * math.exp(-lm.alpha * s)
        s_hi = math.log(lm.R0)
        s_lo = s_hi - 60.0
        # split where lam * psi ~ 1 so quad sees the transition
        s_mid = min(max(-0.5 * math.log(max(lam, 1e-300)), s_lo + 1.0), s_hi - 1e-9)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            a, _ = integrate.quad(g, s_lo, s_mid, limit=400, epsabs=0.0, epsrel=1e-11)
            b, _ = integrate.quad(g, s_mid, s_hi, limit=400, epsabs=0.0, epsrel=1e-11)
        total -= a + b
    return total


def assumption_a_limit(lm: LevyModel, lambda_grid) -> tuple[float, float]:
    """Fit a and r1 from |integral of (e^{-lam psi}-1) nu| ~ |r1| lam^a."""
    lam = np.asarray(lambda_grid, dtype=float)
    if lam.size < 4 or np.any(np.diff(lam) <= 0) or lam[0] <= 0:
        raise ValueError("lambda_grid must be increasing, positive, with at least 4 points")
    if math.log10(lam[-1] / lam[0]) < 2.0:
        raise ValueError("lambda_grid must span at least two decades")
    vals = np.array([laplace_exponent_untruncated(lm, x) for x in lam])
    ll, lv = np.log(lam), np.log(np.abs(vals))
    half = lam.size // 2
    slope_lo = np.polyfit(ll[: half + 1], lv[: half + 1], 1)[0]
    slope_hi = np.polyfit(ll[half:], lv[half:], 1)[0]
    if abs(slope_hi - slope_lo) > 0.05:
        raise NonConvergentLimit(f"slope drifts from {slope_lo:.4f} to {slope_hi:.4f} across the grid")
    a_fit, intercept = np.polyfit(ll, lv, 1)
    r1_fit = float(np.sign(vals[-1]) * math.exp(intercept))
    return float(a_fit), r1_fit
