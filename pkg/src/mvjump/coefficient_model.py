"""SDE coefficients, their derivatives and the mark-space Dirichlet structure.

All coefficient callables are vectorized over paths: ``x`` has shape (n, d),
marks ``u`` shape (n,), Lions arguments ``v`` shape (n, d).  Matrix-valued
outputs have shape (n, d, d) with index order [component, direction].
Second-order tensors have shape (n, d, d, d) with the differentiated
direction last.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import DerivativeMismatch
from .measure_kit import EmpiricalMeasure


class EllipticityWarning(UserWarning):
    """The jump amplitude may vanish, so the carré du champ can degenerate."""


# ------------------------------------------------------------------ bottom structure

@dataclass(frozen=True)
class StableBottom:
    """Dirichlet structure on the mark space matched to |u|^(-1-alpha) du.

    Gradient f_flat(u, r) = kappa(u) u f'(u) xi(r), so
    gamma[f] = w(u) f'^2 with w = kappa^2 u^2 and
    a[f] = (w f'' + eta f') / 2 with eta = (1-alpha) kappa^2 u + 2 kappa kappa' u^2.

    kappa is 1 up to ``taper_start`` and falls to 0 at R0 along a half cosine.
    With ``taper_start=None`` kappa is identically 1.
    """

    alpha: float
    R0: float = 1.0
    taper_start: Optional[float] = None

    @property
    def breakpoints(self) -> tuple:
        return () if self.taper_start is None else (self.taper_start,)

    def kappa(self, u):
        u = np.asarray(u, dtype=float)
        if self.taper_start is None:
            return np.ones_like(u), np.zeros_like(u)
        r1, r0 = self.taper_start, self.R0
        a = np.abs(u)
        z = np.clip((a - r1) / (r0 - r1), 0.0, 1.0)
        k = np.where(a <= r1, 1.0, 0.5 * (1.0 + np.cos(np.pi * z)))
        dk = np.where((a > r1) & (a < r0), -0.5 * np.pi / (r0 - r1) * np.sin(np.pi * z), 0.0) * np.sign(u)
        return k, dk

    def weight(self, u):
        k, _ = self.kappa(u)
        return k * k * np.square(u)

    def dweight(self, u):
        k, dk = self.kappa(u)
        u = np.asarray(u, dtype=float)
        return 2.0 * k * dk * u * u + 2.0 * k * k * u

    def drift(self, u):
        k, dk = self.kappa(u)
        u = np.asarray(u, dtype=float)
        return (1.0 - self.alpha) * k * k * u + 2.0 * k * dk * u * u

    def gamma(self, u, f_u):
        """Bottom carré du champ of a vector function with u-derivative f_u (n, d)."""
        w = self.weight(u)
        return w[:, None, None] * f_u[:, :, None] * f_u[:, None, :]

    def generator(self, u, f_u, f_uu):
        return 0.5 * (self.weight(u)[:, None] * f_uu + self.drift(u)[:, None] * f_u)

    def flat(self, u, f_u, r):
        k, _ = self.kappa(u)
        profile = np.asarray(xi(r))
        factor = float(profile) if profile.ndim == 0 else profile[:, None]
        return (k * np.asarray(u))[:, None] * f_u * factor


def xi(r):
    """Zero-mean, unit-variance profile on [0, 1]."""
    return math.sqrt(12.0) * (np.asarray(r, dtype=float) - 0.5)


def default_taper(R0: float = 1.0) -> float:
    return 0.5 * R0


# ------------------------------------------------------------------ coefficient set

@dataclass(frozen=True)
class GrowthMeta:
    lipschitz_b: float = 1.0
    lipschitz_c: float = 1.0
    jump_profile: Callable = field(default=lambda u: np.abs(u))
    notes: str = ""


@dataclass(frozen=True)
class CoefficientSet:
    """Drift b(x, mu), jump amplitude c(x, u, mu) and everything derived from them.

    ``gamma_c``, ``a_c`` and ``c_flat`` are built from ``dc_du``,
    ``d2c_du2`` and ``bottom`` when not given.  Second-order callables left
    as ``None`` are probed numerically before use and treated as zero only
    when the probe finds them negligible.
    """

    b: Callable
    c: Callable
    db_dx: Callable
    dc_dx: Callable
    dmu_b: Callable
    dmu_c: Callable
    dc_du: Callable
    bottom: StableBottom
    dim: int = 1
    gamma_c: Optional[Callable] = None
    a_c: Optional[Callable] = None
    c_flat: Optional[Callable] = None
    d2c_du2: Optional[Callable] = None
    d2b_dx2: Optional[Callable] = None
    d2c_dx2: Optional[Callable] = None
    d2c_dxdu: Optional[Callable] = None
    d2mu_b_dx: Optional[Callable] = None
    d2mu_c_dx: Optional[Callable] = None
    d2mu_c_du: Optional[Callable] = None
    c_odd_in_u: bool = False
    lions_v_free: bool = False
    measure_free: bool = False
    growth_meta: GrowthMeta = field(default_factory=GrowthMeta)
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        bottom = self.bottom
        dc_du, d2c_du2 = self.dc_du, self.d2c_du2

        if self.gamma_c is None:
            object.__setattr__(self, "gamma_c", lambda x, u, mu: bottom.gamma(u, dc_du(x, u, mu)))
        if self.a_c is None:
            def a_c(x, u, mu):
                g = dc_du(x, u, mu)
                g2 = d2c_du2(x, u, mu) if d2c_du2 is not None else np.zeros_like(g)
                return bottom.generator(u, g, g2)
            object.__setattr__(self, "a_c", a_c)
        if self.c_flat is None:
            object.__setattr__(self, "c_flat", lambda x, u, mu, r: bottom.flat(u, dc_du(x, u, mu), r))

    def with_bottom(self, bottom: StableBottom) -> "CoefficientSet":
        """Same coefficients paired with another mark-space structure."""
        return replace(self, bottom=bottom, gamma_c=None, a_c=None, c_flat=None)


def _bcast(mat: np.ndarray, n: int) -> np.ndarray:
    return np.broadcast_to(mat, (n,) + mat.shape)


def builtin_affine(B, B_bar, s0, S_x, S_m=None, b0=None, *, alpha: float = 1.0,
                   taper_start: Optional[float] = None, R0: float = 1.0, name: str = "affine") -> CoefficientSet:
    """b = B x + B_bar m(mu) + b0 and c = (s0 + S_x x + S_m m(mu)) u in R^d."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    d = B.shape[0]
    B_bar = np.asarray(B_bar, dtype=float).reshape(d, d)
    s0 = np.asarray(s0, dtype=float).reshape(d)
    S_x = np.asarray(S_x, dtype=float).reshape(d, d)
    S_m = np.zeros((d, d)) if S_m is None else np.asarray(S_m, dtype=float).reshape(d, d)
    b0 = np.zeros(d) if b0 is None else np.asarray(b0, dtype=float).reshape(d)
    zero3 = np.zeros((d, d, d))
    zero2 = np.zeros((d, d))

    def amp(x, mu):
        return s0 + x @ S_x.T + mu.mean @ S_m.T

    def b(x, mu):
        return x @ B.T + (B_bar @ mu.mean + b0)

    def c(x, u, mu):
        return amp(x, mu) * np.asarray(u)[:, None]

    def db_dx(x, mu):
        return _bcast(B, x.shape[0])

    def dc_dx(x, u, mu):
        return S_x[None] * np.asarray(u)[:, None, None]

    def dmu_b(x, mu, v):
        return _bcast(B_bar, x.shape[0])

    def dmu_c(x, u, mu, v):
        return S_m[None] * np.asarray(u)[:, None, None]

    def dc_du(x, u, mu):
        return amp(x, mu)

    def d2c_du2(x, u, mu):
        return np.zeros((x.shape[0], d))

    def d2c_dxdu(x, u, mu):
        return _bcast(S_x, x.shape[0])

    def d2mu_c_du(x, u, mu, v):
        return _bcast(S_m, x.shape[0])

    def zeros3(*args):
        return _bcast(zero3, args[0].shape[0])

    measure_free = not (np.any(B_bar) or np.any(S_m))
    lip = float(np.linalg.norm(B, 2) + np.linalg.norm(B_bar, 2))
    return CoefficientSet(
        b=b, c=c, db_dx=db_dx, dc_dx=dc_dx, dmu_b=dmu_b, dmu_c=dmu_c, dc_du=dc_du,
        d2c_du2=d2c_du2, d2b_dx2=zeros3, d2c_dx2=zeros3, d2c_dxdu=d2c_dxdu,
        d2mu_b_dx=zeros3, d2mu_c_dx=zeros3, d2mu_c_du=d2mu_c_du,
        bottom=StableBottom(alpha, R0, taper_start), dim=d,
        c_odd_in_u=True, lions_v_free=True, measure_free=measure_free,
        growth_meta=GrowthMeta(lipschitz_b=lip, lipschitz_c=float(np.linalg.norm(S_x, 2) + np.linalg.norm(S_m, 2)),
                               notes="affine family"),
        name=name,
        params=dict(B=B.tolist(), B_bar=B_bar.tolist(), s0=s0.tolist(), S_x=S_x.tolist(), S_m=S_m.tolist(),
                    b0=b0.tolist(), alpha=alpha, taper_start=taper_start, R0=R0),
    )


def builtin_linear_meanfield(beta: float, beta_bar: float, sigma: float, sigma_x: float, sigma_m: float, *,
                             alpha: float = 1.0, taper_start: Optional[float] = None,
                             R0: float = 1.0) -> CoefficientSet:
    """Scalar family b = beta x + beta_bar m, c = (sigma + sigma_x x + sigma_m m) u."""
    if sigma_x != 0.0:
        warnings.warn(
            f"jump amplitude vanishes at x = -(sigma + sigma_m m)/sigma_x (sigma_x={sigma_x}); "
            "the ellipticity condition fails there",
            EllipticityWarning,
            stacklevel=2,
        )
    cs = builtin_affine([[beta]], [[beta_bar]], [sigma], [[sigma_x]], [[sigma_m]], alpha=alpha,
                        taper_start=taper_start, R0=R0, name="linear_meanfield")
    return replace(cs, params=dict(beta=beta, beta_bar=beta_bar, sigma=sigma, sigma_x=sigma_x, sigma_m=sigma_m,
                                   alpha=alpha, taper_start=taper_start, R0=R0))


def lm1(alpha: float = 0.5, taper_start: Optional[float] = None) -> CoefficientSet:
    """The reference parameter set beta=0.5, beta_bar=0.25, sigma=1."""
    return builtin_linear_meanfield(0.5, 0.25, 1.0, 0.0, 0.0, alpha=alpha, taper_start=taper_start)


# ------------------------------------------------------------------ measure functionals

@dataclass(frozen=True)
class MeasureFunctional:
    """Scalar functional F(mu) = outer(m(mu)) of the first moment (d = 1).

    ``kind`` is ``"first_moment"`` (outer = identity) or
    ``"scalar_of_moment"``.  The Lions derivative is outer'(m) for every v
    and the flat derivative is outer'(m) y.
    """

    kind: str
    outer: Callable[[float], float] = lambda m: m
    outer_prime: Callable[[float], float] = lambda m: 1.0
    label: str = "m"

    def evaluate(self, mu: EmpiricalMeasure) -> float:
        return float(self.outer(float(mu.mean[0])))

    def lions_derivative(self, mu: EmpiricalMeasure, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return np.full(v.shape[:1] if v.ndim else (), float(self.outer_prime(float(mu.mean[0]))))

    def flat_derivative(self, mu: EmpiricalMeasure, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.ndim == 2:
            y = y[:, 0]
        return float(self.outer_prime(float(mu.mean[0]))) * y


def first_moment() -> MeasureFunctional:
    return MeasureFunctional("first_moment")


def scalar_of_moment(outer: Callable, outer_prime: Callable, label: str = "F(m)") -> MeasureFunctional:
    return MeasureFunctional("scalar_of_moment", outer, outer_prime, label)


def constant_functional(value: float) -> MeasureFunctional:
    return MeasureFunctional("scalar_of_moment", lambda m: value, lambda m: 0.0, f"const({value})")


# ------------------------------------------------------------------ validation

FD_STEP = 1e-5
VALIDATION_TOL = 1e-4


@dataclass
class ValidationReport:
    max_errors: dict
    worst_probe: dict
    tolerance: float = VALIDATION_TOL

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_errors.values())

    @property
    def max_error(self) -> float:
        return max(self.max_errors.values()) if self.max_errors else 0.0


def _rel_err(supplied, fd) -> float:
    supplied, fd = np.asarray(supplied, dtype=float), np.asarray(fd, dtype=float)
    return float(np.max(np.abs(supplied - fd) / np.maximum(1.0, np.abs(fd))))


def validate_coefficients(cs: CoefficientSet, probes: int = 16, seed: int = 0, *, raise_on_failure: bool = True,
                          n_atoms: int = 64, step: float = FD_STEP) -> ValidationReport:
    """Compare supplied derivatives with central finite differences.

    The measure direction moves one atom of a 64-atom cloud and divides by
    that atom's weight.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = np.random.default_rng(seed)
    d = cs.dim
    errors: dict = {}
    worst: dict = {}

    def record(name, err, probe):
        if err > errors.get(name, -1.0):
            errors[name] = err
            worst[name] = probe

    eps_u = 1e-3
    for p in range(probes):
        cloud = rng.normal(size=(n_atoms, d))
        mu = EmpiricalMeasure(cloud, np.full(n_atoms, 1.0 / n_atoms))
        x = rng.normal(size=(1, d))
        u = np.array([rng.choice([-1.0, 1.0]) * rng.uniform(eps_u, cs.bottom.R0)])
        j = int(rng.integers(n_atoms))
        v = cloud[j][None, :]
        probe = dict(x=x[0].tolist(), u=float(u[0]), atom=j)

        fd_b = np.empty((1, d, d))
        fd_c = np.empty((1, d, d))
        for l in range(d):
            e = np.zeros((1, d))
            e[0, l] = step
            fd_b[:, :, l] = (cs.b(x + e, mu) - cs.b(x - e, mu)) / (2 * step)
            fd_c[:, :, l] = (cs.c(x + e, u, mu) - cs.c(x - e, u, mu)) / (2 * step)
        record("db_dx", _rel_err(cs.db_dx(x, mu), fd_b), probe)
        record("dc_dx", _rel_err(cs.dc_dx(x, u, mu), fd_c), probe)

        fd_mb = np.empty((1, d, d))
        fd_mc = np.empty((1, d, d))
        w = mu.weights[j]
        for l in range(d):
            up, dn = cloud.copy(), cloud.copy()
            up[j, l] += step
            dn[j, l] -= step
            mu_up, mu_dn = mu.with_points(up), mu.with_points(dn)
            fd_mb[:, :, l] = (cs.b(x, mu_up) - cs.b(x, mu_dn)) / (2 * step * w)
            fd_mc[:, :, l] = (cs.c(x, u, mu_up) - cs.c(x, u, mu_dn)) / (2 * step * w)
        record("dmu_b", _rel_err(cs.dmu_b(x, mu, v), fd_mb), probe)
        record("dmu_c", _rel_err(cs.dmu_c(x, u, mu, v), fd_mc), probe)

        du = step * max(1.0, abs(u[0]))
        fd_cu = (cs.c(x, u + du, mu) - cs.c(x, u - du, mu)) / (2 * du)
        record("dc_du", _rel_err(cs.dc_du(x, u, mu), fd_cu), probe)
        if cs.d2c_du2 is not None:
            fd = (cs.dc_du(x, u + du, mu) - cs.dc_du(x, u - du, mu)) / (2 * du)
            record("d2c_du2", _rel_err(cs.d2c_du2(x, u, mu), fd), probe)
        if cs.d2c_dxdu is not None:
            fd = (cs.dc_dx(x, u + du, mu) - cs.dc_dx(x, u - du, mu)) / (2 * du)
            record("d2c_dxdu", _rel_err(cs.d2c_dxdu(x, u, mu), fd), probe)
        for name, first, args in (("d2b_dx2", cs.db_dx, (mu,)), ("d2c_dx2", cs.dc_dx, (u, mu))):
            supplied = getattr(cs, name)
            if supplied is None:
                continue
            fd = np.empty((1, d, d, d))
            for l in range(d):
                e = np.zeros((1, d))
                e[0, l] = step
                fd[..., l] = (first(x + e, *args) - first(x - e, *args)) / (2 * step)
            record(name, _rel_err(supplied(x, *args), fd), probe)

        gam = cs.gamma_c(x, u, mu)[0]
        sym_err = float(np.max(np.abs(gam - gam.T)))
        min_eig = float(np.min(np.linalg.eigvalsh(0.5 * (gam + gam.T))))
        record("gamma_c_psd", max(sym_err, -min_eig - 1e-12, 0.0), probe)

    report = ValidationReport(errors, worst)
    if raise_on_failure and not report.passed:
        name = max(errors, key=errors.get)
        raise DerivativeMismatch(name, worst[name], errors[name])
    return report
