import math
from dataclasses import replace

import numpy as np
import pytest

from mvjump.coefficient_model import builtin_affine, builtin_linear_meanfield, lm1
from mvjump.errors import BankTooSmall, FixedPointDivergence
from mvjump.jump_driver import LevyModel
from mvjump.measure_kit import EmpiricalMeasure, dirac
from mvjump.mv_simulator import (LawFlow, run_paths, simulate_decoupled, simulate_particle_system, uniform_grid)
from mvjump.tangent_flows import (LinearJumpSpec, PrimedBank, build_bank, run_linear_jump_sde, simulate_dmu_flow,
                                  simulate_dx_flow)

from conftest import LIONS_ORACLE, measure_free_lm

LM = LevyModel(alpha=0.5)
BETA, BETA_BAR = 0.5, 0.25


def scalar(v):
    return np.array([[v]])


@pytest.fixture(scope="module")
def coarse_setup():
    grid = uniform_grid(1.0, 0.01)
    law, _ = simulate_particle_system(lm1(), LM, 0.0, 2000, grid, 1, record="terminal")
    base = simulate_decoupled(lm1(), LM, 1.0, law, grid, 3)
    return grid, law, base


class TestLinearEquation:
    def test_pure_integration(self, coarse_setup):
        _, law, base = coarse_setup
        spec = LinearJumpSpec(a0=np.zeros(1), a2_drift=lambda s, x, mu: np.ones(1))
        y = run_linear_jump_sde(spec, base, law)
        assert np.allclose(y[:, 0], base.grid, rtol=0, atol=1e-12)

    def test_exponential(self, coarse_setup):
        grid, law, base = coarse_setup
        spec = LinearJumpSpec(a0=np.ones(1), a1_drift=lambda s, x, mu: scalar(BETA))
        y = run_linear_jump_sde(spec, base, law)
        assert y[-1, 0] == pytest.approx((1 + 0.01 * BETA) ** 100, rel=1e-12)
        assert abs(y[-1, 0] - math.exp(BETA)) < 3e-3

    def test_self_coupled(self, coarse_setup):
        _, law, base = coarse_setup
        spec = LinearJumpSpec(a0=np.zeros(1), a1_drift=lambda s, x, mu: scalar(BETA),
                              a2_drift=lambda s, x, mu: np.array([BETA_BAR * math.exp(BETA * s)]),
                              a3_drift=lambda s, x, mu, v: scalar(BETA_BAR))
        y = run_linear_jump_sde(spec, base, law, primed_bank="self")
        assert abs(y[-1, 0] - LIONS_ORACLE) < 5e-3

    def test_bank_coupling_averages(self, coarse_setup):
        grid, law, base = coarse_setup
        K = len(grid)
        ramp = np.repeat(grid[:, None], 4, axis=1)[..., None]          # primed tangents equal to t
        bank = PrimedBank(X=np.zeros((K, 4, 1)), Y=ramp * np.array([0.5, 1.0, 1.5, 1.0])[None, :, None])
        spec = LinearJumpSpec(a0=np.zeros(1), a3_drift=lambda s, x, mu, v: scalar(1.0))
        y = run_linear_jump_sde(spec, base, law, primed_bank=bank)
        assert y[-1, 0] == pytest.approx(np.sum(0.01 * grid[:-1]), rel=1e-12)

    def test_jump_callbacks_fire_per_event(self, coarse_setup):
        _, law, base = coarse_setup
        spec = LinearJumpSpec(a0=np.zeros(1), a2_jump=lambda s, x, u, mu: np.ones(1))
        assert run_linear_jump_sde(spec, base, law)[-1, 0] == len(base.jumps)

    def test_coupled_needs_bank(self, coarse_setup):
        _, law, base = coarse_setup
        spec = LinearJumpSpec(a0=np.zeros(1), a3_drift=lambda s, x, mu, v: scalar(1.0))
        with pytest.raises(BankTooSmall):
            run_linear_jump_sde(spec, base, law)
        tiny = PrimedBank(np.zeros((len(base.grid), 1, 1)), np.zeros((len(base.grid), 1, 1)))
        with pytest.raises(BankTooSmall):
            run_linear_jump_sde(spec, base, law, primed_bank=tiny)


class TestStateTangent:
    def test_linear_model(self):
        grid = uniform_grid(1.0, 1e-3)
        law = LawFlow.constant(dirac(0.0), grid)
        base = simulate_decoupled(lm1(), LM, 1.0, law, grid, 2)
        dx = simulate_dx_flow(lm1(), LM, base, law)
        assert dx[0, 0, 0] == 1.0
        assert abs(dx[-1, 0, 0] - math.exp(0.5)) <= 1e-3

    def test_multiplicative_product(self):
        cs = builtin_affine([[0.0]], [[0.0]], [0.0], [[1.0]], alpha=0.5)
        grid = uniform_grid(1.0, 0.01)
        law = LawFlow.constant(dirac(0.0), grid)
        for seed in range(3):
            base = simulate_decoupled(cs, LM, 2.0, law, grid, seed)
            dx = simulate_dx_flow(cs, LM, base, law)
            assert dx[-1, 0, 0] == pytest.approx(np.prod([1 + ev.mark for ev in base.jumps]), rel=1e-12)
            assert base.X[-1, 0] == pytest.approx(2.0 * dx[-1, 0, 0], rel=1e-12)

    def test_shared_noise_difference(self):
        with pytest.warns(UserWarning):
            cs = builtin_linear_meanfield(0.3, 0.25, 1.0, 0.2, 0.0, alpha=0.5)
        grid = uniform_grid(1.0, 0.01)
        law = LawFlow.constant(dirac(0.5), grid)
        delta = 1e-4
        xs = np.array([[1.0 + delta], [1.0 - delta]])
        fd_x = run_paths(cs, LM, xs[:1], law, grid, 4, record="terminal").X_T[0, 0]
        bd_x = run_paths(cs, LM, xs[1:], law, grid, 4, record="terminal").X_T[0, 0]
        base = simulate_decoupled(cs, LM, 1.0, law, grid, 4)
        dx = simulate_dx_flow(cs, LM, base, law)[-1, 0, 0]
        assert (fd_x - bd_x) / (2 * delta) == pytest.approx(dx, rel=1e-4)

    def test_matches_vectorized_scheme(self):
        grid = uniform_grid(1.0, 0.01)
        law = LawFlow.constant(dirac(0.0), grid)
        with pytest.warns(UserWarning):
            cs = builtin_linear_meanfield(0.3, 0.0, 1.0, 0.2, 0.0, alpha=0.5)
        batch = run_paths(cs, LM, np.full((3, 1), 0.7), law, grid, 5, record="all", record_events=True,
                          track_J=True, record_tangents=True)
        for i in range(3):
            replay = simulate_dx_flow(cs, LM, batch[i], law)
            assert np.allclose(replay, batch.out.J_nodes[:, i], rtol=1e-10, atol=1e-12)


class TestLionsTangent:
    def test_measure_free_is_zero(self, coarse_setup):
        grid, _, _ = coarse_setup
        cs = measure_free_lm()
        law, _ = simulate_particle_system(cs, LM, 0.0, 200, grid, 1, record="terminal")
        base = simulate_decoupled(cs, LM, 1.0, law, grid, 3)
        ts = simulate_dmu_flow(cs, LM, base, law, [[0.0], [1.0]], 64, 5)
        assert all(np.all(path == 0.0) for path in ts.dmu.values())

    def test_linear_model(self):
        grid = uniform_grid(1.0, 1e-3)
        law, _ = simulate_particle_system(lm1(), LM, 0.0, 2000, grid, 1, record="terminal")
        base = simulate_decoupled(lm1(), LM, 1.0, law, grid, 3)
        ts = simulate_dmu_flow(lm1(), LM, base, law, [[0.0], [2.0]], 256, 5)
        for path in ts.dmu.values():
            assert path[0, 0, 0] == 0.0
            assert abs(path[-1, 0, 0] - LIONS_ORACLE) <= 1e-2
        assert ts.dx[0, 0, 0] == 1.0

    def test_general_route_agrees(self, coarse_setup):
        _, law, base = coarse_setup
        general = replace(lm1(), lions_v_free=False)
        a = simulate_dmu_flow(general, LM, base, law, [[0.0]], 64, 5).dmu[(0.0,)]
        b = simulate_dmu_flow(lm1(), LM, base, law, [[0.0]], 64, 5).dmu[(0.0,)]
        assert np.allclose(a, b, rtol=1e-10, atol=1e-13)

    def test_frechet_direction(self):
        """Moving one atom of a 64-atom initial cloud shifts the mean by delta/64 times the Lions tangent."""
        grid = uniform_grid(1.0, 0.01)
        cloud = np.random.default_rng(0).normal(size=64)
        copies, j, delta = 32, 5, 0.05
        x0 = np.tile(cloud, copies)[:, None]
        moved = x0.copy()
        moved[j::64] += delta
        law, _ = simulate_particle_system(lm1(), LM, None, x0.shape[0], grid, 6, x0=x0, record="terminal")
        law_moved, _ = simulate_particle_system(lm1(), LM, None, x0.shape[0], grid, 6, x0=moved, record="terminal")
        n = 4000
        start = np.ones((n, 1))
        a = run_paths(lm1(), LM, start, law, grid, 7, record="terminal").X_T[:, 0]
        b = run_paths(lm1(), LM, start, law_moved, grid, 7, record="terminal").X_T[:, 0]
        ratio = (b - a) / (delta / 64)
        base = simulate_decoupled(lm1(), LM, 1.0, law, grid, 7)
        lions = simulate_dmu_flow(lm1(), LM, base, law, [[cloud[j]]], 64, 8).dmu[(float(cloud[j]),)][-1, 0, 0]
        se = ratio.std(ddof=1) / math.sqrt(n)
        assert abs(ratio.mean() - lions) <= 3 * se + 0.01

    def test_stable_under_bank_doubling(self, coarse_setup):
        _, law, base = coarse_setup
        small = simulate_dmu_flow(lm1(), LM, base, law, [[0.0]], 128, 5).dmu[(0.0,)]
        large = simulate_dmu_flow(lm1(), LM, base, law, [[0.0]], 256, 9).dmu[(0.0,)]
        assert 0.9 <= np.max(np.abs(small)) / np.max(np.abs(large)) <= 1.1

    def test_bank_too_small(self, coarse_setup):
        grid, law, base = coarse_setup
        with pytest.raises(BankTooSmall):
            simulate_dmu_flow(lm1(), LM, base, law, [[0.0]], 16, 5)

    def test_strong_coupling_diverges(self):
        cs = builtin_linear_meanfield(0.5, 5.0, 1.0, 0.0, 0.0, alpha=0.5)
        grid = uniform_grid(1.0, 0.01)
        law, _ = simulate_particle_system(cs, LM, 0.0, 500, grid, 1, record="terminal")
        with pytest.raises(FixedPointDivergence):
            build_bank(cs, LM, law, grid, [[0.0]], 64, 1, sweeps=3)

    def test_sweeps_contract(self, coarse_setup):
        grid, law, _ = coarse_setup
        report = build_bank(lm1(), LM, law, grid, [[0.0]], 64, 1, sweeps=3)
        assert report.sweep_changes[2] < report.sweep_changes[1] < report.sweep_changes[0]

    def test_csv(self, coarse_setup, tmp_path):
        _, law, base = coarse_setup
        ts = simulate_dmu_flow(lm1(), LM, base, law, [[0.0], [1.5]], 32, 5)
        path = tmp_path / "tangent.csv"
        ts.write_csv(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "t,dx,dmu(0.0),dmu(1.5)"
        assert len(lines) == len(base.grid) + 1
        assert [float(v) for v in lines[1].split(",")] == [0.0, 1.0, 0.0, 0.0]
