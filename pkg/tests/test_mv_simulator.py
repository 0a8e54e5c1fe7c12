import math

import numpy as np
import pytest
from scipy import integrate

from mvjump.coefficient_model import builtin_affine, lm1
from mvjump.errors import BlowUp, LawFlowGap
from mvjump.jump_driver import LevyModel
from mvjump.measure_kit import EmpiricalMeasure, dirac, wasserstein2_1d
from mvjump.mv_simulator import (LawFlow, check_flow_property, moment_report, picard_law_iteration, read_jump_log,
                                 run_paths, simulate_decoupled, simulate_particle_system, sup_w2_gap,
                                 tail_probability, uniform_grid, write_jump_log)

from conftest import measure_free_lm, zero_model

LM = LevyModel(alpha=0.5)


def jump_second_moment(lm):
    """Integral of u^2 against the truncated intensity."""
    a = lm.alpha
    return 2 * lm.k * (lm.R0 ** (2 - a) - lm.truncation_eps ** (2 - a)) / (2 - a)


def normal_sampler(mean, sd):
    return lambda n, rng: mean + sd * rng.standard_normal(n)


class TestParticleSystem:
    def test_zero_model_keeps_initial_law(self):
        grid = uniform_grid(0.5, 0.05)
        law, batch = simulate_particle_system(zero_model(), LM, normal_sampler(0.0, 1.0), 200, grid, 1)
        first = law.measures[0]
        assert all(np.array_equal(mu.points, first.points) for mu in law.measures)
        assert np.array_equal(batch.out.X_nodes[-1], batch.out.X_nodes[0])

    def test_mean_and_second_moment(self):
        """Euler recursion for m and E X^2 of the linear model started at 1."""
        beta, beta_bar, h, n = 0.5, 0.25, 0.01, 10_000
        grid = uniform_grid(1.0, h)
        law, batch = simulate_particle_system(lm1(0.5), LM, 1.0, n, grid, 2, record="terminal")
        q = jump_second_moment(LM)
        m, s = 1.0, 1.0
        for _ in range(100):
            s = (1 + h * beta) ** 2 * s + 2 * (1 + h * beta) * h * beta_bar * m * m + (h * beta_bar * m) ** 2 + q * h
            m = (1 + h * (beta + beta_bar)) * m
        x = batch.X_T[:, 0]
        assert abs(x.mean() - m) <= 3 * x.std(ddof=1) / math.sqrt(n)
        assert abs(np.mean(x ** 2) - s) <= 3 * np.std(x ** 2, ddof=1) / math.sqrt(n)
        assert abs(x.mean() - math.exp(0.75)) <= 3 * x.std(ddof=1) / math.sqrt(n)
        # continuous-time second moment: S' = 2 beta S + 2 beta_bar m^2 + q with m = e^{0.75 t}
        rhs = lambda t, y: [(beta + beta_bar) * y[0], 2 * beta * y[1] + 2 * beta_bar * y[0] ** 2 + q]
        exact = integrate.solve_ivp(rhs, (0, 1), [1.0, 1.0], rtol=1e-10, atol=1e-12).y[1, -1]
        assert abs(s - exact) < 0.02 * exact
        assert law.measures[-1].mean[0] == pytest.approx(x.mean(), rel=1e-12)

    def test_refresh_grid(self):
        grid = uniform_grid(0.2, 0.01)
        law, _ = simulate_particle_system(lm1(), LM, 0.0, 50, grid, 1, refresh_times=grid[::5], record="terminal")
        assert np.allclose(law.grid, grid[::5].tolist() + ([] if grid[-1] in grid[::5] else [grid[-1]]))

    def test_needs_two_particles(self):
        with pytest.raises(ValueError):
            simulate_particle_system(lm1(), LM, 0.0, 1, uniform_grid(1, 0.1), 0)

    def test_step_limit(self):
        with pytest.raises(ValueError):
            simulate_particle_system(lm1(), LM, 0.0, 10, np.array([0.0, 0.5, 1.0]), 0)

    def test_blow_up(self):
        cs = builtin_affine([[1e6]], [[0.0]], [1.0], [[0.0]], alpha=0.5)
        with pytest.raises(BlowUp):
            simulate_particle_system(cs, LM, 1.0, 10, uniform_grid(1.0, 0.1), 0)

    def test_deterministic(self):
        grid = uniform_grid(0.5, 0.05)
        a, _ = simulate_particle_system(lm1(), LM, normal_sampler(0, 1), 300, grid, 4)
        b, _ = simulate_particle_system(lm1(), LM, normal_sampler(0, 1), 300, grid, 4)
        assert all(np.array_equal(x.points, y.points) for x, y in zip(a.measures, b.measures))

    def test_law_csv(self, tmp_path):
        law, _ = simulate_particle_system(lm1(), LM, 0.0, 100, uniform_grid(0.3, 0.1), 3, record="terminal")
        path = tmp_path / "law.csv"
        law.write_csv(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "t,mean,var,w2_to_prev" and len(lines) == 5
        row = [float(v) for v in lines[2].split(",")]
        assert row[3] == pytest.approx(wasserstein2_1d(law.measures[0], law.measures[1]), rel=1e-15)


class TestDecoupled:
    def test_frozen_point_masses_give_ode(self):
        grid = uniform_grid(1.0, 0.1)
        cs = builtin_affine([[0.3]], [[0.5]], [0.0], [[0.0]], alpha=0.5)
        law = LawFlow.constant(dirac(2.0), grid)
        path = simulate_decoupled(cs, LM, 1.0, law, grid, 0)
        x = 1.0
        for k in range(10):
            x = x + 0.1 * (0.3 * x + 0.5 * 2.0)
            assert path.X[k + 1, 0] == pytest.approx(x, rel=1e-14)
        assert path.jumps == [] or np.all(path.jump_states == path.jump_pre_states)

    def test_mean_against_centred_law(self):
        grid = uniform_grid(1.0, 0.01)
        law = LawFlow.constant(dirac(0.0), grid)
        n = 100_000
        x = run_paths(lm1(), LM, np.ones((n, 1)), law, grid, 5, record="terminal").X_T[:, 0]
        assert abs(x.mean() - math.exp(0.5)) <= 3 * x.std(ddof=1) / math.sqrt(n)

    def test_lipschitz_in_start(self):
        grid = uniform_grid(1.0, 0.01)
        law = LawFlow.constant(dirac(0.0), grid)
        a = run_paths(lm1(), LM, np.full((500, 1), 1.0), law, grid, 6, record="all").out.X_nodes
        b = run_paths(lm1(), LM, np.full((500, 1), 1.3), law, grid, 6, record="all").out.X_nodes
        sup = np.max(np.abs(a - b), axis=0)[:, 0]
        assert np.mean(sup) <= math.exp(0.5) * 0.3 + 1e-12
        assert np.allclose(sup, 0.3 * 1.005 ** 100, rtol=1e-10)

    def test_jumps_logged_and_replayable(self, tmp_path):
        grid = uniform_grid(0.5, 0.01)
        law = LawFlow.constant(dirac(0.0), grid)
        path = simulate_decoupled(lm1(), LM, 0.0, law, grid, 7)
        assert len(path.jumps) > 0
        times = [ev.time for ev in path.jumps]
        assert times == sorted(times)
        assert np.allclose(path.jump_states - path.jump_pre_states, np.array([[ev.mark] for ev in path.jumps]))
        log = tmp_path / "jumps.bin"
        write_jump_log(path, log)
        assert log.stat().st_size == len(path.jumps) * 8 * 3
        t, m, s = read_jump_log(log, 1)
        assert np.array_equal(t, times) and np.array_equal(s, path.jump_states)
        assert path.lineage == {"root_seed": 7, "tag": "decoupled", "path": 0}

    def test_uncovered_grid(self):
        law = LawFlow.constant(dirac(0.0), uniform_grid(0.5, 0.1))
        with pytest.raises(LawFlowGap):
            simulate_decoupled(lm1(), LM, 0.0, law, uniform_grid(1.0, 0.1), 0)

    def test_worker_count_does_not_matter(self):
        grid = uniform_grid(0.5, 0.05)
        law = LawFlow.constant(dirac(0.0), grid)
        x0 = np.linspace(-1, 1, 700)[:, None]
        one = run_paths(lm1(), LM, x0, law, grid, 8, block_size=128, threads=1, record="all").out.X_nodes
        many = run_paths(lm1(), LM, x0, law, grid, 8, block_size=128, threads=4, record="all").out.X_nodes
        assert np.array_equal(one, many)

    def test_path_depends_only_on_its_index(self):
        grid = uniform_grid(0.5, 0.05)
        law = LawFlow.constant(dirac(0.0), grid)
        full = run_paths(lm1(), LM, np.zeros((40, 1)), law, grid, 8, record="terminal").X_T
        part = run_paths(lm1(), LM, np.zeros((10, 1)), law, grid, 8, first_path=25, record="terminal").X_T
        assert np.array_equal(full[25:35], part)


class TestPicard:
    def test_measure_free_fixed_point(self):
        res = picard_law_iteration(measure_free_lm(), LM, normal_sampler(0, 1), 300, uniform_grid(0.5, 0.05), 4, 1)
        assert res.gaps[0] > 0
        assert all(g == 0.0 for g in res.gaps[1:])

    def test_contraction(self):
        grid = uniform_grid(0.5, 0.01)
        res = picard_law_iteration(lm1(), LM, normal_sampler(1.0, 0.5), 1000, grid, 6, 2)
        assert res.ratio < 1
        assert all(b < a for a, b in zip(res.gaps[1:], res.gaps[2:]))
        assert not res.non_contraction
        # the Picard stages converge to the particle system sharing the noise
        direct, _ = simulate_particle_system(lm1(), LM, normal_sampler(1.0, 0.5), 1000, grid, 2)
        other, _ = simulate_particle_system(lm1(), LM, normal_sampler(1.0, 0.5), 1000, grid, 3)
        floor, _ = sup_w2_gap(direct, other)
        assert sup_w2_gap(res.flows[-1], direct)[0] < 3 * floor

    def test_needs_one_stage(self):
        with pytest.raises(ValueError):
            picard_law_iteration(lm1(), LM, 0.0, 10, uniform_grid(1, 0.1), 0, 0)


class TestFlowProperty:
    def test_zero_model(self):
        rep = check_flow_property(zero_model(), LM, 0.5, normal_sampler(0, 1), 0.0, 0.5, 1.0, 0.05, 1,
                                  n_particles=100, n_paths=20)
        assert rep.max_discrepancy == 0.0

    def test_measure_free(self):
        rep = check_flow_property(measure_free_lm(), LM, 0.5, normal_sampler(0, 1), 0.0, 0.5, 1.0, 0.05, 1,
                                  n_particles=100, n_paths=20)
        assert rep.max_discrepancy == 0.0

    def test_mid_step_restart(self):
        rep = check_flow_property(lm1(), LM, 0.5, normal_sampler(0, 1), 0.0, 0.5, 1.0, 0.1, 1,
                                  n_particles=100, n_paths=10)
        assert rep.t_restart == pytest.approx(0.55)
        assert rep.max_discrepancy > 0

    def test_order(self):
        with pytest.raises(ValueError):
            check_flow_property(lm1(), LM, 0.0, 0.0, 0.0, 1.0, 0.5, 0.1, 0)


class TestMoments:
    def test_bounded_drift_increment(self):
        cs = builtin_affine([[0.0]], [[0.0]], [0.0], [[0.0]], b0=[1.0], alpha=0.5)
        grid = uniform_grid(0.32, 0.01)
        law = LawFlow.constant(dirac(0.0), grid)
        batch = run_paths(cs, LM, np.zeros((5, 1)), law, grid, 0, record="all")
        h = [0.01, 0.02, 0.04, 0.08, 0.16, 0.32]
        rep = moment_report(batch, 2, h)
        assert np.allclose(rep.increment, h, rtol=1e-12)
        assert rep.root_slope == pytest.approx(1.0, abs=1e-9)

    def test_linear_model_increment_slope(self):
        grid = uniform_grid(0.32, 0.01)
        law = LawFlow.constant(dirac(0.0), grid)
        batch = run_paths(lm1(), LM, np.ones((20_000, 1)), law, grid, 3, record="all")
        rep = moment_report(batch, 2, [0.01, 0.02, 0.04, 0.08, 0.16, 0.32])
        assert 0.4 <= rep.root_slope <= 1.1
        assert rep.power_slope == pytest.approx(2 * rep.root_slope, rel=1e-12)
        # the supremum dominates the terminal second moment from the moment recursion
        q = jump_second_moment(LM)
        for h, inc in zip(rep.increment_h, rep.increment):
            assert inc ** 2 >= 0.95 * q * h

    def test_fourth_moment_stable_under_doubling(self):
        grid = uniform_grid(1.0, 0.02)
        law = LawFlow.constant(dirac(0.0), grid)
        small = run_paths(lm1(), LM, np.ones((5_000, 1)), law, grid, 9, record="all")
        large = run_paths(lm1(), LM, np.ones((10_000, 1)), law, grid, 10, record="all")
        a, b = moment_report(small, 4).sup_norm[-1], moment_report(large, 4).sup_norm[-1]
        assert np.isfinite(a) and 0.9 <= a / b <= 1.1

    def test_order_at_least_two(self):
        with pytest.raises(ValueError):
            moment_report([], 1)

    def test_tail_probability_grows_at_most_linearly(self):
        grid = uniform_grid(0.4, 0.005)
        law = LawFlow.constant(dirac(0.0), grid)
        batch = run_paths(lm1(), LM, np.zeros((20_000, 1)), law, grid, 11, record="all")
        t = [0.025, 0.05, 0.1, 0.2, 0.4]
        p = tail_probability(batch, 1.0, t)
        assert np.all(np.diff(p) >= 0)
        slope = p[-1] / t[-1]
        assert np.all(p <= slope * np.array(t) + 3 * np.sqrt(p * (1 - p) / 20_000))


class TestLawFlow:
    def test_left_continuous_lookup(self):
        grid = np.array([0.0, 0.5, 1.0])
        flow = LawFlow(grid, (dirac(0.0), dirac(1.0), dirac(2.0)))
        assert flow.at(0.49).mean[0] == 0.0
        assert flow.at(0.5).mean[0] == 1.0
        assert flow.at(1.0).mean[0] == 2.0
        with pytest.raises(LawFlowGap):
            flow.at(1.5)

    def test_validation(self):
        with pytest.raises(ValueError):
            LawFlow(np.array([0.0, 1.0]), (dirac(0.0),))
        with pytest.raises(ValueError):
            LawFlow(np.array([1.0, 0.0]), (dirac(0.0), dirac(0.0)))

    def test_sup_gap(self):
        grid = np.array([0.0, 1.0])
        a = LawFlow(grid, (dirac(0.0), dirac(1.0)))
        b = LawFlow(grid, (dirac(0.5), dirac(3.0)))
        gap, per = sup_w2_gap(a, b)
        assert gap == 2.0 and per.tolist() == [0.5, 2.0]
