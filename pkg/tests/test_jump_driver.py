import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from mvjump.coefficient_model import lm1
from mvjump.errors import InvalidWindow, NonConvergentLimit
from mvjump.jump_driver import (EventFeed, LevyModel, assumption_a_limit, compensator_drift, integrate_nu, lambda_eps,
                                nu_rule, sample_jumps, substream)
from mvjump.measure_kit import dirac

LAMBDA_GRID = np.logspace(6, 10, 9)


def truncated_stable_cdf(lm):
    """CDF of the normalized truncated measure on [-R0, -eps] U [eps, R0]."""
    e, r, a = lm.truncation_eps, lm.R0, lm.alpha
    half = (e ** -a - r ** -a)

    def tail(s):  # mass of [s, R0] relative to one side
        return (np.clip(s, e, r) ** -a - r ** -a) / half

    def cdf(u):
        u = np.asarray(u, dtype=float)
        neg = 0.5 * tail(np.abs(u))
        pos = 0.5 + 0.5 * (1.0 - tail(u))
        return np.where(u < 0, np.where(u < -r, 0.0, neg), np.where(u < e, 0.5, pos))
    return cdf


def nonodd_amplitude(fn):
    cs = lm1(1.0)
    return replace(cs, c=fn, c_odd_in_u=False)


class TestSampling:
    def test_zero_intensity(self):
        lm = LevyModel(alpha=1.0, k=0.0)
        rng = np.random.default_rng(0)
        assert all(sample_jumps(lm, 0.0, 5.0, rng) == [] for _ in range(50))

    def test_count_mean(self):
        lm = LevyModel(alpha=1.0, k=1.0, truncation_eps=0.1)
        assert lm.lambda_eps == pytest.approx(18.0, rel=1e-14)
        rng = np.random.default_rng(1)
        counts = [len(sample_jumps(lm, 0.0, 1.0, rng)) for _ in range(10_000)]
        assert abs(np.mean(counts) - 18.0) <= 3 * math.sqrt(18.0 / 10_000)

    @pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5])
    def test_marks_follow_truncated_density(self, alpha):
        lm = LevyModel(alpha=alpha, truncation_eps=0.01)
        rng = np.random.default_rng(2)
        marks = []
        while len(marks) < 100_000:
            marks.extend(ev.mark for ev in sample_jumps(lm, 0.0, 50.0, rng))
        res = stats.kstest(np.array(marks[:100_000]), truncated_stable_cdf(lm))
        assert res.statistic < 0.02

    def test_events_sorted_and_above_threshold(self):
        lm = LevyModel(alpha=0.5, truncation_eps=0.05)
        ev = sample_jumps(lm, 0.2, 3.0, np.random.default_rng(3))
        times = [e.time for e in ev]
        assert times == sorted(times) and all(0.2 <= t <= 3.0 for t in times)
        assert all(lm.truncation_eps <= abs(e.mark) <= lm.R0 for e in ev)

    @pytest.mark.parametrize("window", [(1.0, 1.0), (2.0, 1.0)])
    def test_invalid_window(self, window):
        with pytest.raises(InvalidWindow):
            sample_jumps(LevyModel(alpha=0.5), *window, np.random.default_rng(0))

    def test_reproducible(self):
        lm = LevyModel(alpha=0.7)
        a = sample_jumps(lm, 0.0, 1.0, substream(5, "x", 3))
        b = sample_jumps(lm, 0.0, 1.0, substream(5, "x", 3))
        assert a == b and len(a) > 0

    def test_thinning_consistency(self):
        lm = LevyModel(alpha=1.0, truncation_eps=0.1)
        n = 4000
        whole, halves = [], []
        for i in range(n):
            whole.append(sample_jumps(lm, 0.0, 2.0, substream(9, "whole", i)))
            halves.append(sample_jumps(lm, 0.0, 1.0, substream(9, "first", i))
                          + sample_jumps(lm, 1.0, 2.0, substream(9, "second", i)))
        for stat in (len, lambda ev: sum(e.mark ** 2 for e in ev)):
            a = np.array([stat(ev) for ev in whole], dtype=float)
            b = np.array([stat(ev) for ev in halves], dtype=float)
            se = math.sqrt(a.var(ddof=1) / n + b.var(ddof=1) / n)
            assert abs(a.mean() - b.mean()) <= 3 * se

    def test_atoms_sampled_at_their_rate(self):
        lm = LevyModel(alpha=1.0, truncation_eps=0.1, finite_part=((0.5, 2.0), (-0.5, 2.0)))
        rng = np.random.default_rng(4)
        ev = [e for _ in range(2000) for e in sample_jumps(lm, 0.0, 1.0, rng)]
        share = np.mean([e.from_atom for e in ev])
        p = 4.0 / 22.0
        assert abs(share - p) <= 3 * math.sqrt(p * (1 - p) / len(ev))
        assert all(e.mark in (0.5, -0.5) for e in ev if e.from_atom)
        assert lm.symmetric


class TestEventFeed:
    def _all(self, feed, grid):
        out = []
        for a, b in zip(grid[:-1], grid[1:]):
            ev = feed.events(a, b)
            out.append((ev.path + feed.first_path, ev.time, ev.mark))
        p, t, m = (np.concatenate(z) for z in zip(*out))
        order = np.lexsort((t, p))
        return p[order], t[order], m[order]

    def test_independent_of_grid(self):
        lm = LevyModel(alpha=0.5)
        a = self._all(EventFeed(lm, 3, "t", 100), np.linspace(0, 1, 11))
        b = self._all(EventFeed(lm, 3, "t", 100), np.linspace(0, 1, 1001))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_independent_of_partition(self):
        lm = LevyModel(alpha=0.5)
        grid = np.linspace(0, 1, 101)
        whole = self._all(EventFeed(lm, 3, "t", 300, block_size=64), grid)
        parts = [self._all(EventFeed(lm, 3, "t", n, first_path=f, block_size=64), grid)
                 for f, n in ((0, 100), (100, 150), (250, 50))]
        joined = tuple(np.concatenate(z) for z in zip(*parts))
        assert all(np.array_equal(x, y) for x, y in zip(whole, joined))

    def test_step_window_is_half_open(self):
        feed = EventFeed(LevyModel(alpha=0.5), 1, "t", 50)
        ev = feed.events(0.1, 0.2)
        assert np.all((ev.time > 0.1) & (ev.time <= 0.2))
        assert np.all(np.diff(ev.path) >= 0)

    def test_rate_matches(self):
        lm = LevyModel(alpha=1.0, truncation_eps=0.1)
        feed = EventFeed(lm, 0, "rate", 20_000)
        n = feed.events(0.0, 1.0).size
        assert abs(n - 18.0 * 20_000) <= 3 * math.sqrt(18.0 * 20_000)

    def test_tags_differ(self):
        lm = LevyModel(alpha=0.5)
        a = EventFeed(lm, 0, "a", 50).events(0, 1)
        b = EventFeed(lm, 0, "b", 50).events(0, 1)
        assert not (a.size == b.size and np.array_equal(a.mark, b.mark))


class TestCompensator:
    def test_odd_amplitude_is_exactly_zero(self):
        assert np.all(compensator_drift(LevyModel(alpha=0.5), lm1(), [1.3], dirac(0.0)) == 0.0)

    def test_square_amplitude(self):
        lm = LevyModel(alpha=1.0, truncation_eps=0.1)
        cs = nonodd_amplitude(lambda x, u, mu: np.square(np.asarray(u))[:, None] + 0 * x)
        assert compensator_drift(lm, cs, [0.0], dirac(0.0))[0] == pytest.approx(1.8, rel=1e-8)

    def test_zero_amplitude(self):
        cs = nonodd_amplitude(lambda x, u, mu: 0.0 * x)
        assert compensator_drift(LevyModel(alpha=1.0), cs, [0.0], dirac(0.0))[0] == 0.0

    def test_odd_amplitude_by_quadrature(self):
        cs = replace(lm1(0.5), c_odd_in_u=False)
        val = compensator_drift(LevyModel(alpha=0.5), cs, [2.0], dirac(0.0))[0]
        assert abs(val) <= 1e-8


class TestQuadrature:
    @pytest.mark.parametrize("alpha", [0.3, 1.0, 1.7])
    def test_rule_second_moment(self, alpha):
        lm = LevyModel(alpha=alpha, k=0.7, truncation_eps=1e-4)
        exact = 2 * 0.7 * (1 - 1e-4 ** (2 - alpha)) / (2 - alpha)
        rule = nu_rule(lm)
        assert rule.integrate(rule.nodes ** 2) == pytest.approx(exact, rel=1e-10)
        assert integrate_nu(lm, lambda u: u * u) == pytest.approx(exact, rel=1e-8)

    def test_rule_total_mass(self):
        lm = LevyModel(alpha=0.5, truncation_eps=1e-3)
        rule = nu_rule(lm, breakpoints=(0.5,))
        assert rule.integrate(np.ones_like(rule.nodes)) == pytest.approx(lm.lambda_eps, rel=1e-10)

    def test_lambda_eps_monotone_and_unbounded(self):
        eps = np.logspace(-8, -0.1, 40)
        vals = np.array([lambda_eps(0.5, 1.0, e) for e in eps])
        assert np.all(np.diff(vals) < 0)
        assert vals[0] > 1e4

    @pytest.mark.parametrize("bad", [0.0, 2.0, -1.0])
    def test_alpha_range(self, bad):
        with pytest.raises(ValueError):
            LevyModel(alpha=bad)


class TestAssumptionA:
    @pytest.mark.parametrize("alpha,expected", [(1.0, 0.5), (0.5, 0.25), (1.5, 0.75)])
    def test_exponent(self, alpha, expected):
        a_fit, r1 = assumption_a_limit(LevyModel(alpha=alpha), LAMBDA_GRID)
        assert abs(a_fit - expected) <= 0.02
        assert r1 < 0
        assert LevyModel(alpha=alpha).exponent_a == expected

    def test_profile_scaling_leaves_exponent(self):
        base = assumption_a_limit(LevyModel(alpha=1.0), LAMBDA_GRID)[0]
        scaled = assumption_a_limit(LevyModel(alpha=1.0, psi=lambda u: 4 * u * u, psi_name="4u2",
                                              exponent_a=0.5), LAMBDA_GRID)[0]
        assert scaled == pytest.approx(base, abs=1e-3)

    def test_limit_constant_matches_gamma_function(self):
        # integral of (exp(-lam u^2) - 1)|u|^(-1-alpha) over R equals Gamma(-alpha/2) lam^(alpha/2)
        alpha = 1.0
        _, r1 = assumption_a_limit(LevyModel(alpha=alpha), LAMBDA_GRID)
        assert r1 == pytest.approx(math.gamma(-alpha / 2), rel=2e-2)

    def test_grid_requirements(self):
        lm = LevyModel(alpha=1.0)
        with pytest.raises(ValueError):
            assumption_a_limit(lm, [1e6, 1e7, 1e8])
        with pytest.raises(ValueError):
            assumption_a_limit(lm, np.linspace(1e6, 5e6, 6))

    def test_non_power_profile_rejected(self):
        lm = LevyModel(alpha=1.0, psi=lambda u: u * u / (1 + abs(math.log(abs(u))) ** 3), psi_name="log",
                       exponent_a=0.5)
        with pytest.raises(NonConvergentLimit):
            assumption_a_limit(lm, np.logspace(1, 12, 12))
