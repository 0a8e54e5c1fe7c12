"""Cross-module invariants as hypothesis properties."""
import math

import numpy as np
from hypothesis import given, settings, strategies as st

from mvjump.jump_driver import LevyModel, lambda_eps, sample_jumps, substream
from mvjump.malliavin_engine import batch_means
from mvjump.measure_kit import dirac, empirical_from_samples, wasserstein2_1d
from mvjump.mv_simulator import LawFlow

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
samples = st.lists(finite, min_size=1, max_size=30)


@given(samples, samples, st.floats(-5, 5).filter(lambda a: abs(a) > 1e-3), finite)
def test_w2_scales_with_affine_maps(xs, ys, scale, shift):
    mu, nu = empirical_from_samples(np.array(xs)), empirical_from_samples(np.array(ys))
    mapped_mu = empirical_from_samples(scale * np.array(xs) + shift)
    mapped_nu = empirical_from_samples(scale * np.array(ys) + shift)
    expected = abs(scale) * wasserstein2_1d(mu, nu)
    assert math.isclose(wasserstein2_1d(mapped_mu, mapped_nu), expected, rel_tol=1e-7, abs_tol=1e-7)


@given(finite, finite)
def test_w2_between_point_masses(a, b):
    assert math.isclose(wasserstein2_1d(dirac(a), dirac(b)), abs(a - b), rel_tol=1e-12, abs_tol=1e-12)


@given(st.lists(finite, min_size=4, max_size=200), st.floats(-3, 3), finite)
def test_batch_means_affine_equivariance(values, scale, shift):
    v = np.array(values)
    mean, se = batch_means(v)
    mean2, se2 = batch_means(scale * v + shift)
    assert math.isclose(mean2, scale * mean + shift, rel_tol=1e-9, abs_tol=1e-8)
    assert math.isclose(se2, abs(scale) * se, rel_tol=1e-9, abs_tol=1e-8)
    assert math.isclose(mean, math.fsum(values) / len(values), rel_tol=1e-12, abs_tol=1e-12)


@given(finite, st.integers(2, 500))
def test_batch_means_of_constant_has_zero_error(c, n):
    mean, se = batch_means(np.full(n, c))
    assert math.isclose(mean, c, rel_tol=1e-12, abs_tol=1e-300)
    assert se <= 1e-12 * abs(c)


@given(st.floats(0.1, 1.9), st.floats(0.01, 5), st.floats(1e-4, 0.5), st.floats(1e-4, 0.5))
def test_truncated_rate_decreases_in_cutoff_and_is_linear_in_intensity(alpha, k, e1, e2):
    lo, hi = sorted((e1, e2))
    assert lambda_eps(alpha, k, lo) >= lambda_eps(alpha, k, hi)
    assert math.isclose(lambda_eps(alpha, 2 * k, lo), 2 * lambda_eps(alpha, k, lo), rel_tol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.2, 1.8), st.floats(1e-3, 0.3))
def test_sampled_events_stay_in_window_and_support(seed, alpha, eps):
    lm = LevyModel(alpha=alpha, k=1.0, truncation_eps=eps)
    events = sample_jumps(lm, 0.3, 0.7, substream(seed, "prop"))
    for ev in events:
        assert 0.3 < ev.time <= 0.7
        assert eps <= abs(ev.mark) <= lm.R0
    assert [ev.time for ev in events] == sorted(ev.time for ev in events)


@given(st.integers(0, 2**31), st.text(max_size=8))
def test_substreams_are_reproducible(seed, tag):
    a = substream(seed, tag, 3).random(5)
    b = substream(seed, tag, 3).random(5)
    c = substream(seed, tag, 4).random(5)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


@given(st.lists(st.floats(0.001, 1), min_size=1, max_size=10), st.floats(0, 1))
def test_law_flow_reads_left_node(steps, frac):
    grid = np.concatenate([[0.0], np.cumsum(steps)])
    flow = LawFlow(grid, tuple(dirac(float(i)) for i in range(grid.shape[0])))
    t = frac * grid[-1]
    k = int(np.searchsorted(grid, t, side="right")) - 1
    got = flow.at(t)
    assert got.mean[0] in (float(k), float(k + 1))
    if t - grid[k] > 1e-9 and k + 1 < grid.shape[0] and grid[k + 1] - t > 1e-9:
        assert got.mean[0] == float(k)
