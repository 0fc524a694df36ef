"""Acceptance suite: one test per contract criterion, at its stated tolerance.

Run with -v to get one pass/fail line per criterion. The heavyweight
five-configuration comparisons are computed once per training seed and
shared by the criteria that consume them.
"""

import time

import numpy as np
import pytest

from cacheq.dec import decompose_errors, fit_channel_affine, fit_decoupled, fit_direct
from cacheq.dps import (
    brute_force,
    cost_matrix,
    group_count,
    length_limits,
    solve,
    solve_tables,
)
from cacheq.pipeline import (
    SamplerConfig,
    group_monotonic_fraction,
    run_quadrant,
    sample_accelerated,
    sample_reference,
    sliced_wasserstein,
)
from cacheq.quant import (
    QuantizedLinear,
    calibrate_minmax,
    dequantize,
    estimate_cost,
    fake_quant_linear,
    fold_correction,
    quantize,
)
from cacheq.trajectory import SynthSpec, capture, synthesize


@pytest.fixture(scope="module")
def quadrants(toy_models):
    """Five-configuration comparison for each training seed, timed."""
    start = time.monotonic()
    results = {seed: run_quadrant(model) for seed, model in toy_models.items()}
    return results, time.monotonic() - start


def random_instance(gen):
    steps = int(gen.integers(4, 15))
    traj = synthesize(SynthSpec(
        steps=steps, channels=int(gen.integers(1, 4)), rows=int(gen.integers(1, 3)),
        noise=1.0, seed=int(gen.integers(1 << 31)),
    ))
    return cost_matrix(traj), steps


def test_c01_solver_matches_brute_force_on_random_instances():
    """200 random instances (T <= 14, K <= 4): identical cost and identical
    dividing points, with and without length limits, in under 60 s."""
    gen = np.random.default_rng(2024)
    start = time.monotonic()
    for trial in range(200):
        costs, steps = random_instance(gen)
        n = int(gen.integers(1, 5))
        limits_on = bool(trial % 2)
        got = solve(costs, n, limits_on=limits_on)
        want = brute_force(costs, got.groups, got.limits)
        assert got.total_cost == want.total_cost
        assert got.dividing_points == want.dividing_points
    assert time.monotonic() - start < 60.0


def test_c02_known_grouping_fixture():
    """Tabulated drift [0, 1, 5, 6, 7, 20] with N = 2 groups as
    {0,1} {2,3,4} {5} at total cost 4."""
    traj = synthesize(SynthSpec(steps=6, values=(0.0, 1.0, 5.0, 6.0, 7.0, 20.0)))
    sched = solve(cost_matrix(traj), n_target=2)
    assert sched.dividing_points == (0, 2, 5)
    assert sched.total_cost == 4.0


def test_c03_length_limits_cut_solver_work_five_fold():
    """T = 1000, K = 100, N = 10: limits shrink inner-loop visits by >= 5x,
    full run under 30 s."""
    start = time.monotonic()
    traj = synthesize(SynthSpec(steps=1000, noise=1.0, seed=42))
    n = 10
    k = group_count(1000, n)
    limited = solve_tables(cost_matrix(traj, band=2 * n), k, length_limits(n))
    unlimited = solve_tables(cost_matrix(traj), k, None)
    assert limited.visits * 5 <= unlimited.visits
    assert np.isfinite(limited.min_cost[999, k])
    assert time.monotonic() - start < 30.0


def test_c04_channel_fit_matches_least_squares():
    """100 random fits agree with numpy lstsq to 1e-9 relative."""
    gen = np.random.default_rng(4)
    for _ in range(100):
        n = int(gen.integers(3, 80))
        k = int(gen.integers(1, 8))
        source = gen.standard_normal((n, k)) * gen.uniform(0.05, 10.0)
        target = source * gen.uniform(-3, 3, size=k) + gen.standard_normal((n, k))
        fit = fit_channel_affine(source, target)
        for c in range(k):
            design = np.column_stack([source[:, c], np.ones(n)])
            coef = np.linalg.lstsq(design, target[:, c], rcond=None)[0]
            assert fit.a[c] == pytest.approx(coef[0], rel=1e-9, abs=1e-9)
            assert fit.b[c] == pytest.approx(coef[1], rel=1e-9, abs=1e-9)


def test_c05_error_decomposition_telescopes_bitwise():
    """100 random output triples: e_total == e_cache + e_quant exactly."""
    gen = np.random.default_rng(5)
    for _ in range(100):
        shape = (int(gen.integers(1, 20)), int(gen.integers(1, 10)))
        o_ref, o_cached, o_quant = (gen.standard_normal(shape) for _ in range(3))
        triple = decompose_errors(o_ref, o_cached, o_quant)
        assert np.array_equal(triple.e_total, triple.e_cache + triple.e_quant)
        assert np.array_equal(triple.e_cache, o_ref - o_cached)
        assert np.array_equal(triple.e_quant, o_cached - o_quant)


def test_c06_decoupled_fit_reduces_to_direct_fit_on_fresh_inputs():
    """With x_cached == x_ref the two-stage fit equals the direct
    quantization fit to 1e-9 relative and its input stage is the identity."""
    gen = np.random.default_rng(6)
    for _ in range(20):
        x = gen.standard_normal((100, 8)) * gen.uniform(0.2, 4.0, size=8)
        w = gen.standard_normal((8, 5))
        quant = QuantizedLinear.from_float(w, 8)
        ref = QuantizedLinear.from_float_bypass(w)
        o_cached = fake_quant_linear(x, ref)
        input_fit, output_fit = fit_decoupled(x, x, o_cached, quant, ref)
        direct = fit_direct(fake_quant_linear(x, quant), o_cached)
        assert np.allclose(input_fit.a, 1.0, rtol=0, atol=1e-12)
        assert np.allclose(input_fit.b, 0.0, rtol=0, atol=1e-12)
        assert np.allclose(output_fit.a, direct.a, rtol=1e-9, atol=1e-12)
        assert np.allclose(output_fit.b, direct.b, rtol=1e-9, atol=1e-12)


def test_c07_folding_corrections_into_weights_is_equivalent():
    """1000 random draws: folded layer output equals post-hoc a * y + b to
    1e-9 relative; folding the identity changes nothing."""
    gen = np.random.default_rng(7)
    for _ in range(1000):
        n_in = int(gen.integers(1, 10))
        n_out = int(gen.integers(1, 10))
        w = gen.standard_normal((n_in, n_out)) * gen.uniform(0.1, 3.0)
        bias = gen.standard_normal(n_out) if gen.integers(2) else None
        layer = QuantizedLinear.from_float(w, 8, bias=bias)
        a = gen.uniform(0.25, 4.0, size=n_out)
        b = gen.standard_normal(n_out)
        x = gen.standard_normal((4, n_in))
        folded = fake_quant_linear(x, fold_correction(layer, a, b))
        post = fake_quant_linear(x, layer) * a + b
        scale = max(np.abs(post).max(), 1.0)
        assert np.abs(folded - post).max() <= 1e-9 * scale
        ident = fold_correction(layer, np.ones(n_out), np.zeros(n_out))
        assert np.array_equal(fake_quant_linear(x, ident), fake_quant_linear(x, layer))


def test_c08_roundtrip_error_bounded_by_half_step():
    """100k in-range values per bitwidth: |dequant(quant(x)) - x| <= s/2
    (+1e-12), and codes are monotone in the input."""
    gen = np.random.default_rng(8)
    for bits in (2, 4, 8):
        x = gen.uniform(-4.0, 6.0, size=(100_000, 1))
        params = calibrate_minmax(x, bits)
        back = dequantize(quantize(x, params), params)
        assert np.abs(back - x).max() <= params.scale[0] / 2 + 1e-12
        xs = np.sort(x, axis=0)
        assert (np.diff(quantize(xs, params).ravel()) >= 0).all()


def test_c09_single_step_groups_reproduce_the_reference_bitwise(toy_model):
    """A K == T schedule must leave the sampler output bit-identical."""
    traj = capture(toy_model, SamplerConfig(batch_size=64), (101,))
    sched = solve(cost_matrix(traj, band=2), n_target=1)
    cfg = SamplerConfig(batch_size=256, seed=7)
    ref = sample_reference(toy_model, cfg)
    acc = sample_accelerated(toy_model, cfg, sched)
    assert np.array_equal(ref.samples, acc.samples)
    assert acc.cache.recomputes == toy_model.steps


def test_c10_joint_acceleration_beats_its_naive_combination(quadrants):
    """For each of three training seeds the optimized combination is closer
    to the baseline than the naive one, and the naive combination is worse
    than either pure configuration; all three comparisons finish inside
    ten minutes."""
    results, elapsed = quadrants
    assert set(results) == {0, 1, 2}
    for seed, result in results.items():
        d = result.distances()
        assert d["combined_ours"] < d["combined_naive"], f"seed {seed}: {d}"
        assert d["combined_naive"] > d["quant_only"], f"seed {seed}: {d}"
        assert d["combined_naive"] > d["cache_only"], f"seed {seed}: {d}"
    assert elapsed < 600.0


def test_c11_cache_error_vanishes_at_dividing_points_and_grows_in_groups(quadrants):
    """In the naive combined run: E_c == 0 bitwise at every dividing point
    and E_o is non-decreasing inside >= 80% of the groups."""
    results, _ = quadrants
    for result in results.values():
        errors = result.outcomes["combined_naive"].errors
        sched = result.uniform
        for t in sched.dividing_points:
            assert errors.e_cache[t] == 0.0
        assert group_monotonic_fraction(errors.e_total, sched) >= 0.80


def test_c12_cost_model_identities(toy_model, quadrants):
    """W8A8 costs exactly 1/16 of W32A32 in bit operations, and caching
    saves exactly (T - K) trunk evaluations worth of MACs."""
    macs, params = 123_456, 7_586
    assert estimate_cost(macs, 8, 8, params).bops * 16 == estimate_cost(
        macs, 32, 32, params
    ).bops
    assert estimate_cost(macs, 8, 8, params).size_mb * 4 == estimate_cost(
        macs, 32, 32, params
    ).size_mb
    results, _ = quadrants
    result = results[0]
    baseline = result.outcomes["baseline"].cost.macs
    ours = result.outcomes["combined_ours"].cost.macs
    T, K = 100, result.dps_schedule.groups
    assert baseline - ours == (T - K) * toy_model.trunk_macs()


def test_c13_distribution_metric_sanity():
    """Identical clouds measure 0; a unit translation measures the mean
    absolute projection 2/pi within 0.02 at 5000 projections."""
    gen = np.random.default_rng(13)
    x = gen.standard_normal((2048, 2))
    assert sliced_wasserstein(x, x, n_projections=5000, seed=0) == 0.0
    d = sliced_wasserstein(x, x + np.array([1.0, 0.0]), n_projections=5000, seed=0)
    assert d == pytest.approx(2.0 / np.pi, abs=0.02)
