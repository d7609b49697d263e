import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfrbsde.errors import BudgetError, ConfigError, GridTooCoarseError
from mfrbsde.mpp_sim import (
    ClockA,
    IntensityKernel,
    MarkSpace,
    MppPath,
    build_tree,
    compensated_integral,
    simulate_mpp,
    tree_compensated_integral,
)
from mfrbsde.rng import stream


def test_zero_intensity_has_no_jumps():
    path = simulate_mpp(IntensityKernel([0.0]), ClockA.identity(1.0), seed=3)
    assert len(path) == 0


@pytest.mark.parametrize(
    "weights, clock, expected",
    [
        ([2.0], ClockA.identity(1.0), 2.0),
        ([1.0], ClockA.from_function(lambda t: t**2, 1.0), 1.0),
    ],
)
def test_mean_count_matches_compensator(weights, clock, expected):
    kernel = IntensityKernel(weights)
    counts = np.array([len(simulate_mpp(kernel, clock, seed=stream(11, s))) for s in range(100_000)])
    se = counts.std() / np.sqrt(counts.size)
    assert abs(counts.mean() - expected) < 3 * se


def test_counting_process_compensation_on_grid():
    kernel = IntensityKernel([0.7, 0.8])
    clock = ClockA("piecewise-linear", 2.0, [0.0, 1.0, 2.0], [0.0, 0.5, 2.0])
    grid = np.linspace(0, 2, 9)
    N = np.array([simulate_mpp(kernel, clock, seed=stream(5, s)).counting(grid) for s in range(20_000)])
    target = kernel.total * clock(grid)
    se = N.std(axis=0) / np.sqrt(N.shape[0])
    assert np.all(np.abs(N.mean(axis=0) - target) <= 3 * se + 1e-12)


def test_mark_frequencies_follow_weights():
    kernel = IntensityKernel([1.0, 3.0])
    marks = np.concatenate([simulate_mpp(kernel, ClockA.identity(2.0), seed=stream(2, s)).marks for s in range(5000)])
    p = np.mean(marks == 1)
    assert abs(p - 0.75) < 3 * np.sqrt(0.75 * 0.25 / marks.size)


def test_nonmonotone_clock_table_is_rejected():
    with pytest.raises(ConfigError, match="not monotone"):
        ClockA("monotone", 1.0, [0.0, 0.5, 1.0], [0.0, 0.6, 0.4])


def test_clock_must_start_at_zero():
    with pytest.raises(ConfigError):
        ClockA("piecewise-linear", 1.0, [0.0, 1.0], [0.1, 1.0])


def test_clock_inverse_roundtrip():
    clock = ClockA.from_function(lambda t: t + t**3, 1.0)
    for a in (0.1, 0.7, 1.5, 1.9):
        assert clock(clock.inverse(a)) == pytest.approx(a, abs=1e-10)


def test_two_step_tree_leaf_probabilities():
    tree = build_tree(IntensityKernel([1.0]), ClockA.identity(0.2), 2)
    assert tree.level_size(2) == 4
    np.testing.assert_allclose(tree.leaf_probabilities(), [0.81, 0.09, 0.09, 0.01], atol=1e-15)


def test_zero_kernel_tree_puts_all_mass_on_no_jump():
    tree = build_tree(IntensityKernel([0.0, 0.0]), ClockA.identity(1.0), 3)
    assert np.all(tree.probs[:, 0] == 1.0)
    assert np.all(tree.probs[:, 1:] == 0.0)


def test_two_mark_branch_probabilities():
    tree = build_tree(IntensityKernel([1.0, 2.0]), ClockA.identity(0.1), 1)
    np.testing.assert_allclose(tree.probs[0], [0.7, 0.1, 0.2], atol=1e-15)


def test_grid_too_coarse_names_the_step():
    grid = np.array([0.0, 0.2, 1.0])
    with pytest.raises(GridTooCoarseError, match="step 1") as info:
        build_tree(IntensityKernel([2.0]), ClockA.identity(1.0), 2, grid=grid)
    assert info.value.step == 1


def test_full_tree_budget_is_enforced():
    with pytest.raises(BudgetError) as info:
        build_tree(IntensityKernel([0.1, 0.1]), ClockA.identity(1.0), 12, max_leaves=1000)
    assert info.value.required == 3**12


def test_lattice_matches_full_tree_laws():
    kernel, clock = IntensityKernel([0.6, 0.9]), ClockA.identity(0.5)
    full = build_tree(kernel, clock, 4)
    lat = build_tree(kernel, clock, 4, recombine=True)
    for i in range(5):
        for j, counts in enumerate(lat.counts[i]):
            mask = np.all(full.counts[i] == counts, axis=1)
            assert full.node_prob[i][mask].sum() == pytest.approx(lat.node_prob[i][j], abs=1e-15)


def test_compensated_integral_examples():
    kernel, clock = IntensityKernel([1.0]), ClockA.identity(0.1)
    grid = np.array([0.0, 0.1])
    assert compensated_integral([0], np.zeros((1, 1)), kernel, clock, grid) == 0.0
    vals = [compensated_integral([b], np.ones((1, 1)), kernel, clock, grid) for b in (0, 1)]
    assert 0.9 * vals[0] + 0.1 * vals[1] == pytest.approx(0.0, abs=1e-15)
    path = MppPath([0.3, 0.8], [0, 0], 1.0)
    kernel2 = IntensityKernel([2.0])
    assert compensated_integral(path, np.ones((4, 1)), kernel2, ClockA.identity(1.0), np.linspace(0, 1, 5)) == pytest.approx(0.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(1, 3), M=st.integers(1, 4))
def test_compensated_integral_is_a_tree_martingale(seed, m, M):
    rng = stream(seed)
    kernel = IntensityKernel(rng.uniform(0, 0.6, m))
    tree = build_tree(kernel, ClockA.identity(0.5), M)
    integrand = [rng.normal(size=(tree.level_size(i), m)) for i in range(M)]
    vals = tree_compensated_integral(tree, integrand)
    assert abs(tree.leaf_probabilities() @ vals) < 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(1, 3), M=st.integers(1, 5))
def test_leaf_probabilities_sum_to_one(seed, m, M):
    rng = stream(seed)
    tree = build_tree(IntensityKernel(rng.uniform(0, 1, m)), ClockA.identity(0.5), M)
    assert abs(tree.leaf_probabilities().sum() - 1.0) < 1e-12
    assert np.allclose(tree.probs.sum(axis=1), 1.0, atol=1e-15)


def test_path_csv_export():
    path = MppPath([0.25, 0.5], [1, 0], 1.0)
    text = path.to_csv(MarkSpace(("a", "b"), [1.0, -1.0]).labels)
    assert text.splitlines() == ["time,mark", "0.25,b", "0.5,a"]


def test_simulation_is_reproducible():
    k, c = IntensityKernel([1.0, 2.0]), ClockA.identity(3.0)
    a, b = simulate_mpp(k, c, seed=9), simulate_mpp(k, c, seed=9)
    assert np.array_equal(a.times, b.times) and np.array_equal(a.marks, b.marks)
