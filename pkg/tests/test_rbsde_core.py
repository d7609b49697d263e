import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfrbsde.errors import BudgetError, ConfigError
from mfrbsde.models import DriverSpec
from mfrbsde.mpp_sim import ClockA, IntensityKernel, build_tree
from mfrbsde.rbsde_core import (
    FrozenDriver,
    enumerate_stopping_rules,
    snell_bruteforce,
    solve_bsde_tree,
    solve_rbsde_tree,
    stability_gap,
)
from mfrbsde.rng import stream


def make_tree(weights=(1.0,), T=0.2, M=2, clock=None):
    return build_tree(IntensityKernel(list(weights)), clock or ClockA.identity(T), M)


def driver(tree, **coef):
    return FrozenDriver(DriverSpec(coef.pop("family", "linear"), **coef), tree)


def leaf_jumps(tree):
    return tree.jump_count(tree.M).astype(float)


def levels(tree, value):
    return [np.full(tree.level_size(i), float(value)) for i in range(tree.M + 1)]


def random_problem(seed, *, M=None, m=None, family=None):
    rng = stream(seed, 3)
    m = int(rng.integers(1, 3)) if m is None else m
    M = int(rng.integers(1, 4)) if M is None else M
    tree = make_tree(rng.uniform(0.2, 1.2, m), T=float(rng.uniform(0.1, 0.5)), M=M)
    fam = ("linear", "lipschitz-saturated", "quadratic-exponential")[int(rng.integers(0, 3))]
    fam = fam if family is None else family
    drv = driver(tree, family=fam, a=float(rng.uniform(-1, 1)), c=float(rng.uniform(-0.5, 0.5)),
                 g=tuple(rng.uniform(-0.5, 0.5, m)), scale=float(rng.uniform(0.5, 2)), lam=0.5)
    # exponential growth in u keeps its slope bounds only for small jumps
    scale = 0.2 if fam == "quadratic-exponential" else 1.0
    xi = scale * rng.normal(size=tree.level_size(M))
    obst = [scale * rng.normal(size=tree.level_size(i)) for i in range(M)]
    obst.append(xi - scale * rng.uniform(0, 1, xi.size))
    return tree, drv, xi, obst


def test_constant_driver_and_terminal():
    tree = make_tree(M=3, T=0.3)
    sol = solve_bsde_tree(tree, driver(tree, c=0.7), np.full(tree.level_size(3), 2.0))
    for i in range(4):
        np.testing.assert_allclose(sol.Y[i], 2.0 + 0.7 * (0.3 - tree.times[i]), atol=1e-14)
        assert np.all(sol.U[i] == 0)


def test_linear_driver_single_step_closed_form():
    tree = make_tree(M=1, T=0.4)
    sol = solve_bsde_tree(tree, driver(tree, a=1.0), np.ones(2))
    assert sol.root == pytest.approx(1 / (1 - 0.4), rel=1e-14)


def test_jump_driver_matches_two_unknown_solve():
    phi, dA = 1.0, 0.1
    tree = make_tree(weights=(phi,), T=dA, M=1)
    sol = solve_bsde_tree(tree, driver(tree, g=(1 / phi,)), leaf_jumps(tree))
    # unknowns (y, u): branch b gives y = xi_b + u dA - (1{b=1} u - phi dA u)
    A = np.array([[1.0, -dA - phi * dA], [1.0, -dA + 1 - phi * dA]])
    y, u = np.linalg.solve(A, [0.0, 1.0])
    assert sol.U[0][0, 0] == pytest.approx(u, abs=1e-14) == pytest.approx(1.0)
    assert sol.root == pytest.approx(y, abs=1e-14)
    assert sol.root == pytest.approx(0.2, abs=1e-14)


def test_per_step_identity_holds_on_every_branch():
    for seed in range(30):
        tree, drv, xi, obst = random_problem(seed)
        sol = solve_rbsde_tree(tree, drv, xi, obst)
        assert sol.edge_residual() < 1e-12
        assert sol.path_residual() < 1e-12


def test_noncontractive_step_is_refused():
    tree = make_tree(M=1, T=0.5)
    with pytest.raises(ConfigError, match="refine grid"):
        solve_bsde_tree(tree, driver(tree, a=2.0), np.ones(2))


def test_obstacle_touching_without_pushing():
    tree = make_tree(M=3)
    sol = solve_rbsde_tree(tree, driver(tree), np.full(tree.level_size(3), 0.3), levels(tree, 0.3))
    for i in range(4):
        assert np.all(sol.Y[i] == 0.3) and np.all(sol.dK[i] == 0)


def test_obstacle_pushes_at_the_last_step():
    tree = make_tree(M=2)
    h = levels(tree, 0.5)
    h[2][:] = 0.0
    sol = solve_rbsde_tree(tree, driver(tree), np.zeros(tree.level_size(2)), h)
    assert np.all(sol.Y[0] == 0.5) and np.all(sol.Y[1] == 0.5)
    assert np.all(sol.dK[0] == 0)
    np.testing.assert_allclose(sol.dK[1], 0.5)
    assert sol.total_K() == pytest.approx(0.5)


def test_inactive_obstacle_reproduces_plain_solution():
    tree, drv, xi, _ = random_problem(4, M=3, family="linear")
    plain = solve_bsde_tree(tree, drv, xi)
    refl = solve_rbsde_tree(tree, drv, xi, levels(tree, -1e6))
    for i in range(tree.M + 1):
        np.testing.assert_array_equal(plain.Y[i], refl.Y[i])
    assert refl.total_K() == 0.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_solution_invariants(seed):
    tree, drv, xi, obst = random_problem(seed)
    sol = solve_rbsde_tree(tree, drv, xi, obst)
    assert sol.flat_off() == 0.0
    assert sol.dominance() >= 0.0
    K = sol.cumulative_K()
    assert np.all(K[0] == 0)
    for i in range(tree.M):
        parent = tree.parents(i + 1)
        assert np.all(K[i + 1] >= K[i][parent])


def test_comparison_in_terminal():
    tree, drv, xi, obst = random_problem(12, M=3)
    low = solve_rbsde_tree(tree, drv, xi, obst)
    high = solve_rbsde_tree(tree, drv, xi + 0.3, obst)
    for i in range(tree.M + 1):
        assert np.all(high.Y[i] >= low.Y[i] - 1e-14)


def test_snell_inactive_obstacle_never_stops():
    # the -1e6 sentinel makes stopped jumps huge; exponential growth in u would overflow
    tree, drv, xi, _ = random_problem(5, M=2, m=1, family="lipschitz-saturated")
    res = snell_bruteforce(tree, drv, xi, levels(tree, -1e6))
    assert res.value == pytest.approx(solve_bsde_tree(tree, drv, xi).root, abs=1e-12)
    assert not any(mask[res.best_rule].any() for mask in res.masks)


def test_snell_five_rule_example():
    tree = make_tree(M=2)
    xi = (leaf_jumps(tree) >= 1).astype(float)
    h = levels(tree, 0.5)
    res = snell_bruteforce(tree, driver(tree), xi, h)
    assert res.n_rules == 5
    dp = solve_rbsde_tree(tree, driver(tree), xi, h)
    assert res.value == pytest.approx(dp.root, abs=1e-14)
    assert res.value == pytest.approx(0.55, abs=1e-14)


@pytest.mark.parametrize("seed", range(25))
def test_snell_matches_dynamic_programming(seed):
    tree, drv, xi, obst = random_problem(seed, M=2)
    res = snell_bruteforce(tree, drv, xi, obst)
    assert abs(res.value - solve_rbsde_tree(tree, drv, xi, obst).root) < 1e-10


def test_stopping_rule_budget_refusal_reports_counts():
    tree = make_tree(weights=(0.5, 0.5), M=4)
    with pytest.raises(BudgetError) as info:
        enumerate_stopping_rules(tree, budget=200_000)
    assert info.value.required > 200_000 and info.value.budget == 200_000


def test_every_rule_stops_by_the_leaf():
    tree = make_tree(M=3)
    masks = enumerate_stopping_rules(tree)
    paths = tree.path_nodes()
    for r in range(masks[0].shape[0]):
        stops = [np.flatnonzero(masks[i][r, paths[:, i]]) for i in range(tree.M)]
        # each path stops at most once before the leaf
        hits = np.zeros(paths.shape[0], int)
        for s in stops:
            hits[s] += 1
        assert hits.max() <= 1


def test_stability_gap_identical_inputs():
    tree, drv, xi, obst = random_problem(2)
    assert stability_gap(tree, drv, (xi, obst), (xi, obst), eta=1.0, beta=2.0) == (0.0, 0.0)


def test_stability_gap_constant_shift_closed_form():
    tree = make_tree(M=3, T=0.3)
    drv = driver(tree)
    xi = leaf_jumps(tree)
    lhs, rhs = stability_gap(tree, drv, (xi, None), (xi + 0.4, None), eta=math.inf, beta=1.5)
    assert lhs == pytest.approx(0.16, abs=1e-14)
    assert rhs == pytest.approx(math.exp(2 * 1.5 * 0.3) * 0.16, rel=1e-13)


def test_stability_gap_holds_on_random_pairs():
    for seed in range(1000):
        tree, drv, xi, obst = random_problem(seed % 200, M=2)
        rng = stream(seed, 9)
        xi2 = xi + rng.normal(scale=0.5, size=xi.size)
        obst2 = [o + rng.normal(scale=0.5, size=o.size) for o in obst[:-1]]
        obst2.append(np.minimum(obst[-1], xi2))
        Cf = drv.lipschitz
        beta = Cf + Cf**2
        lhs, rhs = stability_gap(tree, drv, (xi, obst), (xi2, obst2), eta=1 / Cf**2 if Cf else math.inf, beta=beta)
        assert lhs <= rhs + 1e-12, seed


def _closed_form_linear(a, g, c, phi, T):
    return math.exp(a * T) * phi * (1 + g) * T + c * (math.exp(a * T) - 1) / a


def test_refinement_order_on_linear_closed_form():
    a, g, c, phi, T = 0.8, 0.5, 0.3, 1.0, 1.0
    exact = _closed_form_linear(a, g, c, phi, T)
    errs = []
    Ms = [16, 32, 64, 128]
    for M in Ms:
        tree = build_tree(IntensityKernel([phi]), ClockA.identity(T), M, recombine=True)
        sol = solve_bsde_tree(tree, FrozenDriver(DriverSpec("linear", a=a, c=c, g=(g,)), tree), leaf_jumps(tree))
        errs.append(abs(sol.root - exact))
    slope = np.polyfit(np.log(Ms), np.log(errs), 1)[0]
    assert -1.2 <= slope <= -0.8


def test_csv_has_one_row_per_node():
    tree, drv, xi, obst = random_problem(1, M=2, m=1)
    sol = solve_rbsde_tree(tree, drv, xi, obst)
    lines = sol.to_csv().splitlines()
    assert len(lines) == 1 + sum(tree.level_size(i) for i in range(tree.M + 1))
