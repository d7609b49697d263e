"""Acceptance criteria 1-10, one test each.

Every test records a ``[PASS]``/``[FAIL]`` line, printed in the pytest terminal
summary. Run this file directly to print the lines without pytest.
"""

import itertools
import math
import time
from pathlib import Path

import numpy as np

from mfrbsde.benchmarks import (
    bounded_poisson_model,
    linear_mean_model,
    linear_mean_recursion,
    random_model,
    two_atom_model,
)
from mfrbsde.cli import oracle_case, run
from mfrbsde.convergence import chaos_bound_check, lln_study
from mfrbsde.errors import RegimeError
from mfrbsde.meanfield import bounded_regime_report, regularity_probe, solve_mf_rbsde, uniqueness_gap
from mfrbsde.models import DriverSpec, ObstacleSpec, TerminalSpec, contraction_params
from mfrbsde.mpp_sim import ClockA, IntensityKernel, MarkSpace, build_tree
from mfrbsde.particles import solve_particle_system_exact
from mfrbsde.rbsde_core import FrozenDriver, solve_bsde_tree

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def record(log, number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    log.append(line)
    print(line)
    assert ok, line


def in_regime_models(count, **kw):
    out, seed = [], 0
    while len(out) < count:
        model = random_model(seed, **kw)
        seed += 1
        try:
            if contraction_params(model).alpha_full < 1:
                out.append(model)
        except RegimeError:
            pass
    return out


def test_snell_oracle_equivalence(acceptance_log):
    start = time.perf_counter()
    cases = [oracle_case(seed) for seed in range(100)]
    elapsed = time.perf_counter() - start
    worst = max(c["diff"] for c in cases)
    assert all(c["M"] <= 4 and c["m"] <= 2 for c in cases)
    record(acceptance_log, 1, worst < 1e-10 and elapsed < 60,
           f"snell oracle over {len(cases)} models, max |DP - brute force| = {worst:.2e} in {elapsed:.1f}s")


def test_picard_contraction_and_uniqueness(acceptance_log):
    tol = 1e-10
    models = in_regime_models(50)
    ratio_ok = cap_ok = True
    worst_ratio_slack = math.inf
    worst_gap = 0.0
    for model in models:
        mf = solve_mf_rbsde(model, tol=tol)
        if mf.alpha is not None:
            for step in mf.log:
                if step.ratio is not None:
                    ratio_ok &= step.ratio <= mf.alpha
                    worst_ratio_slack = min(worst_ratio_slack, mf.alpha - step.ratio)
            if mf.iteration_cap is not None:
                cap_ok &= mf.iterations <= mf.iteration_cap
        worst_gap = max(worst_gap, uniqueness_gap(model, tol=tol))
    ok = ratio_ok and cap_ok and worst_gap <= 10 * tol
    record(acceptance_log, 2, ok,
           f"{len(models)} in-regime models, ratio <= alpha: {ratio_ok} (min slack {worst_ratio_slack:.3g}), "
           f"within cap: {cap_ok}, uniqueness gap {worst_gap:.2e}")


def test_reflection_invariants(acceptance_log):
    worst_dom, worst_flat, runs = math.inf, 0.0, 0
    models = in_regime_models(30) + [bounded_poisson_model(M=16), two_atom_model()]
    for model in models:
        res = solve_mf_rbsde(model, tol=1e-12).system_residual()
        worst_dom = min(worst_dom, res["dominance"])
        worst_flat = max(worst_flat, res["flat_off"])
        runs += 1
    for seed in range(5):
        res = solve_particle_system_exact(random_model(seed, M=2, m=1), 2, tol=1e-13).residuals()
        worst_dom = min(worst_dom, res["dominance"])
        worst_flat = max(worst_flat, res["flat_off"])
        runs += 1
    record(acceptance_log, 3, worst_dom >= -1e-12 and worst_flat == 0.0,
           f"{runs} fixed points, min(Y - h) = {worst_dom:.2e}, max |(Y - h) dK| = {worst_flat:.1e}")


def test_pathwise_residuals(acceptance_log):
    mf_worst = ps_worst = 0.0
    for model in in_regime_models(20):
        res = solve_mf_rbsde(model, tol=1e-13, recombine=False).system_residual()
        mf_worst = max(mf_worst, res["path"], res["edge"])
    for seed in range(6):
        res = solve_particle_system_exact(random_model(seed, M=2, m=1), 2 + seed % 2, tol=1e-13).residuals()
        ps_worst = max(ps_worst, res["path"], res["edge"])
    record(acceptance_log, 4, mf_worst <= 1e-12 and ps_worst <= 1e-12,
           f"max pathwise residual mean-field {mf_worst:.2e}, particles {ps_worst:.2e}")


def test_linear_closed_form(acceptance_log):
    model = linear_mean_model(a=0.5, b=0.3, xi=1.0, T=0.25, M=8)
    mf = solve_mf_rbsde(model, tol=1e-13)
    expect = linear_mean_recursion(0.5, 0.3, 1.0, mf.tree.dA)
    err = max(float(np.max(np.abs(mf.Y[i] - expect[i]))) for i in range(mf.tree.M + 1))
    a, g, c, phi, T = 0.8, 0.5, 0.3, 1.0, 1.0
    exact = math.exp(a * T) * phi * (1 + g) * T + c * (math.exp(a * T) - 1) / a
    Ms = [16, 32, 64, 128]
    errs = []
    for M in Ms:
        tree = build_tree(IntensityKernel([phi]), ClockA.identity(T), M, recombine=True)
        sol = solve_bsde_tree(tree, FrozenDriver(DriverSpec("linear", a=a, c=c, g=(g,)), tree),
                              tree.jump_count(M).astype(float))
        errs.append(abs(sol.root - exact))
    order = -float(np.polyfit(np.log(Ms), np.log(errs), 1)[0])
    record(acceptance_log, 5, err <= 1e-10 and 0.8 <= order <= 1.2,
           f"recursion oracle error {err:.2e}, refinement order {order:.3f}")


def test_chaos_bound(acceptance_log):
    checked, min_ratio, all_ok = 0, math.inf, True
    seed = 0
    while checked < 20:
        model = random_model(seed, M=2 + seed % 2, m=1, max_gamma=0.24)
        seed += 1
        for n in (2, 3):
            rep = chaos_bound_check(model, n)
            all_ok &= rep.verdict
            if rep.lhs > 0:
                min_ratio = min(min_ratio, rep.bound / rep.lhs)
            checked += 1
    refused = random_model(0, M=2, m=1).with_(obstacle=ObstacleSpec("linear", c0=-5.0, k1=0.3, k2=0.3))
    try:
        chaos_bound_check(refused, 2)
        margin = None
    except RegimeError as exc:
        margin = exc.margin
    ok = all_ok and margin is not None and abs(margin + 0.055) < 1e-12
    record(acceptance_log, 6, ok,
           f"{checked} exact checks hold (min bound/lhs {min_ratio:.3g}); gamma=0.3 refused with margin {margin}")


def test_lln_rate(acceptance_log):
    start = time.perf_counter()
    mf = solve_mf_rbsde(two_atom_model())
    rep = lln_study(mf, [16, 32, 64, 128, 256, 512, 1024, 2048, 4096], reps=200, seed=0)
    elapsed = time.perf_counter() - start
    fit = rep.fit
    ok = -0.65 <= fit.slope <= -0.35 and fit.r2 >= 0.95 and elapsed < 300
    record(acceptance_log, 7, ok, f"slope {fit.slope:.4f}, R^2 {fit.r2:.4f}, {elapsed:.1f}s")


def test_bounded_regime(acceptance_log):
    bound_ok = True
    for model in (bounded_poisson_model(M=16), bounded_poisson_model(M=32), two_atom_model(),
                  two_atom_model(M=8, lo=-0.5, hi=0.5)):
        bound_ok &= bounded_regime_report(solve_mf_rbsde(model))["u_bound_holds"]
    drifts = {}
    for p in (1, 2):
        coarse = regularity_probe(solve_mf_rbsde(bounded_poisson_model(M=16)), p=p)
        fine = regularity_probe(solve_mf_rbsde(bounded_poisson_model(M=32)), p=p)
        drifts[f"inc p={p}"] = abs(fine.C_increment / coarse.C_increment - 1)
        drifts[f"prod p={p}"] = abs(fine.C_product / coarse.C_product - 1)
    worst = max(drifts.values())
    record(acceptance_log, 8, bound_ok and worst < 0.25,
           f"||U|| <= 2||Y|| on all runs: {bound_ok}; max regularity drift M=16 -> 32: {worst:.1%}")


def test_exchangeability(acceptance_log):
    compared = 0
    ok = True
    for seed in range(3):
        ps = solve_particle_system_exact(random_model(seed, M=2, m=1), 3, tol=1e-13)
        tr = ps.tree
        m = tr.block_size
        for perm in itertools.permutations(range(3)):
            for l in range(tr.M + 1):
                for digits in itertools.product(range(tr.branching), repeat=l):
                    v = tr.node_of_path(list(digits))
                    moved = [0 if b == 0 else 1 + perm[(b - 1) // m] * m + (b - 1) % m for b in digits]
                    w = tr.node_of_path(moved)
                    for i in range(3):
                        ok &= ps.Y[l][v, i] == ps.Y[l][w, perm[i]]
                        ok &= ps.dK[l][v, i] == ps.dK[l][w, perm[i]]
                        compared += 2
    record(acceptance_log, 9, bool(ok), f"{compared} relabelled node values compared, exact equality: {bool(ok)}")


def test_determinism(acceptance_log, tmp_path):
    root = Path(tmp_path)
    runs = [
        ("validate", "in_regime.yaml", []),
        ("solve", "in_regime.yaml", []),
        ("solve", "bounded_poisson.yaml", []),
        ("simulate", "in_regime.yaml", ["--paths", "5"]),
        ("chaos-check", "in_regime.yaml", ["--M", "3"]),
        ("lln-study", "two_atom.yaml", ["--n-list", "16,32,64", "--reps", "20"]),
        ("stitch-check", "in_regime.yaml", ["--h-step", "0.1"]),
        ("sample-copies", "in_regime.yaml", ["--copies", "3", "--reps", "2"]),
        ("snell-oracle", None, ["--seeds", "3"]),
    ]
    same = True
    for k, (cmd, cfg, extra) in enumerate(runs):
        dumps = []
        for rep in range(2):
            out = root / f"{k}-{rep}"
            args = [cmd, "--out", str(out), *extra] + (["--config", str(CONFIGS / cfg)] if cfg else [])
            assert run(args) == 0
            dumps.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        same &= dumps[0] == dumps[1]
    record(acceptance_log, 10, same, f"{len(runs)} subcommands rerun, byte-identical outputs: {same}")


if __name__ == "__main__":
    tests = [test_snell_oracle_equivalence, test_picard_contraction_and_uniqueness, test_reflection_invariants,
             test_pathwise_residuals, test_linear_closed_form, test_chaos_bound, test_lln_rate,
             test_bounded_regime, test_exchangeability, test_determinism]
    import inspect
    import tempfile

    lines: list = []
    for t in tests:
        kwargs = {"acceptance_log": lines}
        if "tmp_path" in inspect.signature(t).parameters:
            kwargs["tmp_path"] = Path(tempfile.mkdtemp())
        try:
            t(**kwargs)
        except AssertionError:
            pass
