"""Command-line entry point.

Every run writes its artifacts plus ``manifest.json`` (config hash, seed,
library versions and a digest of every output) into ``--out``. Output is a
pure function of the effective config and seed: JSON is written with sorted
keys, CSV floats with ``repr``, and no timestamps are recorded.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 regime
refusal, 4 budget refusal, 5 non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .benchmarks import random_model
from .config import (
    DEFAULTS,
    ConfigSchema,
    config_hash,
    effective_budget,
    load_config,
    parse_config,
    require_model,
)
from .convergence import chaos_bound_check, lln_study
from .errors import BudgetError, ConfigError, ConvergenceError, MfRbsdeError, RegimeError
from .meanfield import (
    _jsonable,
    bounded_regime_report,
    frozen_problem,
    regularity_probe,
    solve_mf_rbsde,
    solve_with_stitching,
)
from .models import contraction_params, validate_assumptions
from .mpp_sim import simulate_mpp
from .particles import sample_iid_copies
from .rbsde_core import snell_bruteforce, solve_rbsde_tree
from .rng import stream

ORACLE_TOL = 1e-10


class Outputs:
    """Single writer for a run's artifacts."""

    def __init__(self, root: Path):
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}

    def text(self, name: str, content: str):
        data = content.encode()
        (self.root / name).write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()

    def json(self, name: str, obj):
        self.text(name, json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def _versions() -> dict:
    import pydantic
    import scipy
    import yaml

    return {
        "mfrbsde": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pydantic": pydantic.VERSION,
        "pyyaml": yaml.__version__,
        "python": platform.python_version(),
    }


def _pool_map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# subcommands ---------------------------------------------------------------


def cmd_validate(cfg: ConfigSchema, out: Outputs, threads: int) -> int:
    model = require_model(cfg)
    rep = validate_assumptions(model, probes=cfg.run.probes, seed=cfg.seed).to_dict()
    try:
        rep["contraction"] = contraction_params(model).to_dict()
    except RegimeError as exc:
        rep["contraction"] = {"refused": str(exc), "margin": exc.margin}
    out.json("report.json", rep)
    return 0


def cmd_solve(cfg: ConfigSchema, out: Outputs, threads: int) -> int:
    model = require_model(cfg)
    mf = solve_mf_rbsde(model, cfg.run.tol, cfg.run.max_iter, recombine=cfg.run.recombine)
    summary = mf.summary()
    summary["residuals"] = mf.system_residual()
    out.json("summary.json", summary)
    out.text("nodes.csv", mf.solution.to_csv())
    out.text("flow.csv", mf.flow.to_csv())
    if model.framework == "poisson":
        bounded = bounded_regime_report(mf)
        if model.M + 1 >= 8:
            reg = regularity_probe(mf, model.order)
            bounded.update(regularity_C_increment=reg.C_increment, regularity_C_product=reg.C_product)
        out.json("bounded.json", bounded)
    return 0


def oracle_case(seed: int, budget: int = DEFAULTS["rule_budget"]) -> dict:
    """One seeded Snell-oracle comparison on a model with ``M <= 4`` and ``m <= 2``."""
    rng = stream(seed, 5)
    m = int(rng.integers(1, 3))
    M = int(rng.integers(1, 5 if m == 1 else 4))
    model = random_model(seed, M=M, m=m)
    mf = solve_mf_rbsde(model, 1e-12, recombine=False)
    drv, xi, H = frozen_problem(mf)
    dp = solve_rbsde_tree(mf.tree, drv, xi, H).root
    bf = snell_bruteforce(mf.tree, drv, xi, H, budget=budget)
    return {"seed": seed, "M": M, "m": m, "dp": dp, "brute_force": bf.value,
            "diff": abs(dp - bf.value), "rules": bf.n_rules}


def cmd_snell_oracle(cfg: ConfigSchema, out: Outputs, threads: int) -> int:
    seeds = [cfg.seed * 1_000_003 + s for s in range(cfg.run.seeds)]
    cases = _pool_map(lambda s: oracle_case(s, cfg.run.rule_budget), seeds, threads)
    worst = max(c["diff"] for c in cases)
    out.text("oracle.csv", _csv(["seed", "M", "m", "dp", "brute_force", "diff", "rules"],
                                ([c[k] for k in ("seed", "M", "m", "dp", "brute_force", "diff", "rules")]
                                 for c in cases)))
    ok = worst < ORACLE_TOL
    out.json("oracle.json", {"cases": len(cases), "max_diff": worst, "tolerance": ORACLE_TOL, "passed": ok})
    return 0 if ok else 1


def cmd_simulate(cfg: ConfigSchema, out: Outputs, threads: int) -> int:
    model = require_model(cfg)
    rows = []
    counts = []
    for k in range(cfg.run.paths):
        path = simulate_mpp(model.kernel, model.clock, seed=stream(cfg.seed, 3, k))
        counts.append(len(path))
        rows.extend((k, float(t), model.marks.labels[j]) for t, j in zip(path.times, path.marks))
    out.text("paths.csv", _csv(["path", "time", "mark"], rows))
    out.json("simulate.json", {"paths": cfg.run.paths, "mean_count": float(np.mean(counts)),
                               "expected_count": model.kernel.total * model.clock.total})
    return 0


def cmd_chaos_check(cfg: ConfigSchema, out: Outputs, threads: int) -> int:
    model = require_model(cfg)
    rep = chaos_bound_check(model, cfg.run.n, tol=cfg.run.tol, budget=effective_budget(cfg))
    out.json("chaos.json", rep.to_dict())
    M = len(rep.V) - 1
    times = np.linspace(0.0, model.horizon, M + 1)
    out.text("gap.csv", _csv(["time", "weighted_gap"], zip(times.tolist(), rep.V)))
    return 0 if rep.verdict else 1


def cmd_lln_study(cfg: ConfigSchema, out: Outputs, threads: int) -> int:
    model = require_model(cfg)
    mf = solve_mf_rbsde(model, cfg.run.tol, cfg.run.max_iter, recombine=cfg.run.recombine)
    rep = lln_study(mf, cfg.run.n_list, cfg.run.reps, cfg.seed)
    out.json("lln.json", rep.to_dict())
    out.text("lln.csv", rep.to_csv())
    return 0


def cmd_stitch_check(cfg: ConfigSchema, out: Outputs, threads: int) -> int:
    model = require_model(cfg)
    tol = min(cfg.run.tol, 1e-12)
    single = solve_mf_rbsde(model, tol, cfg.run.max_iter, recombine=cfg.run.recombine)
    stitched = solve_with_stitching(model, tol, cfg.run.max_iter, h_step=cfg.run.h_step, tree=single.tree)
    diff = max(float(np.max(np.abs(a - b))) for a, b in zip(single.Y, stitched.Y))
    ok = diff < 1e-10
    out.json("stitch.json", {
        "max_node_diff": diff,
        "total_K_single": single.solution.total_K(),
        "total_K_stitched": stitched.solution.total_K(),
        "segments": stitched.segments,
        "passed": ok,
    })
    return 0 if ok else 1


def cmd_sample_copies(cfg: ConfigSchema, out: Outputs, threads: int) -> int:
    model = require_model(cfg)
    mf = solve_mf_rbsde(model, cfg.run.tol, cfg.run.max_iter, recombine=cfg.run.recombine)
    paths = sample_iid_copies(mf, cfg.run.copies, cfg.run.reps, cfg.seed)
    t = mf.tree.times
    rows = ((r, j, l, float(t[l]), float(paths[r, j, l]))
            for r in range(paths.shape[0]) for j in range(paths.shape[1]) for l in range(paths.shape[2]))
    out.text("copies.csv", _csv(["rep", "copy", "level", "time", "value"], rows))
    return 0


COMMANDS = {
    "validate": cmd_validate,
    "solve": cmd_solve,
    "snell-oracle": cmd_snell_oracle,
    "simulate": cmd_simulate,
    "chaos-check": cmd_chaos_check,
    "lln-study": cmd_lln_study,
    "stitch-check": cmd_stitch_check,
    "sample-copies": cmd_sample_copies,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads")
    common.add_argument("--tol", type=float, help="Picard tolerance")
    common.add_argument("--M", type=int, help="grid size")
    parser = argparse.ArgumentParser(prog="mfrbsde", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "snell-oracle":
            sp.add_argument("--seeds", type=int, help="number of seeded models")
        if name == "chaos-check":
            sp.add_argument("--n", type=int, help="number of particles")
        if name in ("lln-study", "sample-copies"):
            sp.add_argument("--reps", type=int, help="independent batches")
        if name == "lln-study":
            sp.add_argument("--n-list", type=lambda s: [int(x) for x in s.split(",")], help="comma-separated n values")
        if name == "sample-copies":
            sp.add_argument("--copies", type=int, help="copies per batch")
        if name == "simulate":
            sp.add_argument("--paths", type=int, help="number of paths")
        if name == "stitch-check":
            sp.add_argument("--h-step", type=float, help="interval length override")
    return parser


def _apply_overrides(cfg: ConfigSchema, args) -> ConfigSchema:
    run = {}
    for flag, key in (("tol", "tol"), ("seeds", "seeds"), ("n", "n"), ("reps", "reps"), ("n_list", "n_list"),
                      ("copies", "copies"), ("paths", "paths"), ("h_step", "h_step")):
        v = getattr(args, flag, None)
        if v is not None:
            run[key] = v
    data = cfg.model_dump()
    data["run"].update(run)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.M is not None:
        if data.get("model") is None:
            raise ConfigError("--M needs a model section")
        data["model"]["M"] = args.M
    return parse_config(data)


def _error_payload(exc: MfRbsdeError) -> dict:
    d = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
    if isinstance(exc, RegimeError):
        d["margin"] = exc.margin
    if isinstance(exc, BudgetError):
        d["required"], d["budget"] = exc.required, exc.budget
    if isinstance(exc, ConvergenceError):
        d["residuals"] = exc.residuals
    if getattr(exc, "step", None) is not None:
        d["step"] = exc.step
    return d


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Outputs(Path(args.out))
    manifest = {"command": args.command, "versions": _versions()}
    code = 0
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        manifest.update(config_hash=config_hash(cfg), seed=cfg.seed, budget=effective_budget(cfg))
        if cfg.model is not None:
            require_model(cfg).tree(max_leaves=effective_budget(cfg), recombine=cfg.run.recombine)
        code = COMMANDS[args.command](cfg, out, max(1, args.threads))
    except MfRbsdeError as exc:
        payload = _error_payload(exc)
        out.json("error.json", payload)
        print(json.dumps(_jsonable(payload), sort_keys=True))
        code = exc.exit_code
    manifest["exit_code"] = code
    manifest["outputs"] = dict(sorted(out.files.items()))
    (out.root / "manifest.json").write_text(json.dumps(_jsonable(manifest), sort_keys=True, indent=2) + "\n")
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
