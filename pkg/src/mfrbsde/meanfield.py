"""Picard solver for the mean-field reflected BSDE on a scenario tree.

Each Picard step freezes the node values ``Y^(k)`` and their exact law flow
``mu^(k)_t = P_{Y^(k)_t}``, then solves the standard reflected equation with
driver ``f(t, y, u, mu^(k)_t)`` and obstacle ``h(t, Y^(k)_t, mu^(k)_t)``.
Progress is measured in the weighted norm

    ||D||_beta^2 = sup_tau E[exp(2 beta A_tau) |D_tau|^2],

computed exactly as a Snell envelope on the tree, which is the norm in which
the map contracts with factor ``alpha`` from :func:`contraction_params`.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ConvergenceError, RegimeError
from .measures import DiscreteLaw, MeasureFlow
from .models import ContractionParams, ModelConfig, contraction_params
from .mpp_sim import ScenarioTree
from .rbsde_core import FrozenDriver, SolutionTriple, edge_residual, path_residual, solve_rbsde_tree

POLISH_TOL = 1e-14
POLISH_MAX = 200


def level_statistic(values: np.ndarray, probs: np.ndarray, form: str, p: float) -> float:
    """Mean or ``W_p``-distance to ``delta_0`` of the law of ``values`` under ``probs``."""
    if form == "mean":
        return float(np.sort(values * probs).sum())
    return float(np.sort(np.abs(values) ** p * probs).sum()) ** (1.0 / p)


def flow_statistics(tree: ScenarioTree, Y: list, form: str, p: float, lo: int = 0, hi: int | None = None):
    hi = tree.M if hi is None else hi
    out = [0.0] * (tree.M + 1)
    for i in range(lo, hi + 1):
        out[i] = level_statistic(Y[i], tree.node_prob[i], form, p)
    return out


def weighted_gap(tree: ScenarioTree, D: list, beta: float, lo: int = 0, hi: int | None = None) -> float:
    """``sup_tau E[exp(2 beta A_tau) |D_tau|^2]`` over stopping times in ``[t_lo, t_hi]``."""
    hi = tree.M if hi is None else hi
    A = np.concatenate(([0.0], np.cumsum(tree.dA)))
    S = np.exp(2 * beta * A[hi]) * D[hi] ** 2
    for i in range(hi - 1, lo - 1, -1):
        S = np.maximum(np.exp(2 * beta * A[i]) * D[i] ** 2, tree.expectation(S, i))
    return float(np.sort(tree.node_prob[lo] * S).sum())


@dataclass
class PicardStep:
    iteration: int
    sup_change: float
    weighted_gap: float
    ratio: float | None


@dataclass
class MfSolution:
    """Fixed point of the frozen-flow Picard map together with its diagnostics."""

    model: ModelConfig
    solution: SolutionTriple
    flow: MeasureFlow
    log: list
    params: ContractionParams | None
    alpha: float | None
    iterations: int
    polish_iterations: int = 0
    iteration_cap: int | None = None
    segments: list = field(default_factory=list)

    @property
    def tree(self) -> ScenarioTree:
        return self.solution.tree

    @property
    def Y(self) -> list:
        return self.solution.Y

    @property
    def root(self) -> float:
        return self.solution.root

    def max_ratio(self) -> float | None:
        ratios = [s.ratio for s in self.log if s.ratio is not None]
        return max(ratios) if ratios else None

    def contraction_report(self) -> dict:
        r = self.max_ratio()
        return {
            "alpha": self.alpha,
            "max_observed_ratio": r,
            "ratio_within_alpha": None if r is None or self.alpha is None else bool(r <= self.alpha),
            "iterations": self.iterations,
            "iteration_cap": self.iteration_cap,
            "within_cap": None if self.iteration_cap is None else bool(self.iterations <= self.iteration_cap),
        }

    def _live_coefficients(self):
        """Driver and obstacle re-evaluated at the final ``Y`` and its law flow."""
        mdl, tr, Y = self.model, self.tree, self.Y
        p = mdl.order
        dstats = flow_statistics(tr, Y, mdl.driver.measure_form, p)
        ostats = flow_statistics(tr, Y, mdl.obstacle.measure_form, p)
        drv = FrozenDriver(mdl.driver, tr, dstats)
        H = [mdl.obstacle(tr.times[i], Y[i], tr.state(i), ostats[i]) for i in range(tr.M + 1)]
        # the scheme evaluates f at the pre-reflection value Y - dK
        F = [drv(i, Y[i] - self.solution.dK[i], self.solution.U[i]) for i in range(tr.M + 1)]
        return H, F

    def system_residual(self) -> dict:
        """Residuals of the mean-field system with the converged flow inserted.

        ``edge`` is the one-step identity over every edge, ``path`` the integrated
        equation along every leaf path (full trees), ``dominance`` the smallest
        ``Y - h(t, Y, P_Y)`` and ``flat_off`` the largest ``|(Y - h) dK|`` with
        the obstacle the final solve reflected against.
        """
        s = self.solution
        H, F = self._live_coefficients()
        out = {
            "edge": edge_residual(s.tree, s.Y, s.U, F, s.dK, 0, s.tree.M),
            "dominance": float(min(np.min(s.Y[i] - H[i]) for i in range(s.tree.M + 1))),
            "flat_off": s.flat_off(),
        }
        if not s.tree.recombining:
            out["path"] = path_residual(s.tree, s.Y, s.U, F, s.dK, 0, s.tree.M)
        return out

    def summary(self) -> dict:
        d = self.solution.summary()
        d.update(
            framework=self.model.framework,
            M=self.tree.M,
            iterations=self.iterations,
            polish_iterations=self.polish_iterations,
            contraction=self.contraction_report(),
            params=None if self.params is None else self.params.to_dict(),
            segments=self.segments,
            log=[vars(s) for s in self.log],
        )
        return d

    def summary_json(self) -> str:
        return json.dumps(_jsonable(self.summary()), sort_keys=True, indent=2)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def _initial_guess(model: ModelConfig, tree: ScenarioTree, terminal, lo, hi, init: str) -> list:
    Y = [None] * (tree.M + 1)
    Y[hi] = np.asarray(terminal, dtype=float)
    if init == "terminal":
        for i in range(hi - 1, lo - 1, -1):
            Y[i] = tree.expectation(Y[i + 1], i)
    elif init == "obstacle" and model.obstacle.active:
        for i in range(lo, hi):
            n = tree.level_size(i)
            Y[i] = np.asarray(model.obstacle(tree.times[i], np.zeros(n), tree.state(i), 0.0), dtype=float)
            Y[i] = np.broadcast_to(Y[i], (n,)).copy()
    elif init in ("zero", "obstacle"):
        # an inactive obstacle sits at a sentinel level, so start from zero instead
        for i in range(lo, hi):
            Y[i] = np.zeros(tree.level_size(i))
    else:
        raise ConfigError(f"unknown Picard initialization {init!r}")
    return Y


def _picard_map(model: ModelConfig, tree: ScenarioTree, Yk: list, terminal, lo: int, hi: int) -> SolutionTriple:
    p = model.order
    dstats = flow_statistics(tree, Yk, model.driver.measure_form, p, lo, hi)
    ostats = flow_statistics(tree, Yk, model.obstacle.measure_form, p, lo, hi)
    drv = FrozenDriver(model.driver, tree, dstats)
    H = [None] * (tree.M + 1)
    for i in range(lo, hi + 1):
        H[i] = model.obstacle(tree.times[i], Yk[i], tree.state(i), ostats[i])
    return solve_rbsde_tree(tree, drv, terminal, H, lo=lo, hi=hi)


def _iteration_cap(alpha: float | None, first_gap: float, tol: float, p_min: float) -> int | None:
    # sup-node change^2 <= weighted gap / p_min, and the gap shrinks by alpha per step
    if alpha is None or not 0 < alpha < 1 or first_gap <= 0:
        return None
    target = tol**2 * p_min / first_gap
    if target >= 1:
        return 1
    return int(math.ceil(math.log(target) / math.log(alpha))) + 1


def picard_segment(
    model: ModelConfig,
    tree: ScenarioTree,
    terminal,
    lo: int,
    hi: int,
    *,
    beta: float,
    alpha: float | None,
    tol: float,
    max_iter: int,
    init: str = "terminal",
    polish: bool = True,
):
    """Run the Picard iteration on levels ``lo..hi`` with fixed terminal data.

    Returns the final solution, the iteration log, the count of iterations
    needed to reach ``tol``, the count of polishing sweeps and the cap.
    """
    if model.measure_free and model.obstacle.y_free:
        # the frozen arguments are absent, so the map is constant
        sol = _picard_map(model, tree, _initial_guess(model, tree, terminal, lo, hi, "zero"), terminal, lo, hi)
        sol.iterations = 1
        return sol, [PicardStep(1, 0.0, 0.0, None)], 1, 0, 1

    Yk = _initial_guess(model, tree, terminal, lo, hi, init)
    p_min = min(float(np.min(tree.node_prob[i][tree.node_prob[i] > 0])) for i in range(lo, hi + 1))
    log: list = []
    prev_gap = None
    cap = None
    sol = None
    converged_at = None
    polish_count = 0
    last_change = math.inf
    for k in range(1, max_iter + 1):
        sol = _picard_map(model, tree, Yk, terminal, lo, hi)
        D = [None] * (tree.M + 1)
        for i in range(lo, hi + 1):
            D[i] = sol.Y[i] - Yk[i]
        change = max(float(np.max(np.abs(D[i]))) for i in range(lo, hi + 1))
        gap = weighted_gap(tree, D, beta, lo, hi)
        if converged_at is None:
            ratio = None if prev_gap in (None, 0.0) else gap / prev_gap
            log.append(PicardStep(k, change, gap, ratio))
            if k == 1:
                cap = _iteration_cap(alpha, gap, tol, p_min)
            prev_gap = gap
        Yk = sol.Y
        if converged_at is None and change < tol:
            converged_at = k
            if not polish:
                break
        if converged_at is not None:
            if change <= POLISH_TOL or change >= last_change or polish_count >= POLISH_MAX:
                break
            polish_count += 1
        last_change = change
    if converged_at is None:
        raise ConvergenceError(
            f"Picard iteration did not reach tol={tol:g} within {max_iter} iterations",
            [s.sup_change for s in log],
        )
    sol.iterations = converged_at
    return sol, log, converged_at, polish_count, cap


def _params_or_none(model: ModelConfig):
    try:
        return contraction_params(model)
    except RegimeError:
        return None


def solve_mf_rbsde(
    model: ModelConfig,
    tol: float = 1e-10,
    max_iter: int = 200,
    *,
    init: str = "terminal",
    tree: ScenarioTree | None = None,
    recombine: bool = True,
) -> MfSolution:
    """Solve the mean-field reflected BSDE by Picard iteration on the full horizon.

    Out-of-regime models are still solved; the contraction report then
    carries no ``alpha``.
    """
    tree = model.tree(recombine=recombine) if tree is None else tree
    params = _params_or_none(model)
    beta = params.beta if params is not None else 0.0
    alpha = params.alpha_full if params is not None and params.alpha_full < 1 else None
    xi = model.terminal_values(tree)
    sol, log, its, pol, cap = picard_segment(
        model, tree, xi, 0, tree.M, beta=beta, alpha=alpha, tol=tol, max_iter=max_iter, init=init
    )
    flow = MeasureFlow(tree.times, [DiscreteLaw.from_weighted(sol.Y[i], tree.node_prob[i])
                                    for i in range(tree.M + 1)])
    return MfSolution(model, sol, flow, log, params, alpha, its, pol, cap)


def stitch_levels(times: np.ndarray, h_step: float) -> list:
    """Level breakpoints ``0 = l_0 < ... < l_J = M`` with ``t_{l_{j+1}} - t_{l_j} <= h_step``.

    Built backward from ``T``; every interval holds at least one grid step.
    """
    M = times.size - 1
    cuts = [M]
    cur = M
    while cur > 0:
        nxt = cur - 1
        while nxt > 0 and times[cur] - times[nxt - 1] <= h_step * (1 + 1e-12):
            nxt -= 1
        cuts.append(nxt)
        cur = nxt
    return cuts[::-1]


def solve_with_stitching(
    model: ModelConfig,
    tol: float = 1e-10,
    max_iter: int = 200,
    *,
    h_step: float | None = None,
    tree: ScenarioTree | None = None,
    recombine: bool = True,
) -> MfSolution:
    """Solve interval by interval, backward, pasting the pieces together.

    Each interval uses the initial level of the interval after it as terminal
    data; ``dK`` lives on nodes, so ``K`` pastes additively.
    """
    tree = model.tree(recombine=recombine) if tree is None else tree
    params = contraction_params(model)
    h = params.h_step if h_step is None else float(h_step)
    cuts = stitch_levels(tree.times, h)
    A = np.concatenate(([0.0], np.cumsum(tree.dA)))
    n = tree.M + 1
    Y, U, dK, H, F = [None] * n, [None] * n, [None] * n, [None] * n, [None] * n
    terminal = model.terminal_values(tree)
    log: list = []
    total_its = total_pol = 0
    caps = []
    segments = []
    for lo, hi in reversed(list(zip(cuts[:-1], cuts[1:]))):
        a = params.interval_alpha(A[lo], A[hi])
        sol, seg_log, its, pol, cap = picard_segment(
            model, tree, terminal, lo, hi, beta=params.beta, alpha=a if a < 1 else None,
            tol=tol, max_iter=max_iter,
        )
        for i in range(lo, hi + 1):
            if i == hi and Y[i] is not None:
                continue
            Y[i], U[i], dK[i], H[i], F[i] = sol.Y[i], sol.U[i], sol.dK[i], sol.h[i], sol.f[i]
        terminal = sol.Y[lo]
        log.extend(seg_log)
        total_its += its
        total_pol += pol
        caps.append(cap)
        segments.append({"levels": [int(lo), int(hi)], "alpha": a, "iterations": its, "cap": cap})
    triple = SolutionTriple(tree, Y, U, dK, H, F, 0, tree.M, total_its)
    flow = MeasureFlow(tree.times, [DiscreteLaw.from_weighted(Y[i], tree.node_prob[i]) for i in range(n)])
    cap = None if any(c is None for c in caps) else sum(caps)
    return MfSolution(model, triple, flow, log, params, None, total_its, total_pol, cap, segments[::-1])


def uniqueness_gap(model: ModelConfig, tol: float = 1e-10, **kw) -> float:
    """Largest node difference between solves started from ``E[xi | node]`` and from the obstacle."""
    a = solve_mf_rbsde(model, tol, init="terminal", **kw)
    b = solve_mf_rbsde(model, tol, init="obstacle", tree=a.tree)
    return max(float(np.max(np.abs(a.Y[i] - b.Y[i]))) for i in range(a.tree.M + 1))


def bounded_regime_report(mf: MfSolution) -> dict:
    """Sup norms of ``Y`` and ``U``, the ``K`` mass and the ``||U|| <= 2 ||Y||`` check."""
    if mf.model.framework != "poisson":
        raise ConfigError("the bounded-regime report applies to the poisson framework")
    sY, sU = mf.solution.sup_Y(), mf.solution.sup_U()
    return {
        "sup_Y": sY,
        "sup_U": sU,
        "total_K": mf.solution.total_K(),
        "u_bound_holds": bool(sU <= 2 * sY + 1e-12),
        "u_bound_margin": 2 * sY - sU,
    }


@dataclass
class RegularityTable:
    order: float
    pairs: np.ndarray
    moments: np.ndarray
    C_increment: float
    C_product: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["s", "t", "moment", "ratio"])
        for (s, t), mom in zip(self.pairs, self.moments):
            w.writerow([repr(float(s)), repr(float(t)), repr(float(mom)), repr(float(mom / (t - s)))])
        return buf.getvalue()


def regularity_probe(mf: MfSolution, p: float = 2) -> RegularityTable:
    """Exact ``E|Y_t - Y_s|^p`` over all grid pairs and the three-point product moment.

    Returns the largest ratios ``E|Y_t - Y_s|^p / |t - s|`` and
    ``E[|Y_s - Y_r|^p |Y_t - Y_s|^p] / |t - r|^2``.
    """
    if mf.model.framework != "poisson":
        raise ConfigError("the regularity probe applies to the poisson framework")
    tr, Y = mf.tree, mf.Y
    M = tr.M
    if M + 1 < 8:
        raise ConfigError("the regularity probe needs at least 8 grid points")
    t = tr.times
    steps = [tr.transition(i).toarray() for i in range(M)]
    # trans[s][t] : node-to-node transition matrix from level s to level t
    trans = [[None] * (M + 1) for _ in range(M + 1)]
    for s in range(M + 1):
        P = np.eye(tr.level_size(s))
        trans[s][s] = P
        for k in range(s, M):
            P = P @ steps[k]
            trans[s][k + 1] = P
    # g[s][t](w) = E[|Y_t - Y_s|^p | node w at level s]
    g = [[None] * (M + 1) for _ in range(M + 1)]
    for s in range(M + 1):
        for u in range(s + 1, M + 1):
            diff = np.abs(Y[u][None, :] - Y[s][:, None]) ** p
            g[s][u] = np.sum(trans[s][u] * diff, axis=1)
    pairs, moments = [], []
    C1 = 0.0
    for s in range(M + 1):
        for u in range(s + 1, M + 1):
            mom = float(tr.node_prob[s] @ g[s][u])
            pairs.append((t[s], t[u]))
            moments.append(mom)
            C1 = max(C1, mom / (t[u] - t[s]))
    C2 = 0.0
    for r in range(M + 1):
        for s in range(r + 1, M + 1):
            inc = np.abs(Y[s][None, :] - Y[r][:, None]) ** p * trans[r][s]
            for u in range(s + 1, M + 1):
                mom = float(tr.node_prob[r] @ (inc @ g[s][u]))
                C2 = max(C2, mom / (t[u] - t[r]) ** 2)
    return RegularityTable(float(p), np.array(pairs), np.array(moments), C1, C2)


def frozen_problem(mf: MfSolution):
    """Driver, terminal values and obstacle levels with the converged law flow frozen in.

    Solving this standard reflected problem reproduces ``mf`` up to the
    Picard tolerance; it is what the brute-force Snell oracle is run against.
    """
    mdl, tr, Y = mf.model, mf.tree, mf.Y
    p = mdl.order
    drv = FrozenDriver(mdl.driver, tr, flow_statistics(tr, Y, mdl.driver.measure_form, p))
    ostats = flow_statistics(tr, Y, mdl.obstacle.measure_form, p)
    H = [mdl.obstacle(tr.times[i], Y[i], tr.state(i), ostats[i]) for i in range(tr.M + 1)]
    return drv, mdl.terminal_values(tr), H
