"""Interacting particle systems on the joint tree, and iid copies of the limit.

The joint noise of ``n`` particles is the superposition of ``n`` independent
marked point processes. Its one-jump-per-step tree has ``1 + n m`` branches
(no jump, or a jump of mark ``k`` for particle ``j``), and each particle's own
coordinate process has exactly the single-particle tree law. Because the
branching matches the number of martingale directions, the representation
``U^{i,j}(e_k) = Y^i(jump of particle j with mark k) - Y^i(no jump)`` is exact
and the cross kernels ``U^{i,j}`` are pinned down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError
from .meanfield import MfSolution, solve_mf_rbsde
from .models import ModelConfig
from .mpp_sim import DEFAULT_LEAF_BUDGET, ScenarioTree, build_tree
from .rbsde_core import FrozenDriver, edge_residual, path_residual, solve_rbsde_tree
from .rng import stream

POLISH_TOL = 1e-14


def joint_tree(model: ModelConfig, n: int, M: int | None = None, budget: int = DEFAULT_LEAF_BUDGET) -> ScenarioTree:
    return build_tree(model.kernel, model.clock, model.M if M is None else M, marks=model.marks,
                      recombine=False, n_blocks=n, max_leaves=budget)


def empirical_statistic(Y: np.ndarray, form: str, p: float) -> np.ndarray:
    """Node-wise mean or ``W_p(L_n, delta_0)`` of the particle values ``Y`` (shape ``(N, n)``).

    Values are sorted before summation, so the result is invariant under
    relabelling the particles bit for bit.
    """
    n = Y.shape[1]
    if form == "mean":
        return np.sort(Y, axis=1).sum(axis=1) / n
    return (np.sort(np.abs(Y) ** p, axis=1).sum(axis=1) / n) ** (1.0 / p)


@dataclass
class ParticleSolution:
    """Per-particle ``(Y^i, U^{i,.}, dK^i)`` on the joint tree.

    ``Y[l]`` has shape ``(N_l, n)``; ``U[l]`` has shape ``(N_l, n, n m)`` with
    columns grouped by the particle whose jump they price; ``dK[l]`` and
    ``h[l]`` have shape ``(N_l, n)``.
    """

    model: ModelConfig
    tree: ScenarioTree
    n: int
    Y: list
    U: list
    dK: list
    h: list
    f: list
    iterations: int
    log: list

    def cross_kernel(self, level: int, i: int, j: int) -> np.ndarray:
        """``U^{i,j}`` at a level: shape ``(N_l, m)``."""
        m = self.tree.block_size
        return self.U[level][:, i, j * m:(j + 1) * m]

    def empirical_stats(self, form: str) -> list:
        return [empirical_statistic(y, form, self.model.order) for y in self.Y]

    def cumulative_K(self) -> list:
        tr = self.tree
        K = [np.zeros((1, self.n))]
        for l in range(1, tr.M + 1):
            par = tr.parents(l)
            K.append(K[-1][par] + self.dK[l - 1][par])
        return K

    def residuals(self) -> dict:
        """Equation residuals (edge-wise and pathwise), dominance and flat-off, all particles.

        Driver and obstacle are re-evaluated with the converged empirical
        measures; flat-off uses the obstacle of the final solve.
        """
        mdl, tr = self.model, self.tree
        p = mdl.order
        dstats = self.empirical_stats(mdl.driver.measure_form)
        ostats = self.empirical_stats(mdl.obstacle.measure_form)
        edge = path = flat = 0.0
        dom = math.inf
        for i in range(self.n):
            drv = FrozenDriver(mdl.driver, tr, dstats, block=i)
            Yi = [y[:, i] for y in self.Y]
            Ui = [u[:, i, :] for u in self.U]
            dKi = [k[:, i] for k in self.dK]
            F = [drv(l, Yi[l] - dKi[l], Ui[l]) for l in range(tr.M + 1)]
            H = [mdl.obstacle(tr.times[l], Yi[l], tr.state(l, i), ostats[l]) for l in range(tr.M + 1)]
            edge = max(edge, edge_residual(tr, Yi, Ui, F, dKi, 0, tr.M))
            path = max(path, path_residual(tr, Yi, Ui, F, dKi, 0, tr.M))
            dom = min(dom, min(float(np.min(Yi[l] - H[l])) for l in range(tr.M + 1)))
            flat = max(flat, max(float(np.max(np.abs((Yi[l] - self.h[l][:, i]) * dKi[l])))
                                 for l in range(tr.M + 1)))
        mono = min(float(np.min(k)) for k in self.dK)
        return {"edge": edge, "path": path, "dominance": dom, "flat_off": flat, "K_increment_min": mono}


def solve_particle_system_exact(
    model: ModelConfig,
    n: int,
    M: int | None = None,
    *,
    tol: float = 1e-10,
    max_iter: int = 200,
    budget: int = DEFAULT_LEAF_BUDGET,
) -> ParticleSolution:
    """Picard iteration for the ``n``-particle system on the joint tree.

    Every sweep freezes all particles' node values and the node-wise empirical
    measure, then solves each particle's reflected recursion with driver
    ``f(t, y, u^{i,i}, L_n)`` and obstacle ``h(t, Y^{i,(k)}, L_n^{(k)})``.
    """
    tr = joint_tree(model, n, M, budget)
    p = model.order
    xi = np.stack([model.terminal_values(tr, i) for i in range(n)], axis=1)
    Yk = [None] * (tr.M + 1)
    Yk[tr.M] = xi
    for l in range(tr.M - 1, -1, -1):
        Yk[l] = tr.expectation(Yk[l + 1], l)
    log = []
    converged_at = None
    last = math.inf
    for k in range(1, max_iter + 1):
        dstats = [empirical_statistic(y, model.driver.measure_form, p) for y in Yk]
        ostats = [empirical_statistic(y, model.obstacle.measure_form, p) for y in Yk]
        Y = [np.empty_like(y) for y in Yk]
        U = [np.empty((y.shape[0], n, tr.n_marks)) for y in Yk]
        dK = [np.empty_like(y) for y in Yk]
        H = [np.empty_like(y) for y in Yk]
        F = [np.empty_like(y) for y in Yk]
        for i in range(n):
            drv = FrozenDriver(model.driver, tr, dstats, block=i)
            obst = [model.obstacle(tr.times[l], Yk[l][:, i], tr.state(l, i), ostats[l]) for l in range(tr.M + 1)]
            sol = solve_rbsde_tree(tr, drv, xi[:, i], obst)
            for l in range(tr.M + 1):
                Y[l][:, i] = sol.Y[l]
                U[l][:, i, :] = sol.U[l]
                dK[l][:, i] = sol.dK[l]
                H[l][:, i] = sol.h[l]
                F[l][:, i] = sol.f[l]
        change = max(float(np.max(np.abs(Y[l] - Yk[l]))) for l in range(tr.M + 1))
        Yk = Y
        if converged_at is None:
            log.append(change)
            if change < tol:
                converged_at = k
        if converged_at is not None and (change <= POLISH_TOL or change >= last):
            break
        last = change
    if converged_at is None:
        raise ConvergenceError(f"particle Picard iteration did not reach tol={tol:g}", log)
    return ParticleSolution(model, tr, n, Y, U, dK, H, F, converged_at, log)


def coordinate_nodes(tree: ScenarioTree, i: int) -> list:
    """For every joint node, the index of particle ``i``'s own path in the single full tree."""
    m = tree.block_size
    out = [np.zeros(1, dtype=int)]
    for l in range(tree.M):
        b = np.arange(tree.branching)
        local = np.where((b >= 1 + i * m) & (b < 1 + (i + 1) * m), b - i * m, 0)
        out.append((out[-1][:, None] * (m + 1) + local[None, :]).ravel())
    return out


def copies_on_joint_tree(mf: MfSolution, tree: ScenarioTree, n: int) -> list:
    """``Ybar^i`` evaluated along each particle's coordinate path: per level ``(N_l, n)``.

    ``mf`` must be solved on the full single-particle tree of the same grid.
    """
    if mf.tree.recombining:
        raise ValueError("copies need the mean-field solution on a full tree")
    cols = [coordinate_nodes(tree, i) for i in range(n)]
    return [np.stack([mf.Y[l][cols[i][l]] for i in range(n)], axis=1) for l in range(tree.M + 1)]


@dataclass
class CoupledError:
    times: np.ndarray
    profile: np.ndarray
    weighted: np.ndarray

    @property
    def sup(self) -> float:
        return float(np.max(self.profile))

    @property
    def sup_weighted(self) -> float:
        return float(np.max(self.weighted))


def coupled_error(model: ModelConfig, n: int, *, beta: float = 0.0, ps: ParticleSolution | None = None,
                  mf: MfSolution | None = None, tol: float = 1e-10) -> CoupledError:
    """Exact ``E|Y^{i,n}_t - Ybar^i_t|^2`` per grid time, averaged over particles.

    ``weighted`` multiplies by ``exp(2 beta A_t)``.
    """
    ps = solve_particle_system_exact(model, n, tol=tol) if ps is None else ps
    mf = solve_mf_rbsde(model, tol, recombine=False) if mf is None else mf
    tr = ps.tree
    bar = copies_on_joint_tree(mf, tr, n)
    prof = np.array([float(tr.node_prob[l] @ np.mean((ps.Y[l] - bar[l]) ** 2, axis=1))
                     for l in range(tr.M + 1)])
    A = np.concatenate(([0.0], np.cumsum(tr.dA)))
    return CoupledError(tr.times, prof, np.exp(2 * beta * A) * prof)


def sample_paths(mf: MfSolution, n: int, reps: int, seed: int) -> np.ndarray:
    """``reps`` independent batches of ``n`` iid copies: values, shape ``(reps, n, M + 1)``.

    Each rep draws from its own counter-based stream.
    """
    tr = mf.tree
    cum = np.cumsum(tr.probs, axis=1)
    cum[:, -1] = 1.0
    out = np.empty((reps, n, tr.M + 1))
    for r in range(reps):
        rng = stream(seed, 7, r)
        u = rng.random((n, tr.M))
        node = np.zeros(n, dtype=int)
        out[r, :, 0] = mf.Y[0][0]
        for l in range(tr.M):
            b = np.searchsorted(cum[l], u[:, l], side="right")
            node = tr.children[l][node, np.minimum(b, tr.branching - 1)]
            out[r, :, l + 1] = mf.Y[l + 1][node]
    return out


def sample_iid_copies(mf: MfSolution, n: int, reps: int = 1, seed: int = 0) -> np.ndarray:
    """Sampled paths ``Ybar^1..Ybar^n`` of the limit solution on the grid."""
    return sample_paths(mf, n, reps, seed)
