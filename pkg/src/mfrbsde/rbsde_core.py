"""Backward dynamic programming for (reflected) BSDEs on a scenario tree.

On a one-jump-per-step tree the martingale representation is exact: at a node
with children ``c_0`` (no jump) and ``c_k`` (mark ``k``) the jump kernel is
``U(e_k) = Y(c_k) - Y(c_0)`` and

    Y_v = E[Y_child | v] + f(t_v, Y_v, U_v) dA_v + dK_v

reproduces ``Y_v = Y_c + f dA + dK - (U(b) 1{b != 0} - dA sum_k phi_k U(e_k))``
along every branch ``b``. The step is implicit in ``Y_v`` and solved by
fixed-point iteration, which contracts whenever ``C_f dA < 1``.

Reflection is the discrete Snell step ``Y = max(candidate, h)`` with
``dK = Y - candidate``, so the flat-off product ``(Y - h) dK`` is exactly zero.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import BudgetError, ConfigError, ConvergenceError
from .models import DriverSpec
from .mpp_sim import ScenarioTree

DEFAULT_RULE_BUDGET = 200_000


class FrozenDriver:
    """Driver with its measure argument frozen, one statistic per level or per node.

    ``mstats[i]`` is a scalar (law flow) or an array over the level's nodes
    (node-wise empirical measures on a joint tree). ``block`` restricts the
    ``u`` argument to one particle's marks on a joint tree; ``lipschitz`` is
    the constant used for the implicit-step check.
    """

    def __init__(self, spec: DriverSpec, tree: ScenarioTree, mstats=None, block: int | None = None,
                 lipschitz: float | None = None):
        self.spec = spec
        self.times = tree.times
        m = tree.block_size
        self.weights = tree.weights[:m] if block is not None else tree.weights
        self.cols = slice(block * m, (block + 1) * m) if block is not None else slice(None)
        self.mstats = [0.0] * (tree.M + 1) if mstats is None else list(mstats)
        self.lipschitz = spec.lipschitz(self.weights) if lipschitz is None else float(lipschitz)

    def __call__(self, i: int, y, u):
        return self.spec(self.times[i], y, u[..., self.cols], self.weights, self.mstats[i])


@dataclass
class SolutionTriple:
    """Node-indexed solution ``(Y, U, K)`` on levels ``lo..hi`` of a tree.

    ``dK[i]`` is the reflection pushed at level ``i``; the cumulative ``K``
    along a path is ``K_{t_i} = sum_{j < i} dK_j`` so that ``K_0 = 0`` and
    ``K_T - K_{t_i} = sum_{j >= i} dK_j``.
    """

    tree: ScenarioTree
    Y: list
    U: list
    dK: list
    h: list
    f: list
    lo: int = 0
    hi: int | None = None
    iterations: int = 0

    def __post_init__(self):
        if self.hi is None:
            self.hi = self.tree.M

    def levels(self):
        return range(self.lo, self.hi + 1)

    @property
    def root(self) -> float:
        return float(self.Y[self.lo][0]) if self.lo == 0 else math.nan

    def total_K(self) -> float:
        """``E[K_T - K_{t_lo}]``."""
        return float(sum(self.tree.node_prob[i] @ self.dK[i] for i in self.levels()))

    def cumulative_K(self) -> list:
        """Per-node cumulative ``K`` (non-recombining trees only)."""
        tr = self.tree
        K = [None] * (tr.M + 1)
        K[self.lo] = np.zeros(tr.level_size(self.lo))
        for i in range(self.lo + 1, self.hi + 1):
            par = tr.parents(i)
            K[i] = K[i - 1][par] + self.dK[i - 1][par]
        return K

    def sup_Y(self) -> float:
        return float(max(np.max(np.abs(self.Y[i])) for i in self.levels()))

    def sup_U(self) -> float:
        vals = [np.max(np.abs(self.U[i])) for i in range(self.lo, self.hi) if self.U[i].size]
        return float(max(vals)) if vals else 0.0

    def flat_off(self) -> float:
        """``max_v |(Y_v - h_v) dK_v|``; zero by construction."""
        if self.h[self.lo] is None:
            return 0.0
        return float(max(np.max(np.abs((self.Y[i] - self.h[i]) * self.dK[i])) for i in self.levels()))

    def dominance(self) -> float:
        """``min_v (Y_v - h_v)``; nonnegative when the obstacle is respected."""
        if self.h[self.lo] is None:
            return math.inf
        return float(min(np.min(self.Y[i] - self.h[i]) for i in self.levels()))

    def edge_residual(self) -> float:
        """Largest violation of the one-step identity over every tree edge."""
        return edge_residual(self.tree, self.Y, self.U, self.f, self.dK, self.lo, self.hi)

    def path_residual(self) -> float:
        """Largest violation of the integrated equation along every leaf path.

        Checks ``Y_{t_i} = xi + sum f dA + K_T - K_{t_i} - sum U dq`` at every
        level of every path; requires a non-recombining tree.
        """
        return path_residual(self.tree, self.Y, self.U, self.f, self.dK, self.lo, self.hi)

    def stopping_rule(self) -> list:
        """Optimal stopping flags: stop where ``Y`` touches the obstacle (ties stop)."""
        out = []
        for i in self.levels():
            if i == self.tree.M or self.h[i] is None:
                out.append(np.full(self.Y[i].shape, i == self.tree.M))
            else:
                out.append(self.Y[i] <= self.h[i])
        return out

    def to_csv(self) -> str:
        tr = self.tree
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "node", "time", "Y"] + [f"U{k + 1}" for k in range(tr.n_marks)] + ["dK"])
        for i in self.levels():
            for j in range(tr.level_size(i)):
                u = self.U[i][j] if i < self.hi else np.zeros(tr.n_marks)
                w.writerow([i, j, repr(float(tr.times[i])), repr(float(self.Y[i][j]))]
                           + [repr(float(x)) for x in u] + [repr(float(self.dK[i][j]))])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "root_Y": self.root,
            "total_K": self.total_K(),
            "sup_Y": self.sup_Y(),
            "sup_U": self.sup_U(),
            "iterations": int(self.iterations),
            "flat_off": self.flat_off(),
            "dominance": None if math.isinf(self.dominance()) else self.dominance(),
        }


def jump_kernel(tree: ScenarioTree, i: int, Y_next: np.ndarray) -> np.ndarray:
    """``U(e_k) = Y(c_k) - Y(c_0)`` at every node of level ``i``."""
    vals = Y_next[tree.children[i]]
    return vals[:, 1:, ...] - vals[:, :1, ...]


def implicit_step(driver, i: int, cont: np.ndarray, U: np.ndarray, dA: float, *,
                  tol: float = 1e-14, max_iter: int = 10_000, damping: float = 1.0):
    """Solve ``y = cont + f(i, y, U) dA`` node-wise by damped fixed-point iteration."""
    L = driver.lipschitz
    if L * dA >= 1.0:
        raise ConfigError(
            f"implicit step not contractive at level {i}: C_f * dA = {L * dA:.6g} >= 1, refine grid"
        )
    y = cont.copy()
    thresh = tol * np.maximum(1.0, np.abs(cont))
    for it in range(max_iter):
        fy = driver(i, y, U)
        res = cont + fy * dA - y
        if np.all(np.abs(res) < thresh):
            return y, fy, it
        y = y + damping * res
    raise ConvergenceError(f"implicit step at level {i} did not converge", [float(np.max(np.abs(res)))])


def solve_rbsde_tree(
    tree: ScenarioTree,
    driver,
    terminal: np.ndarray,
    obstacle: list | None = None,
    *,
    lo: int = 0,
    hi: int | None = None,
    tol: float = 1e-14,
) -> SolutionTriple:
    """Reflected backward recursion with frozen coefficients.

    ``terminal`` holds the values at level ``hi`` (default: the leaves).
    ``obstacle[i]`` holds ``h`` at level ``i``; ``None`` solves the plain BSDE.
    """
    hi = tree.M if hi is None else hi
    if not 0 <= lo <= hi <= tree.M:
        raise ConfigError(f"invalid level range [{lo}, {hi}]")
    n = tree.M + 1
    Y, U, dK, H, F = [None] * n, [None] * n, [None] * n, [None] * n, [None] * n
    Y[hi] = np.asarray(terminal, dtype=float).copy()
    if Y[hi].shape[0] != tree.level_size(hi):
        raise ConfigError("terminal values do not match the level size")
    dK[hi] = np.zeros(tree.level_size(hi))
    F[hi] = np.zeros(tree.level_size(hi))
    U[hi] = np.zeros((tree.level_size(hi), tree.n_marks))
    if obstacle is not None:
        H[hi] = np.asarray(obstacle[hi], dtype=float)
    total_it = 0
    for i in range(hi - 1, lo - 1, -1):
        cont = tree.expectation(Y[i + 1], i)
        U[i] = jump_kernel(tree, i, Y[i + 1])
        cand, F[i], it = implicit_step(driver, i, cont, U[i], tree.dA[i], tol=tol)
        total_it += it
        if obstacle is None:
            Y[i] = cand
            dK[i] = np.zeros_like(cand)
        else:
            H[i] = np.asarray(obstacle[i], dtype=float)
            Y[i] = np.maximum(cand, H[i])
            dK[i] = Y[i] - cand
    return SolutionTriple(tree, Y, U, dK, H, F, lo, hi, total_it)


def solve_bsde_tree(tree: ScenarioTree, driver, terminal, *, tol: float = 1e-14) -> SolutionTriple:
    """Unreflected backward recursion; ``K`` is identically zero."""
    return solve_rbsde_tree(tree, driver, terminal, None, tol=tol)


def edge_residual(tree, Y, U, F, dK, lo, hi) -> float:
    worst = 0.0
    for i in range(lo, hi):
        comp = tree.dA[i] * (U[i] @ tree.weights)
        ch = tree.children[i]
        for b in range(tree.branching):
            jump = U[i][:, b - 1] if b > 0 else 0.0
            rhs = Y[i + 1][ch[:, b]] + F[i] * tree.dA[i] + dK[i] - (jump - comp)
            worst = max(worst, float(np.max(np.abs(Y[i] - rhs))))
    return worst


def path_residual(tree, Y, U, F, dK, lo, hi) -> float:
    nodes = tree.path_nodes()
    digits = tree.leaf_paths()
    rows = np.arange(nodes.shape[0])
    acc = Y[hi][nodes[:, hi]].copy()
    worst = 0.0
    for i in range(hi - 1, lo - 1, -1):
        v = nodes[:, i]
        b = digits[:, i]
        Ui = U[i][v]
        jump = np.where(b > 0, Ui[rows, np.maximum(b - 1, 0)], 0.0)
        acc = acc + F[i][v] * tree.dA[i] + dK[i][v] - (jump - tree.dA[i] * (Ui @ tree.weights))
        worst = max(worst, float(np.max(np.abs(Y[i][v] - acc))))
    return worst


def _rule_count(tree: ScenarioTree) -> int:
    r = 1
    for _ in range(tree.M):
        r = 1 + r**tree.branching
    return r


def enumerate_stopping_rules(tree: ScenarioTree, budget: int = DEFAULT_RULE_BUDGET) -> list:
    """All adapted stopping rules as per-level boolean masks ``(R, N_i)``.

    A rule either stops at a node or continues and picks a rule in every child
    subtree; leaves always stop.
    """
    if tree.recombining:
        raise ConfigError("stopping-rule enumeration needs a non-recombining tree")
    count = _rule_count(tree)
    if count > budget:
        raise BudgetError(
            f"{count} adapted stopping rules exceed the budget of {budget}", required=count, budget=budget
        )

    def rules(i: int, j: int) -> list:
        if i == tree.M:
            return [()]
        out = [((i, j),)]
        kids = [rules(i + 1, int(c)) for c in tree.children[i][j]]
        for combo in itertools.product(*kids):
            out.append(tuple(itertools.chain.from_iterable(combo)))
        return out

    all_rules = rules(0, 0)
    masks = [np.zeros((len(all_rules), tree.level_size(i)), dtype=bool) for i in range(tree.M)]
    for r, stops in enumerate(all_rules):
        for i, j in stops:
            masks[i][r, j] = True
    return masks


@dataclass
class SnellResult:
    value: float
    best_rule: int
    n_rules: int
    values: np.ndarray
    masks: list


def snell_bruteforce(
    tree: ScenarioTree,
    driver,
    terminal,
    obstacle: list,
    *,
    budget: int = DEFAULT_RULE_BUDGET,
    tol: float = 1e-14,
) -> SnellResult:
    """Maximise the nonlinear expectation of the stopped payoff over all rules.

    For each adapted rule the stopped payoff (``h`` where the rule stops before
    ``T``, ``xi`` at the leaves) is evaluated by the unreflected recursion; the
    result is the largest root value.
    """
    masks = enumerate_stopping_rules(tree, budget)
    R = masks[0].shape[0]
    Y = np.repeat(np.asarray(terminal, dtype=float)[:, None], R, axis=1)
    for i in range(tree.M - 1, -1, -1):
        n = tree.level_size(i)
        cont = tree.expectation(Y, i)
        U = jump_kernel(tree, i, Y)
        flat_U = np.moveaxis(U, 2, 1).reshape(n * R, tree.n_marks)
        y, _, _ = implicit_step(driver, i, cont.reshape(-1), flat_U, tree.dA[i], tol=tol)
        y = y.reshape(n, R)
        stop = masks[i].T
        Y = np.where(stop, np.asarray(obstacle[i], dtype=float)[:, None], y)
    values = Y[0]
    best = int(np.argmax(values))
    return SnellResult(float(values[best]), best, R, values, masks)


def snell_envelope_value(tree: ScenarioTree, gain: list) -> float:
    """``sup_tau E[gain_tau]`` for a node-indexed gain, by backward induction."""
    S = np.asarray(gain[tree.M], dtype=float)
    for i in range(tree.M - 1, -1, -1):
        S = np.maximum(np.asarray(gain[i], dtype=float), tree.expectation(S, i))
    return float(S[0])


def stability_gap(
    tree: ScenarioTree,
    driver,
    pair1: tuple,
    pair2: tuple,
    *,
    eta: float,
    beta: float,
    clock_values: np.ndarray | None = None,
) -> tuple[float, float]:
    """Both sides of the a priori estimate for two terminal/obstacle pairs.

    Returns ``|Y1_0 - Y2_0|^2`` and
    ``sup_tau E[exp(2 beta A_tau) |payoff1_tau - payoff2_tau|^2]`` plus the
    generator term, which vanishes because the driver is shared.
    """
    xi1, h1 = pair1
    xi2, h2 = pair2
    s1 = solve_rbsde_tree(tree, driver, xi1, h1)
    s2 = solve_rbsde_tree(tree, driver, xi2, h2)
    lhs = (s1.root - s2.root) ** 2
    A = np.concatenate(([0.0], np.cumsum(tree.dA))) if clock_values is None else clock_values
    weight = np.exp(2 * beta * (A - A[0]))
    gain = []
    for i in range(tree.M + 1):
        if i == tree.M:
            d = np.asarray(xi1, dtype=float) - np.asarray(xi2, dtype=float)
        elif h1 is None and h2 is None:
            d = np.zeros(tree.level_size(i))
        else:
            a = np.asarray(h1[i]) if h1 is not None else np.full(tree.level_size(i), -np.inf)
            b = np.asarray(h2[i]) if h2 is not None else np.full(tree.level_size(i), -np.inf)
            d = np.where(np.isfinite(a) & np.isfinite(b), a - b, 0.0)
        gain.append(weight[i] * d**2)
    driver_term = 0.0 if not math.isfinite(eta) else eta * 0.0
    return lhs, snell_envelope_value(tree, gain) + driver_term
