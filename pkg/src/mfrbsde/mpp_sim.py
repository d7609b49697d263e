"""Marked point processes, Poisson random measures and exact scenario trees.

The driving noise is a marked point process on a finite mark space with
compensator ``phi_k dA_t``: ``A`` is a deterministic continuous clock and
``phi_k`` a constant weight per mark. The Poisson random measure is the special
case ``A(t) = t``.

Two representations are provided:

* :func:`simulate_mpp` samples jump times and marks by time-changing a unit
  Poisson process through ``phi_tot * A(t)``.
* :func:`build_tree` discretises the filtration on a time grid with at most one
  jump per step. Branch 0 of every node is "no jump", branch ``k`` is "one jump
  of mark k". With ``recombine=True`` nodes carrying the same jump counts are
  merged, which is exact for Markov payoffs and keeps long grids tractable.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from .errors import BudgetError, ConfigError, GridTooCoarseError
from .rng import stream

DEFAULT_LEAF_BUDGET = 2**18


@dataclass(frozen=True)
class MarkSpace:
    """Finite mark space ``E = {e_1, ..., e_m}`` with a real embedding."""

    labels: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        object.__setattr__(self, "labels", tuple(str(s) for s in self.labels))
        object.__setattr__(self, "values", values)
        if len(self.labels) < 1:
            raise ConfigError("mark space needs at least one mark")
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError(f"mark labels must be distinct, got {self.labels}")
        if values.shape != (len(self.labels),):
            raise ConfigError("one embedding value per mark is required")

    @property
    def size(self) -> int:
        return len(self.labels)

    @classmethod
    def default(cls, m: int) -> "MarkSpace":
        return cls(tuple(f"e{k + 1}" for k in range(m)), np.ones(m))


@dataclass(frozen=True)
class IntensityKernel:
    """Per-mark weights ``phi_k`` of the compensator ``phi_k dA_t``."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        object.__setattr__(self, "weights", w)
        if w.size < 1 or not np.all(np.isfinite(w)):
            raise ConfigError("kernel weights must be finite and non-empty")
        if np.any(w < 0):
            raise ConfigError(f"kernel weights must be nonnegative, got {w}")

    @property
    def total(self) -> float:
        return float(self.weights.sum())

    @property
    def size(self) -> int:
        return self.weights.size

    def tiled(self, n: int) -> "IntensityKernel":
        """Kernel of ``n`` independent copies superposed on one mark space."""
        return IntensityKernel(np.tile(self.weights, n))


class ClockA:
    """Deterministic continuous nondecreasing clock ``A`` on ``[0, T]``.

    ``kind`` is ``"identity"`` (``A(t) = t``), ``"piecewise-linear"`` (linear
    interpolation of a table) or ``"monotone"`` (shape-preserving PCHIP
    interpolation of a nondecreasing table).
    """

    KINDS = ("identity", "piecewise-linear", "monotone")

    def __init__(self, kind: str, horizon: float, times=None, values=None):
        if kind not in self.KINDS:
            raise ConfigError(f"unknown clock kind {kind!r}; expected one of {self.KINDS}")
        horizon = float(horizon)
        if not np.isfinite(horizon) or horizon <= 0:
            raise ConfigError(f"clock horizon must be positive and finite, got {horizon}")
        self.kind = kind
        self.horizon = horizon
        self._interp = None
        if kind == "identity":
            self.times = np.array([0.0, horizon])
            self.values = np.array([0.0, horizon])
            return
        t = np.asarray(times, dtype=float).reshape(-1)
        a = np.asarray(values, dtype=float).reshape(-1)
        if t.size < 2 or t.shape != a.shape:
            raise ConfigError("clock table needs matching times/values with at least two rows")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(a))):
            raise ConfigError("clock table contains non-finite entries")
        if t[0] != 0.0 or abs(t[-1] - horizon) > 1e-12:
            raise ConfigError("clock table must span exactly [0, T]")
        if np.any(np.diff(t) <= 0):
            raise ConfigError("clock table times must be strictly increasing")
        if a[0] != 0.0:
            raise ConfigError(f"clock must start at A(0) = 0, got {a[0]}")
        if np.any(np.diff(a) < 0):
            bad = int(np.argmax(np.diff(a) < 0))
            raise ConfigError(f"clock table is not monotone between rows {bad} and {bad + 1}")
        self.times, self.values = t, a
        if kind == "monotone":
            self._interp = PchipInterpolator(t, a, extrapolate=False)

    @classmethod
    def identity(cls, horizon: float) -> "ClockA":
        return cls("identity", horizon)

    @classmethod
    def from_function(cls, fn, horizon: float, points: int = 257) -> "ClockA":
        """Tabulate ``fn`` on a uniform grid and interpolate monotonically."""
        t = np.linspace(0.0, horizon, points)
        return cls("monotone", horizon, t, np.array([fn(s) for s in t], dtype=float))

    def __call__(self, t):
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.horizon)
        if self.kind == "identity":
            out = t.copy()
        elif self.kind == "piecewise-linear":
            out = np.interp(t, self.times, self.values)
        else:
            # PCHIP keeps monotone data monotone; clamp guards round-off at the ends
            out = np.clip(self._interp(t), 0.0, self.values[-1])
        return out if out.ndim else float(out)

    @property
    def total(self) -> float:
        return float(self.values[-1])

    def inverse(self, a: float) -> float:
        """Smallest ``t`` with ``A(t) >= a``."""
        if a <= 0:
            return 0.0
        if a > self.total:
            return np.inf
        if self.kind == "identity":
            return float(a)
        k = int(np.searchsorted(self.values, a, side="left"))
        if self.values[k] == a:
            return float(self.times[k])
        t0, t1 = self.times[k - 1], self.times[k]
        if self.kind == "piecewise-linear":
            a0, a1 = self.values[k - 1], self.values[k]
            return float(t0 + (t1 - t0) * (a - a0) / (a1 - a0))
        return float(brentq(lambda s: self(s) - a, t0, t1, xtol=1e-14, rtol=1e-14))

    def to_dict(self) -> dict:
        if self.kind == "identity":
            return {"kind": "identity", "horizon": self.horizon}
        return {
            "kind": self.kind,
            "horizon": self.horizon,
            "times": self.times.tolist(),
            "values": self.values.tolist(),
        }


@dataclass(frozen=True)
class MppPath:
    """Sampled jump times ``T_n`` (sorted, in ``(0, horizon]``) and mark indices."""

    times: np.ndarray
    marks: np.ndarray
    horizon: float

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).reshape(-1)
        k = np.asarray(self.marks, dtype=int).reshape(-1)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "marks", k)
        if t.shape != k.shape:
            raise ConfigError("jump times and marks must have equal length")
        if t.size and (np.any(np.diff(t) <= 0) or t[0] <= 0 or t[-1] > self.horizon):
            raise ConfigError("jump times must be strictly increasing in (0, horizon]")

    def __len__(self) -> int:
        return self.times.size

    def counting(self, t):
        """Counting process ``N_t``: number of jumps in ``(0, t]``."""
        return np.searchsorted(self.times, t, side="right")

    def to_csv(self, labels: Sequence[str] | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["time", "mark"])
        for t, k in zip(self.times, self.marks):
            writer.writerow([repr(float(t)), labels[k] if labels is not None else int(k)])
        return buf.getvalue()


def simulate_mpp(
    kernel: IntensityKernel,
    clock: ClockA,
    horizon: float | None = None,
    seed: int | np.random.Generator = 0,
) -> MppPath:
    """Sample one path of the marked point process on ``[0, horizon]``."""
    horizon = clock.horizon if horizon is None else float(horizon)
    if horizon > clock.horizon + 1e-12:
        raise ConfigError(f"horizon {horizon} exceeds the clock horizon {clock.horizon}")
    rng = seed if isinstance(seed, np.random.Generator) else stream(int(seed))
    total = kernel.total
    if total == 0.0:
        return MppPath(np.empty(0), np.empty(0, dtype=int), horizon)
    budget = total * float(clock(horizon))
    arrivals = []
    s = rng.exponential()
    while s <= budget:
        arrivals.append(s)
        s += rng.exponential()
    times = np.array([clock.inverse(a / total) for a in arrivals])
    marks = rng.choice(kernel.size, size=times.size, p=kernel.weights / total)
    # a flat clock segment can map two arrivals to one instant; nudge to keep order strict
    for j in range(1, times.size):
        if times[j] <= times[j - 1]:
            times[j] = np.nextafter(times[j - 1], np.inf)
    return MppPath(times, marks, horizon)


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    """Exact one-jump-per-step discretisation of the jump filtration.

    Level ``i`` holds the nodes at grid time ``times[i]``. ``children[i]`` is an
    ``(N_i, m + 1)`` index array into level ``i + 1``; column 0 is the no-jump
    child and column ``k`` the child after one jump of mark ``k``.
    ``counts[i]`` records the jump counts per mark accumulated up to the node,
    which is the full state of a recombining tree.
    """

    times: np.ndarray
    dA: np.ndarray
    weights: np.ndarray
    mark_values: np.ndarray
    probs: np.ndarray
    children: list
    node_prob: list
    counts: list
    recombining: bool
    n_blocks: int = 1
    _index: list = field(default_factory=list, repr=False)

    @property
    def M(self) -> int:
        return self.dA.size

    @property
    def n_marks(self) -> int:
        return self.weights.size

    @property
    def branching(self) -> int:
        return self.weights.size + 1

    @property
    def block_size(self) -> int:
        return self.weights.size // self.n_blocks

    def level_size(self, i: int) -> int:
        return self.counts[i].shape[0]

    @property
    def n_nodes(self) -> int:
        return sum(c.shape[0] for c in self.counts)

    def expectation(self, values_next: np.ndarray, i: int) -> np.ndarray:
        """Conditional expectation at level ``i`` of a level ``i + 1`` quantity.

        ``values_next`` may carry trailing axes. Terms are sorted before the
        sum so that relabelling branches does not change a single bit.
        """
        vals = values_next[self.children[i]]
        p = self.probs[i].reshape((1, -1) + (1,) * (vals.ndim - 2))
        terms = np.sort(vals * p, axis=1)
        return terms.sum(axis=1)

    def state(self, i: int, block: int | None = None) -> np.ndarray:
        """Compound jump state ``sum_k value_k N^k`` at level ``i``.

        For a joint tree, ``block`` selects one particle's marks.
        """
        c = self.counts[i]
        if block is None:
            vals = np.tile(self.mark_values, self.n_blocks)
            return c @ vals
        m = self.block_size
        return c[:, block * m:(block + 1) * m] @ self.mark_values

    def jump_count(self, i: int, block: int | None = None) -> np.ndarray:
        c = self.counts[i]
        if block is None:
            return c.sum(axis=1)
        m = self.block_size
        return c[:, block * m:(block + 1) * m].sum(axis=1)

    def index_of(self, i: int, counts: Sequence[int]) -> int:
        """Node index at level ``i`` with the given counts (recombining trees)."""
        if not self.recombining:
            raise ValueError("index_of needs a recombining tree; use node_of_path")
        return self._index[i][tuple(int(c) for c in counts)]

    def node_of_path(self, branches: Sequence[int]) -> int:
        """Node reached from the root by the branch sequence ``branches``."""
        j = 0
        for i, b in enumerate(branches):
            j = int(self.children[i][j, b])
        return j

    def parents(self, i: int) -> np.ndarray:
        """Parent index of every node at level ``i >= 1`` (non-recombining trees)."""
        if self.recombining:
            raise ValueError("recombining trees have no unique parent")
        return np.arange(self.level_size(i)) // self.branching

    def leaf_paths(self) -> np.ndarray:
        """Branch digits ``(N_M, M)`` of every leaf, in leaf order."""
        if self.recombining:
            raise ValueError("leaf paths are only defined on non-recombining trees")
        idx = np.arange(self.level_size(self.M))
        digits = np.empty((idx.size, self.M), dtype=int)
        for i in range(self.M - 1, -1, -1):
            digits[:, i] = idx % self.branching
            idx = idx // self.branching
        return digits

    def path_nodes(self) -> np.ndarray:
        """Node index at every level along every leaf path, shape ``(N_M, M + 1)``."""
        if self.recombining:
            raise ValueError("path nodes are only defined on non-recombining trees")
        leaves = np.arange(self.level_size(self.M))
        out = np.empty((leaves.size, self.M + 1), dtype=int)
        out[:, self.M] = leaves
        for i in range(self.M, 0, -1):
            out[:, i - 1] = out[:, i] // self.branching
        return out

    def leaf_probabilities(self) -> np.ndarray:
        return self.node_prob[self.M]

    def transition(self, i: int):
        """Sparse one-step transition matrix from level ``i`` to ``i + 1``."""
        from scipy.sparse import csr_matrix

        n, b = self.children[i].shape
        rows = np.repeat(np.arange(n), b)
        data = np.tile(self.probs[i], n)
        return csr_matrix(
            (data, (rows, self.children[i].ravel())), shape=(n, self.level_size(i + 1))
        )


def uniform_grid(horizon: float, M: int) -> np.ndarray:
    return np.linspace(0.0, float(horizon), int(M) + 1)


def build_tree(
    kernel: IntensityKernel,
    clock: ClockA,
    M: int,
    *,
    marks: MarkSpace | None = None,
    recombine: bool = False,
    grid: np.ndarray | None = None,
    n_blocks: int = 1,
    max_leaves: int = DEFAULT_LEAF_BUDGET,
) -> ScenarioTree:
    """Build the scenario tree of ``kernel`` on ``M`` steps of ``clock``.

    ``n_blocks > 1`` builds the joint tree of ``n_blocks`` independent copies
    (the kernel is tiled and mark values repeated per block).
    """
    M = int(M)
    if M < 1:
        raise ConfigError(f"tree depth must be at least 1, got {M}")
    times = uniform_grid(clock.horizon, M) if grid is None else np.asarray(grid, dtype=float)
    if times.shape != (M + 1,) or np.any(np.diff(times) <= 0):
        raise ConfigError("grid must be strictly increasing with M + 1 points")
    base = kernel.weights
    m = base.size
    if marks is None:
        marks = MarkSpace.default(m)
    if marks.size != m:
        raise ConfigError(f"mark space has {marks.size} marks but kernel has {m} weights")
    weights = np.tile(base, n_blocks)
    A = np.asarray(clock(times), dtype=float)
    dA = np.diff(A)
    B = weights.size + 1
    probs = np.empty((M, B))
    probs[:, 1:] = dA[:, None] * weights[None, :]
    probs[:, 0] = 1.0 - dA * weights.sum()
    bad = np.flatnonzero(probs[:, 0] <= 0.0)
    if bad.size:
        i = int(bad[0])
        raise GridTooCoarseError(
            f"grid too coarse at step {i}: no-jump probability {probs[i, 0]:.6g} <= 0 "
            f"(phi_tot * dA = {weights.sum() * dA[i]:.6g}); refine the grid",
            step=i,
        )
    if not recombine and B**M > max_leaves:
        raise BudgetError(
            f"tree would have {B}^{M} = {B**M} leaves, budget is {max_leaves}",
            required=B**M,
            budget=max_leaves,
        )

    eye = np.eye(weights.size, dtype=np.int64)
    steps = np.vstack([np.zeros((1, weights.size), dtype=np.int64), eye])
    counts = [np.zeros((1, weights.size), dtype=np.int64)]
    node_prob = [np.ones(1)]
    children = []
    index = [{(0,) * weights.size: 0}] if recombine else []
    for i in range(M):
        cand = (counts[i][:, None, :] + steps[None, :, :]).reshape(-1, weights.size)
        pcand = (node_prob[i][:, None] * probs[i][None, :]).ravel()
        if recombine:
            uniq, inverse = np.unique(cand, axis=0, return_inverse=True)
            inverse = inverse.reshape(-1)
            p_next = np.zeros(uniq.shape[0])
            np.add.at(p_next, inverse, pcand)
            children.append(inverse.reshape(-1, B))
            counts.append(uniq)
            node_prob.append(p_next)
            index.append({tuple(int(c) for c in row): j for j, row in enumerate(uniq)})
        else:
            children.append(np.arange(cand.shape[0]).reshape(-1, B))
            counts.append(cand)
            node_prob.append(pcand)
    return ScenarioTree(
        times=times,
        dA=dA,
        weights=weights,
        mark_values=marks.values,
        probs=probs,
        children=children,
        node_prob=node_prob,
        counts=counts,
        recombining=recombine,
        n_blocks=n_blocks,
        _index=index,
    )


def _step_of_times(grid: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Grid step ``i`` with ``t in (t_i, t_{i+1}]``."""
    return np.searchsorted(grid, t, side="left") - 1


def compensated_integral(
    path,
    integrand: np.ndarray,
    kernel: IntensityKernel,
    clock: ClockA,
    grid: np.ndarray,
) -> float:
    """Integral of a per-(step, mark) integrand against ``q = p - phi dA``.

    ``path`` is either an :class:`MppPath` or a sequence of tree branch indices
    (0 = no jump, ``k`` = mark ``k``) with one entry per grid step.
    """
    grid = np.asarray(grid, dtype=float)
    U = np.asarray(integrand, dtype=float)
    M = grid.size - 1
    if U.shape != (M, kernel.size):
        raise ConfigError(f"integrand must have shape {(M, kernel.size)}, got {U.shape}")
    dA = np.diff(np.asarray(clock(grid), dtype=float))
    compensator = float(np.sum(dA * (U @ kernel.weights)))
    if isinstance(path, MppPath):
        steps = _step_of_times(grid, path.times)
        jumps = float(np.sum(U[steps, path.marks])) if len(path) else 0.0
    else:
        b = np.asarray(path, dtype=int)
        if b.shape != (M,):
            raise ConfigError(f"tree path must have {M} branch entries")
        hit = b > 0
        jumps = float(np.sum(U[np.flatnonzero(hit), b[hit] - 1]))
    return jumps - compensator


def tree_compensated_integral(tree: ScenarioTree, integrand: list) -> np.ndarray:
    """Per-leaf value of ``int U dq`` for a node-indexed predictable integrand.

    ``integrand[i]`` has shape ``(N_i, m)``: the integrand on step ``i`` may
    depend on the node reached at level ``i``, never on the step's own branch.
    """
    paths = tree.path_nodes()
    digits = tree.leaf_paths()
    total = np.zeros(paths.shape[0])
    for i in range(tree.M):
        U = np.asarray(integrand[i], dtype=float)[paths[:, i]]
        b = digits[:, i]
        jump = np.where(b > 0, U[np.arange(b.size), np.maximum(b - 1, 0)], 0.0)
        total += jump - tree.dA[i] * (U @ tree.weights)
    return total
