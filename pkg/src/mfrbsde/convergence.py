"""Law-of-large-numbers decay, chaos bound checks, backward Gronwall and rate fits."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .errors import ConfigError, RegimeError
from .measures import EmpiricalMeasure, wasserstein_pp, wasserstein_pp_batch
from .meanfield import MfSolution, solve_mf_rbsde
from .models import ModelConfig
from .mpp_sim import DEFAULT_LEAF_BUDGET
from .particles import ParticleSolution, coupled_error, copies_on_joint_tree, sample_paths, solve_particle_system_exact


@dataclass(frozen=True)
class RateFit:
    slope: float | None
    intercept: float | None
    r2: float | None
    used: int
    degenerate: bool = False


def rate_fit(rows) -> RateFit:
    """Unweighted least squares of ``log(mean)`` on ``log(n)``.

    ``rows`` are ``(n, mean, stderr)`` triples; rows with a nonpositive mean
    are dropped with a warning. A table whose means are all zero yields a
    degenerate fit with no slope.
    """
    rows = [tuple(r) for r in rows]
    if len(rows) < 3:
        raise ConfigError(f"a rate fit needs at least 3 rows, got {len(rows)}")
    good = [r for r in rows if r[1] > 0]
    if len(good) < len(rows):
        warnings.warn(f"dropped {len(rows) - len(good)} rows with nonpositive mean", RuntimeWarning, stacklevel=2)
    if len(good) < 2:
        return RateFit(None, None, None, len(good), True)
    x = np.log([r[0] for r in good])
    y = np.log([r[1] for r in good])
    res = stats.linregress(x, y)
    return RateFit(float(res.slope), float(res.intercept), float(res.rvalue**2), len(good))


@dataclass
class ChaosReport:
    """Per-``n`` LLN statistics with the fitted rate, or an exact tiny-``n`` bound check."""

    n_list: list = field(default_factory=list)
    means: list = field(default_factory=list)
    stderrs: list = field(default_factory=list)
    reps: int = 0
    fit: RateFit | None = None
    V: list | None = None
    Gamma: float | None = None
    lam: float | None = None
    K_p: float | None = None
    lhs: float | None = None
    bound: float | None = None
    verdict: bool | None = None
    margin: float | None = None

    def ci(self, z: float = 1.96) -> list:
        return [(m - z * s, m + z * s) for m, s in zip(self.means, self.stderrs)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci95"] = self.ci()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "mean", "stderr"])
        for n, m, s in zip(self.n_list, self.means, self.stderrs):
            w.writerow([int(n), repr(float(m)), repr(float(s))])
        return buf.getvalue()


def lln_samples(mf: MfSolution, n: int, reps: int, seed: int) -> np.ndarray:
    """``sup_t W_2^2(L_n[Ybar_t], P_{Y_t})`` for each of ``reps`` independent batches."""
    paths = sample_paths(mf, n, reps, seed)
    per_t = np.stack([wasserstein_pp_batch(paths[:, :, l], mf.flow[l], 2) for l in range(paths.shape[2])], axis=1)
    return per_t.max(axis=1)


def lln_study(mf: MfSolution, n_list, reps: int = 200, seed: int = 0) -> ChaosReport:
    """Average the LLN statistic over ``reps`` batches for each ``n`` and fit the log-log slope."""
    n_list = [int(n) for n in n_list]
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ConfigError("n_list must be strictly increasing")
    if reps < 2:
        raise ConfigError("reps must be at least 2")
    means, errs = [], []
    for k, n in enumerate(n_list):
        s = lln_samples(mf, n, reps, seed * 1_000_003 + k)
        means.append(float(math.fsum(s) / s.size))
        errs.append(float(s.std(ddof=1) / math.sqrt(s.size)))
    rep = ChaosReport(n_list, means, errs, reps)
    if len(n_list) >= 3:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rep.fit = rate_fit(zip(n_list, means, errs))
    return rep


def chaos_constants(model: ModelConfig) -> dict:
    """``lambda``, ``eta``, ``beta`` and ``K_p`` of the propagation-of-chaos bound.

    Refuses with the margin ``1/8 - (gamma1^2 + gamma2^2)`` when it is not positive.
    """
    g1, g2 = model.obstacle.g1, model.obstacle.g2
    margin = 0.125 - (g1**2 + g2**2)
    if margin <= 0:
        raise RegimeError(
            f"propagation-of-chaos bound needs gamma1^2 + gamma2^2 < 1/8, got {g1**2 + g2**2:.6g}",
            margin=margin,
        )
    lam = 1.0 - 8.0 * (g1**2 + g2**2)
    Cf = model.C_f
    A_T = model.clock.total
    if Cf == 0:
        eta, beta, eta_cf2 = math.inf, 0.0, 0.0
    else:
        eta = 1.0 / Cf**2
        beta = Cf + 1.5 / eta
        eta_cf2 = 1.0
    K_p = 2.0 * eta_cf2 * A_T / lam
    return {"lam": lam, "eta": eta, "beta": beta, "eta_cf2": eta_cf2, "K_p": K_p, "margin": margin,
            "gamma2": g2, "A_T": A_T}


def chaos_bound_check(model: ModelConfig, n: int, *, tol: float = 1e-10,
                      ps: ParticleSolution | None = None, mf: MfSolution | None = None,
                      budget: int = DEFAULT_LEAF_BUDGET) -> ChaosReport:
    """Exact check of ``sup_t E[e^{2 beta A_t}|Y^{i,n}_t - Ybar^i_t|^2] <= e^{K_p}/lambda E[Gamma]``.

    ``Gamma = (4 gamma2^2 + 2 eta A_T C_f^2) sup_s e^{2 beta A_s} W_2^2(L_n[Ybar_s], P_{Y_s})``
    is evaluated pathwise on the joint tree and averaged over its leaves.
    """
    c = chaos_constants(model)
    ps = solve_particle_system_exact(model, n, tol=tol, budget=budget) if ps is None else ps
    mf = solve_mf_rbsde(model, tol, recombine=False) if mf is None else mf
    err = coupled_error(model, n, beta=c["beta"], ps=ps, mf=mf)
    tr = ps.tree
    A = np.concatenate(([0.0], np.cumsum(tr.dA)))
    bar = copies_on_joint_tree(mf, tr, n)
    node_w2 = []
    for l in range(tr.M + 1):
        law = mf.flow[l]
        vals = np.array([wasserstein_pp(EmpiricalMeasure(row), law, 2) for row in bar[l]])
        node_w2.append(np.exp(2 * c["beta"] * A[l]) * vals)
    paths = tr.path_nodes()
    sup_path = np.max(np.stack([node_w2[l][paths[:, l]] for l in range(tr.M + 1)], axis=1), axis=1)
    coef = 4 * c["gamma2"] ** 2 + 2 * c["eta_cf2"] * c["A_T"]
    gamma = float(coef * (tr.node_prob[tr.M] @ sup_path))
    lhs = err.sup_weighted
    bound = math.exp(c["K_p"]) / c["lam"] * gamma
    V = err.weighted.tolist()
    return ChaosReport([n], [], [], 0, None, V, gamma, c["lam"], c["K_p"], lhs, bound,
                       bool(lhs <= bound), bound - lhs)


@dataclass(frozen=True)
class GronwallResult:
    bound: np.ndarray
    violations: np.ndarray
    dominated: bool


def backward_gronwall(g, a, c: float) -> GronwallResult:
    """Discrete backward Gronwall bound ``c exp(sum_{s > t} a_s)`` on a grid.

    ``a_s`` is the weight carried by grid point ``s`` (typically the clock
    increment ending at ``s``). ``violations`` lists the indices where ``g``
    breaks the hypothesis ``g_t <= c + sum_{s > t} a_s g_s``; ``dominated``
    reports whether ``g <= bound`` everywhere.
    """
    g = np.asarray(g, dtype=float)
    a = np.asarray(a, dtype=float)
    if g.shape != a.shape:
        raise ConfigError("g and a must live on the same grid")
    if np.any(a < 0) or np.any(g < 0) or c < 0:
        raise ConfigError("backward Gronwall needs nonnegative g, a and c")
    tail_a = np.concatenate((np.cumsum(a[::-1])[::-1][1:], [0.0]))
    bound = c * np.exp(tail_a)
    ag = a * g
    tail_ag = np.concatenate((np.cumsum(ag[::-1])[::-1][1:], [0.0]))
    slack = c + tail_ag - g
    viol = np.flatnonzero(slack < -1e-12 * np.maximum(1.0, np.abs(g)))
    return GronwallResult(bound, viol, bool(np.all(g <= bound * (1 + 1e-12) + 1e-300)))
