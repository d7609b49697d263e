"""One-dimensional laws, Wasserstein distances and law-flow statistics.

All transport is exact: in one dimension the quantile (monotone) coupling is
optimal for every order ``p >= 1``, so distances reduce to integrating
``|F^{-1}(u) - G^{-1}(u)|^p`` over the merged CDF breakpoints.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import ConfigError

_MASS_TOL = 1e-12


@dataclass(frozen=True)
class DiscreteLaw:
    """Finitely supported law on the real line; atoms sorted, duplicates merged."""

    atoms: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float).reshape(-1)
        w = np.asarray(self.probs, dtype=float).reshape(-1)
        if a.size == 0:
            raise ConfigError("a law needs at least one atom")
        if a.shape != w.shape:
            raise ConfigError("atoms and probabilities must have equal length")
        if not np.all(np.isfinite(a)):
            raise ConfigError("atoms must be finite")
        if np.any(w < 0):
            raise ConfigError("probabilities must be nonnegative")
        if abs(w.sum() - 1.0) > _MASS_TOL:
            raise ConfigError(f"probabilities sum to {w.sum():.17g}, not 1")
        order = np.argsort(a, kind="stable")
        a, w = a[order], w[order]
        uniq, inv = np.unique(a, return_inverse=True)
        if uniq.size != a.size:
            merged = np.zeros(uniq.size)
            np.add.at(merged, inv.reshape(-1), w)
            a, w = uniq, merged
        object.__setattr__(self, "atoms", a)
        object.__setattr__(self, "probs", w)

    @classmethod
    def dirac(cls, x: float = 0.0) -> "DiscreteLaw":
        return cls(np.array([float(x)]), np.array([1.0]))

    @classmethod
    def from_weighted(cls, values, weights) -> "DiscreteLaw":
        """Law of ``values`` under node weights that sum to one up to round-off."""
        w = np.asarray(weights, dtype=float)
        return cls(values, w / w.sum())

    def mean(self) -> float:
        return float(self.atoms @ self.probs)

    def moment(self, p: float) -> float:
        return float(np.abs(self.atoms) ** p @ self.probs)

    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.probs)
        c[-1] = 1.0
        return c


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Uniform law ``L_n[x] = (1/n) sum_j delta_{x_j}``."""

    samples: np.ndarray

    def __post_init__(self):
        x = np.sort(np.asarray(self.samples, dtype=float).reshape(-1))
        if x.size < 1:
            raise ConfigError("an empirical measure needs at least one sample")
        object.__setattr__(self, "samples", x)

    @property
    def n(self) -> int:
        return self.samples.size

    def as_law(self) -> DiscreteLaw:
        return DiscreteLaw(self.samples, np.full(self.n, 1.0 / self.n))

    def mean(self) -> float:
        return float(self.samples.mean())


Law = Union[DiscreteLaw, EmpiricalMeasure, np.ndarray, Sequence[float]]


def as_law(mu: Law) -> DiscreteLaw:
    if isinstance(mu, DiscreteLaw):
        return mu
    if isinstance(mu, EmpiricalMeasure):
        return mu.as_law()
    return EmpiricalMeasure(np.asarray(mu, dtype=float)).as_law()


def _check_order(p: float) -> float:
    p = float(p)
    if p not in (1.0, 2.0):
        raise ConfigError(f"Wasserstein order must be 1 or 2, got {p}")
    return p


def wasserstein_pp(mu: Law, nu: Law, p: float = 2) -> float:
    """``W_p(mu, nu) ** p`` by the quantile coupling."""
    p = _check_order(p)
    if (
        isinstance(mu, EmpiricalMeasure)
        and isinstance(nu, EmpiricalMeasure)
        and mu.n == nu.n
    ):
        return float(np.mean(np.abs(mu.samples - nu.samples) ** p))
    a, b = as_law(mu), as_law(nu)
    Fa, Fb = a.cdf(), b.cdf()
    u = np.union1d(Fa, Fb)
    lo = np.concatenate(([0.0], u[:-1]))
    width = u - lo
    mid = 0.5 * (u + lo)
    ia = np.minimum(np.searchsorted(Fa, mid, side="left"), a.atoms.size - 1)
    ib = np.minimum(np.searchsorted(Fb, mid, side="left"), b.atoms.size - 1)
    return float(np.sum(width * np.abs(a.atoms[ia] - b.atoms[ib]) ** p))


def wasserstein(mu: Law, nu: Law, p: float = 2) -> float:
    """Exact ``W_p`` distance between two one-dimensional laws, ``p in {1, 2}``."""
    return wasserstein_pp(mu, nu, p) ** (1.0 / _check_order(p))


def wasserstein_pp_batch(samples: np.ndarray, law: DiscreteLaw, p: float = 2) -> np.ndarray:
    """``W_p^p(L_n[row], law)`` for every row of an ``(R, n)`` sample array.

    The merged CDF breakpoints of a uniform ``n``-sample measure against a
    fixed law do not depend on the sample values, so one coupling pattern
    serves every row.
    """
    p = _check_order(p)
    x = np.sort(np.asarray(samples, dtype=float), axis=1)
    n = x.shape[1]
    Fe = np.arange(1, n + 1) / n
    Fl = law.cdf()
    u = np.union1d(Fe, Fl)
    lo = np.concatenate(([0.0], u[:-1]))
    width = u - lo
    mid = 0.5 * (u + lo)
    ie = np.minimum(np.searchsorted(Fe, mid, side="left"), n - 1)
    il = np.minimum(np.searchsorted(Fl, mid, side="left"), law.atoms.size - 1)
    return np.abs(x[:, ie] - law.atoms[il][None, :]) ** p @ width


def distance_to_dirac(mu: Law, p: float = 2) -> float:
    """``W_p(mu, delta_0) = (E|X|^p)^(1/p)``."""
    return as_law(mu).moment(_check_order(p)) ** (1.0 / p)


def empirical_contraction_check(x, y, p: float = 2) -> tuple[bool, float]:
    """Check ``W_p^p(L_n[x], L_n[y]) <= (1/n) sum_j |x_j - y_j|^p``.

    Returns the verdict and the slack ``rhs - lhs`` (nonnegative when true).
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.shape != y.shape:
        raise ConfigError(f"vectors must have equal length, got {x.size} and {y.size}")
    lhs = wasserstein_pp(EmpiricalMeasure(x), EmpiricalMeasure(y), p)
    rhs = float(np.mean(np.abs(x - y) ** p))
    slack = rhs - lhs
    return bool(slack >= -1e-12 * max(1.0, rhs)), slack


@dataclass(frozen=True)
class MeasureFlow:
    """One law per grid time: ``t -> P_{Y_t}`` or ``t -> L_n[Y_t]``."""

    times: np.ndarray
    laws: tuple

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).reshape(-1)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "laws", tuple(as_law(l) for l in self.laws))
        if len(self.laws) != t.size:
            raise ConfigError("a measure flow needs exactly one law per grid time")

    def __len__(self) -> int:
        return self.times.size

    def __getitem__(self, i: int) -> DiscreteLaw:
        return self.laws[i]

    def means(self) -> np.ndarray:
        return np.array([l.mean() for l in self.laws])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "atom", "prob"])
        for t, law in zip(self.times, self.laws):
            for a, q in zip(law.atoms, law.probs):
                w.writerow([repr(float(t)), repr(float(a)), repr(float(q))])
        return buf.getvalue()

    def to_json(self) -> str:
        payload = [
            {"time": float(t), "atoms": law.atoms.tolist(), "probs": law.probs.tolist()}
            for t, law in zip(self.times, self.laws)
        ]
        return json.dumps(payload, sort_keys=True)


def lln_statistic(
    copies: np.ndarray,
    reference: MeasureFlow,
    p: float = 2,
    weights: np.ndarray | None = None,
) -> float:
    """``max_t weight_t * W_p^2(L_n[copies[:, t]], P_t)`` over the grid.

    ``copies`` has shape ``(n, G)`` with ``G`` the number of grid times.
    """
    y = np.asarray(copies, dtype=float)
    if y.ndim == 1:
        y = y[None, :]
    if y.shape[1] != len(reference):
        raise ConfigError(
            f"copies live on {y.shape[1]} grid times but the reference flow has {len(reference)}"
        )
    w = np.ones(len(reference)) if weights is None else np.asarray(weights, dtype=float)
    stats = [
        w[t] * wasserstein(EmpiricalMeasure(y[:, t]), reference[t], p) ** 2
        for t in range(len(reference))
    ]
    return float(max(stats))
