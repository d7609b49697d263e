"""Parametric drivers, obstacles and terminal payoffs, with assumption probes.

A model couples the jump noise (marks, clock, kernel) with

* a driver ``f(t, y, u, mu)`` where ``u`` is a per-mark vector and ``mu`` enters
  through a scalar statistic (its mean, or its distance to ``delta_0``);
* an obstacle ``h(t, y, mu)`` that may also depend on the jump state
  ``X_t = sum_k value_k N^k_t``;
* a terminal payoff ``xi`` that is a function of ``(X_T, N_T)``.

Measure dependence through ``mean(mu)`` or ``W_p(mu, delta_0)`` is
1-Lipschitz in ``W_p`` for ``p >= 1``, so declared coefficients translate
directly into the Lipschitz constants probed by :func:`validate_assumptions`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, RegimeError
from .measures import DiscreteLaw, wasserstein
from .mpp_sim import ClockA, IntensityKernel, MarkSpace, ScenarioTree, build_tree
from .rng import stream

DRIVER_FAMILIES = ("linear", "lipschitz-saturated", "quadratic-exponential")
OBSTACLE_FAMILIES = ("constant", "linear", "inactive")
TERMINAL_FAMILIES = ("constant", "indicator", "linear", "clipped")
MEASURE_FORMS = ("mean", "distance")
INACTIVE_LEVEL = -1.0e6
PROBE_TOL = 1e-9


def j_lambda(u: np.ndarray, weights: np.ndarray, lam: float) -> np.ndarray:
    """``sum_k (exp(lam u_k) - lam u_k - 1) phi_k``; nonnegative, zero iff ``u = 0``."""
    lu = lam * np.asarray(u, dtype=float)
    return (np.expm1(lu) - lu) @ np.asarray(weights, dtype=float)


def measure_statistic(law: DiscreteLaw, form: str, p: float) -> float:
    if form == "mean":
        return law.mean()
    return law.moment(p) ** (1.0 / p)


@dataclass(frozen=True)
class DriverSpec:
    """Driver ``f(t, y, u, mu)``.

    ``linear``: ``a y + b m(mu) + sum_k g_k phi_k u_k + c``.
    ``lipschitz-saturated``: ``s tanh(linear / s)``.
    ``quadratic-exponential``: ``linear + j_lam(u) / lam``.

    ``C_f`` is the declared Lipschitz constant (defaults to the natural bound of
    the family on ``|u| <= u_bound``); ``beta`` and ``alpha_bound`` the growth
    envelope constants; ``a_gamma`` the pair ``(C1, C2)`` bounding the slope
    process of the A_gamma condition.
    """

    family: str = "linear"
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0
    g: tuple = ()
    scale: float = 1.0
    lam: float = 1.0
    measure_form: str = "mean"
    C_f: float | None = None
    beta: float | None = None
    alpha_bound: float | None = None
    a_gamma: tuple | None = None
    u_bound: float = 1.0

    def __post_init__(self):
        if self.family not in DRIVER_FAMILIES:
            raise ConfigError(f"unknown driver family {self.family!r}")
        if self.measure_form not in MEASURE_FORMS:
            raise ConfigError(f"unknown measure form {self.measure_form!r}")
        object.__setattr__(self, "g", tuple(float(x) for x in self.g))
        for name in ("C_f", "beta", "alpha_bound"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"driver constant {name} must be nonnegative")
        if self.family == "lipschitz-saturated" and self.scale <= 0:
            raise ConfigError("saturation scale must be positive")
        if self.family == "quadratic-exponential" and self.lam <= 0:
            raise ConfigError("lam must be positive for the quadratic-exponential family")
        if self.a_gamma is not None:
            object.__setattr__(self, "a_gamma", tuple(float(x) for x in self.a_gamma))

    def _g(self, m: int) -> np.ndarray:
        if not self.g:
            return np.zeros(m)
        g = np.asarray(self.g, dtype=float)
        if g.size != m:
            raise ConfigError(f"driver u-coefficients have {g.size} entries, mark space has {m}")
        return g

    @property
    def measure_free(self) -> bool:
        return self.b == 0.0

    @property
    def convex_in_u(self) -> bool | None:
        if self.family in ("linear", "quadratic-exponential"):
            return True
        return None

    def __call__(self, t, y, u, weights, mstat):
        """Evaluate on arrays: ``y`` shape ``(N,)``, ``u`` shape ``(N, m)``."""
        y = np.asarray(y, dtype=float)
        u = np.asarray(u, dtype=float)
        w = np.asarray(weights, dtype=float)
        g = self._g(w.size)
        lin = self.a * y + self.b * mstat + u @ (g * w) + self.c
        if self.family == "linear":
            return lin
        if self.family == "lipschitz-saturated":
            return self.scale * np.tanh(lin / self.scale)
        return lin + j_lambda(u, w, self.lam) / self.lam

    def natural_lipschitz(self, weights) -> float:
        w = np.asarray(weights, dtype=float)
        g = self._g(w.size)
        if self.family == "quadratic-exponential":
            slope = np.abs(g) + np.expm1(self.lam * self.u_bound)
            ucoef = math.sqrt(float(slope**2 @ w))
        else:
            ucoef = math.sqrt(float(g**2 @ w))
        return max(abs(self.a), abs(self.b), ucoef)

    def lipschitz(self, weights) -> float:
        return self.natural_lipschitz(weights) if self.C_f is None else float(self.C_f)

    def growth_constants(self, weights) -> tuple[float, float]:
        """``(alpha, beta)`` of the growth envelope, declared or natural."""
        w = np.asarray(weights, dtype=float)
        beta = max(abs(self.a), abs(self.b)) if self.beta is None else float(self.beta)
        if self.alpha_bound is not None:
            return float(self.alpha_bound), beta
        g = self._g(w.size)
        # g u <= lam u^2 / 2 + g^2 / (2 lam) and j_lam(u) / lam >= lam u^2 / 2 for u >= 0 only,
        # so the natural alpha absorbs the linear u-term on the probe box instead
        alpha = abs(self.c) + float(np.abs(g) @ w) * self.u_bound
        if self.family == "lipschitz-saturated":
            alpha = min(alpha, self.scale)
        return alpha, beta

    def slopes(self, y, u1, u2, weights, mstat) -> np.ndarray:
        """Per-mark slopes ``gamma_k`` with ``f(u1) - f(u2) = sum_k gamma_k phi_k (u1_k - u2_k)``.

        Built from coordinate-wise divided differences along the path that
        switches one mark at a time from ``u2`` to ``u1``.
        """
        w = np.asarray(weights, dtype=float)
        u1 = np.asarray(u1, dtype=float)
        u2 = np.asarray(u2, dtype=float)
        cur = u2.copy()
        out = np.zeros(w.size)
        prev = float(self(0.0, np.array([y]), cur[None, :], w, mstat)[0])
        for k in range(w.size):
            nxt = cur.copy()
            nxt[k] = u1[k]
            val = float(self(0.0, np.array([y]), nxt[None, :], w, mstat)[0])
            du = u1[k] - u2[k]
            if w[k] > 0 and du != 0:
                out[k] = (val - prev) / (w[k] * du)
            cur, prev = nxt, val
        return out


@dataclass(frozen=True)
class ObstacleSpec:
    """Obstacle ``h(t, y, mu) = c0 + c1 t + c_state X_t + k1 y + k2 m(mu)``."""

    family: str = "inactive"
    c0: float = 0.0
    c1: float = 0.0
    c_state: float = 0.0
    k1: float = 0.0
    k2: float = 0.0
    measure_form: str = "mean"
    gamma1: float | None = None
    gamma2: float | None = None

    def __post_init__(self):
        if self.family not in OBSTACLE_FAMILIES:
            raise ConfigError(f"unknown obstacle family {self.family!r}")
        if self.measure_form not in MEASURE_FORMS:
            raise ConfigError(f"unknown measure form {self.measure_form!r}")
        if self.family != "linear" and (self.k1 or self.k2):
            raise ConfigError("only the linear obstacle family may depend on y or the law")
        for name in ("gamma1", "gamma2"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"{name} must be nonnegative")

    @property
    def g1(self) -> float:
        return abs(self.k1) if self.gamma1 is None else float(self.gamma1)

    @property
    def g2(self) -> float:
        return abs(self.k2) if self.gamma2 is None else float(self.gamma2)

    @property
    def active(self) -> bool:
        return self.family != "inactive"

    @property
    def measure_free(self) -> bool:
        return self.k2 == 0.0

    @property
    def y_free(self) -> bool:
        return self.k1 == 0.0

    def __call__(self, t, y, state, mstat):
        y = np.asarray(y, dtype=float)
        if self.family == "inactive":
            return np.full(y.shape, INACTIVE_LEVEL)
        base = self.c0 + self.c1 * t + self.c_state * np.asarray(state, dtype=float)
        if self.family == "constant":
            return np.broadcast_to(base, y.shape).astype(float)
        return base + self.k1 * y + self.k2 * mstat


@dataclass(frozen=True)
class TerminalSpec:
    """Terminal payoff as a function of the jump state ``X_T`` and count ``N_T``.

    ``constant``: ``c``; ``indicator``: ``lo + (hi - lo) 1{N_T >= threshold}``;
    ``linear``: ``c + slope X_T``; ``clipped``: ``clip(c + slope X_T, lo, hi)``.
    """

    family: str = "constant"
    c: float = 0.0
    slope: float = 0.0
    lo: float = 0.0
    hi: float = 1.0
    threshold: int = 1
    bound: float | None = None

    def __post_init__(self):
        if self.family not in TERMINAL_FAMILIES:
            raise ConfigError(f"unknown terminal family {self.family!r}")
        if self.family == "clipped" and self.lo > self.hi:
            raise ConfigError("clipped terminal needs lo <= hi")

    def __call__(self, state, count) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        count = np.asarray(count)
        if self.family == "constant":
            return np.full(state.shape, float(self.c))
        if self.family == "indicator":
            return np.where(count >= self.threshold, self.hi, self.lo).astype(float)
        lin = self.c + self.slope * state
        if self.family == "linear":
            return lin
        return np.clip(lin, self.lo, self.hi)

    @property
    def deterministic(self) -> bool:
        return self.family == "constant" or (self.family == "linear" and self.slope == 0.0)


@dataclass(frozen=True)
class ModelConfig:
    """Complete model: noise, coefficients, framework and grid size."""

    marks: MarkSpace
    clock: ClockA
    kernel: IntensityKernel
    driver: DriverSpec
    obstacle: ObstacleSpec
    terminal: TerminalSpec
    framework: str = "mpp"
    M: int = 8

    def __post_init__(self):
        if self.framework not in ("mpp", "poisson"):
            raise ConfigError(f"framework must be 'mpp' or 'poisson', got {self.framework!r}")
        if self.framework == "poisson" and self.clock.kind != "identity":
            raise ConfigError("the poisson framework requires the identity clock A(t) = t")
        if self.marks.size != self.kernel.size:
            raise ConfigError("mark space and kernel sizes differ")
        if int(self.M) < 1:
            raise ConfigError("grid size M must be at least 1")
        self.driver._g(self.kernel.size)

    @property
    def order(self) -> int:
        """Wasserstein order of the framework's Lipschitz hypotheses."""
        return 2 if self.framework == "mpp" else 1

    @property
    def horizon(self) -> float:
        return self.clock.horizon

    @property
    def C_f(self) -> float:
        return self.driver.lipschitz(self.kernel.weights)

    @property
    def measure_free(self) -> bool:
        return self.driver.measure_free and self.obstacle.measure_free

    def with_(self, **changes) -> "ModelConfig":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return ModelConfig(**fields)

    def tree(self, *, M: int | None = None, recombine: bool = True, **kw) -> ScenarioTree:
        return build_tree(
            self.kernel,
            self.clock,
            self.M if M is None else M,
            marks=self.marks,
            recombine=recombine,
            **kw,
        )

    def terminal_values(self, tree: ScenarioTree, block: int | None = None) -> np.ndarray:
        return self.terminal(tree.state(tree.M, block), tree.jump_count(tree.M, block))


@dataclass
class Verdict:
    name: str
    passed: bool | None
    margin: float | None = None
    detail: str = ""


@dataclass
class ValidationReport:
    verdicts: list = field(default_factory=list)

    def add(self, name, passed, margin=None, detail=""):
        self.verdicts.append(
            Verdict(name, None if passed is None else bool(passed),
                    None if margin is None else float(margin), detail)
        )

    def __getitem__(self, name: str) -> Verdict:
        for v in self.verdicts:
            if v.name == name:
                return v
        raise KeyError(name)

    @property
    def all_passed(self) -> bool:
        return all(v.passed is not False for v in self.verdicts)

    def to_dict(self) -> dict:
        return {"all_passed": self.all_passed, "verdicts": [asdict(v) for v in self.verdicts]}


def _random_law(rng, size=4, scale=2.0) -> DiscreteLaw:
    atoms = rng.uniform(-scale, scale, size)
    probs = rng.dirichlet(np.ones(size))
    return DiscreteLaw.from_weighted(atoms, probs)


def validate_assumptions(model: ModelConfig, probes: int = 200, seed: int = 0) -> ValidationReport:
    """Probe the Lipschitz, growth, dominance and A_gamma hypotheses numerically."""
    rng = stream(seed, 11)
    rep = ValidationReport()
    drv, obs, term = model.driver, model.obstacle, model.terminal
    w = model.kernel.weights
    m = w.size
    p = model.order
    T = model.horizon
    Cf = model.C_f
    Mb = drv.u_bound

    rep.add("clock", True, model.clock.total,
            f"A continuous nondecreasing, A(0)=0, A(T)={model.clock.total:.6g}")

    lip_margin = np.inf
    h_margin = np.inf
    grow_margin = np.inf
    for _ in range(probes):
        t = rng.uniform(0, T)
        y1, y2 = rng.uniform(-3, 3, 2)
        u1, u2 = rng.uniform(-Mb, Mb, (2, m))
        mu1, mu2 = _random_law(rng), _random_law(rng)
        s1 = measure_statistic(mu1, drv.measure_form, p)
        s2 = measure_statistic(mu2, drv.measure_form, p)
        W = wasserstein(mu1, mu2, p)
        du = math.sqrt(float((u1 - u2) ** 2 @ w))
        f1 = float(drv(t, np.array([y1]), u1[None], w, s1)[0])
        f2 = float(drv(t, np.array([y2]), u2[None], w, s2)[0])
        lip_margin = min(lip_margin, Cf * (abs(y1 - y2) + du + W) - abs(f1 - f2))

        o1 = measure_statistic(mu1, obs.measure_form, p)
        o2 = measure_statistic(mu2, obs.measure_form, p)
        state = rng.uniform(-3, 3)
        h1 = float(obs(t, np.array([y1]), state, o1)[0])
        h2 = float(obs(t, np.array([y2]), state, o2)[0])
        h_margin = min(h_margin, obs.g1 * abs(y1 - y2) + obs.g2 * W - abs(h1 - h2))

        alpha, beta = drv.growth_constants(w)
        lam = drv.lam
        env = alpha + beta * (abs(y1) + wasserstein(mu1, DiscreteLaw.dirac(0.0), p))
        upper = float(j_lambda(u1, w, lam)) / lam + env
        lower = -float(j_lambda(-u1, w, lam)) / lam - env
        grow_margin = min(grow_margin, upper - f1, f1 - lower)

    rep.add("driver_lipschitz", lip_margin >= -PROBE_TOL, lip_margin,
            f"|df| <= C_f (|dy| + |du| + W_{p}) with C_f={Cf:.6g}")
    rep.add("obstacle_lipschitz", h_margin >= -PROBE_TOL, h_margin,
            f"|dh| <= gamma1 |dy| + gamma2 W_{p} with gamma=({obs.g1:.6g}, {obs.g2:.6g})")
    rep.add("driver_growth", grow_margin >= -PROBE_TOL, grow_margin,
            "two-sided quadratic-exponential growth envelope")

    tree = model.tree()
    grid = tree.times
    f0 = np.array([float(drv(t, np.zeros(1), np.zeros((1, m)), w, 0.0)[0]) for t in grid])
    h0 = np.array([float(obs(t, np.zeros(1), 0.0, 0.0)[0]) for t in grid])
    rep.add("driver_bounded_at_zero", bool(np.all(np.isfinite(f0))), float(np.max(np.abs(f0))),
            "sup_t |f(t,0,0,delta_0)| on the grid")
    rep.add("obstacle_bounded_at_zero", bool(np.all(np.isfinite(h0))), float(np.max(np.abs(h0))),
            "sup_t |h(t,0,delta_0)| on the grid")

    xi = model.terminal_values(tree)
    law = DiscreteLaw.from_weighted(xi, tree.node_prob[tree.M])
    hT = obs(grid[-1], xi, tree.state(tree.M), measure_statistic(law, obs.measure_form, p))
    dom = float(np.min(xi - hT))
    rep.add("terminal_dominates_obstacle", dom >= -PROBE_TOL, dom, "xi >= h(T, xi, P_xi) on every leaf")
    if term.bound is not None:
        rep.add("terminal_bounded", float(np.max(np.abs(xi))) <= term.bound + PROBE_TOL,
                term.bound - float(np.max(np.abs(xi))), "declared sup |xi|")

    if drv.a_gamma is None:
        rep.add("a_gamma", None, None, "slope bounds not declared; probe skipped")
    else:
        C1, C2 = drv.a_gamma
        scale = np.minimum(1.0, np.abs(model.marks.values))
        ag_margin = np.inf
        ok = C1 > -1 and C2 > 0
        for _ in range(probes):
            y = rng.uniform(-Mb, Mb)
            u1, u2 = rng.uniform(-Mb, Mb, (2, m))
            s = rng.uniform(-1, 1)
            gam = drv.slopes(y, u1, u2, w, s)
            live = (w > 0) & (u1 != u2)
            lo_gap = np.where(live, gam - C1 * scale, np.inf)
            hi_gap = np.where(live, C2 * scale - gam, np.inf)
            lhs = float(drv(0.0, np.array([y]), u1[None], w, s)[0]
                        - drv(0.0, np.array([y]), u2[None], w, s)[0])
            rhs = float(gam * w @ (u1 - u2))
            ag_margin = min(ag_margin, float(np.min(lo_gap)), float(np.min(hi_gap)),
                            rhs - lhs + PROBE_TOL)
        rep.add("a_gamma", ok and ag_margin >= -PROBE_TOL, ag_margin,
                f"slopes within [C1 (1^|x|), C2 (1^|x|)] with C1={C1:.6g} > -1, C2={C2:.6g} > 0")

    rep.add("convexity_in_u", drv.convex_in_u, None,
            f"family {drv.family}: convex in u" if drv.convex_in_u else
            f"family {drv.family}: convexity not guaranteed")

    c0_margin = np.inf
    for _ in range(probes):
        u = rng.uniform(-Mb, Mb, m)
        s = rng.uniform(-1, 1)
        diff = float(drv(0.0, np.zeros(1), u[None], w, s)[0] - drv(0.0, np.zeros(1), np.zeros((1, m)), w, s)[0])
        nrm = math.sqrt(float(u**2 @ w))
        c0_margin = min(c0_margin, diff + Cf * nrm)
    rep.add("uniform_linear_bound", c0_margin >= -PROBE_TOL, c0_margin,
            "f(t,0,u,mu) - f(t,0,0,mu) >= -C_0 |u| with C_0 = C_f")

    g1, g2 = obs.g1, obs.g2
    conv = 0.125 - (g1**2 + g2**2)
    rep.add("convergence_condition", conv > 0, conv, "gamma1^2 + gamma2^2 < 1/8")
    eta, beta = _eta_beta(Cf)
    cm = 0.5 - (g1**2 + g2**2 * math.exp(2 * beta * model.clock.total))
    rep.add("contraction_condition", cm > 0, cm, "gamma1^2 + gamma2^2 exp(2 beta A_T) < 1/2")
    return rep


def _eta_beta(Cf: float) -> tuple[float, float]:
    if Cf == 0:
        return math.inf, 0.0
    eta = 1.0 / Cf**2
    return eta, Cf + 1.0 / eta


@dataclass(frozen=True)
class ContractionParams:
    """Constants of the Picard contraction and the stitching step length."""

    eta: float
    beta: float
    C_f: float
    gamma1: float
    gamma2: float
    A_T: float
    h_step: float
    alpha: float
    alpha_full: float
    gamma_margin: float
    h_poisson: float | None = None
    framework: str = "mpp"

    @property
    def eta_cf2(self) -> float:
        """``eta * C_f^2``, read as zero for a driver with ``C_f = 0``."""
        return 0.0 if self.C_f == 0 else self.eta * self.C_f**2

    def weighted_integral(self, A_lo: float, A_hi: float) -> float:
        """``int exp(2 beta A_s) dA_s`` between clock values ``A_lo <= A_hi``."""
        if self.beta == 0:
            return A_hi - A_lo
        return (math.exp(2 * self.beta * A_hi) - math.exp(2 * self.beta * A_lo)) / (2 * self.beta)

    def interval_alpha(self, A_lo: float, A_hi: float) -> float:
        return self.eta_cf2 * self.weighted_integral(A_lo, A_hi) + 2 * (
            self.gamma1**2 + self.gamma2**2 * math.exp(2 * self.beta * self.A_T)
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eta"] = None if math.isinf(self.eta) else self.eta
        return d


def contraction_params(model: ModelConfig, *, bisect_iter: int = 200) -> ContractionParams:
    """Constants making the frozen-flow Picard map a contraction.

    Raises :class:`RegimeError` when ``gamma1^2 + gamma2^2 exp(2 beta A_T) >= 1/2``,
    in which case no step length helps.
    """
    Cf = model.C_f
    g1, g2 = model.obstacle.g1, model.obstacle.g2
    clock = model.clock
    T, A_T = clock.horizon, clock.total
    eta, beta = _eta_beta(Cf)
    gamma_part = g1**2 + g2**2 * math.exp(2 * beta * A_T)
    margin = 0.5 - gamma_part
    if margin <= 0:
        raise RegimeError(
            f"no contraction regime: gamma1^2 + gamma2^2 exp(2 beta A_T) = {gamma_part:.6g} >= 1/2",
            margin=margin,
        )
    proto = ContractionParams(eta, beta, Cf, g1, g2, A_T, T, 0.0, 0.0, margin)

    def alpha_of(h):
        return proto.interval_alpha(float(clock(T - h)), A_T)

    alpha_full = alpha_of(T)
    if alpha_full < 1:
        h = T
    else:
        lo, hi = 0.0, T
        for _ in range(bisect_iter):
            mid = 0.5 * (lo + hi)
            if alpha_of(mid) < 1:
                lo = mid
            else:
                hi = mid
        h = lo
    h_poisson = None
    if model.framework == "poisson":
        room = 1.0 - g1 - g2
        if room > 0:
            h_poisson = T if Cf == 0 else min(T, room / (2 * Cf))
            # largest float with a strict inequality
            while Cf > 0 and g1 + g2 + 2 * Cf * h_poisson >= 1:
                h_poisson = math.nextafter(h_poisson, 0.0)
    return ContractionParams(eta, beta, Cf, g1, g2, A_T, h, alpha_of(h), alpha_full,
                             margin, h_poisson, model.framework)
