"""Reference models: closed-form linear, two-atom, bounded Poisson and random in-regime."""

from __future__ import annotations

import numpy as np

from .measures import DiscreteLaw
from .models import DriverSpec, ModelConfig, ObstacleSpec, TerminalSpec, measure_statistic
from .mpp_sim import ClockA, IntensityKernel, MarkSpace
from .rng import stream


def linear_mean_model(a=0.5, b=0.3, xi=1.0, T=0.25, M=8, phi=1.0) -> ModelConfig:
    """``f = a y + b E[Y]``, deterministic terminal, no obstacle: ``Y`` is deterministic."""
    return ModelConfig(
        MarkSpace.default(1), ClockA.identity(T), IntensityKernel([phi]),
        DriverSpec("linear", a=a, b=b), ObstacleSpec(), TerminalSpec("constant", c=xi), "mpp", M,
    )


def linear_mean_recursion(a, b, xi, dA) -> np.ndarray:
    """Backward implicit recursion ``m_i = m_{i+1} + (a + b) m_i dA_i``."""
    m = [float(xi)]
    for d in dA[::-1]:
        m.append(m[-1] / (1 - (a + b) * d))
    return np.array(m[::-1])


def two_atom_model(M=4, T=1.0, phi=1.0, lo=0.0, hi=1.0) -> ModelConfig:
    """Poisson, one mark, ``xi = 1{N_T >= 1}`` and a zero driver.

    The terminal law has two atoms; earlier laws are finite and explicit.
    """
    return ModelConfig(
        MarkSpace.default(1), ClockA.identity(T), IntensityKernel([phi]),
        DriverSpec("linear"), ObstacleSpec(), TerminalSpec("indicator", lo=lo, hi=hi, bound=max(abs(lo), abs(hi))),
        "poisson", M,
    )


def bounded_poisson_model(M=16, T=1.0, phi=1.0) -> ModelConfig:
    """Bounded Poisson model with jump-state terminal, mean interaction and an active obstacle."""
    return ModelConfig(
        MarkSpace.default(1), ClockA.identity(T), IntensityKernel([phi]),
        DriverSpec("linear", a=-0.3, b=0.2, g=(0.2,), c=0.1),
        ObstacleSpec("linear", c0=0.7, c1=-0.6, k1=0.1, k2=0.1),
        TerminalSpec("clipped", c=0.2, slope=0.5, lo=0.2, hi=1.0, bound=1.0),
        "poisson", M,
    )


def random_model(
    seed: int,
    *,
    M: int | None = None,
    m: int | None = None,
    T: float | None = None,
    max_gamma: float = 0.3,
    interacting: bool = True,
    framework: str | None = None,
    family: str | None = None,
) -> ModelConfig:
    """Seeded small model with an obstacle guaranteed to lie below the terminal payoff."""
    rng = stream(seed, 101)
    m = int(rng.integers(1, 3)) if m is None else m
    M = int(rng.integers(2, 5)) if M is None else M
    T = float(rng.uniform(0.1, 0.4)) if T is None else T
    framework = ("mpp", "poisson")[int(rng.integers(0, 2))] if framework is None else framework
    if framework == "mpp" and rng.uniform() < 0.5:
        clock = ClockA.from_function(lambda t: t + 0.5 * t**2 / T, T)
    else:
        clock = ClockA.identity(T)
    weights = rng.uniform(0.2, 1.5, m)
    values = np.sort(rng.uniform(-1.0, 1.0, m)) if m > 1 else np.array([1.0])
    marks = MarkSpace(tuple(f"e{k + 1}" for k in range(m)), values)
    family = ("linear", "lipschitz-saturated")[int(rng.integers(0, 2))] if family is None else family
    b = float(rng.uniform(-0.8, 0.8)) if interacting else 0.0
    driver = DriverSpec(
        family,
        a=float(rng.uniform(-1, 1)),
        b=b,
        c=float(rng.uniform(-0.5, 0.5)),
        g=tuple(rng.uniform(-0.6, 0.6, m)),
        scale=float(rng.uniform(0.5, 2.0)),
        measure_form=("mean", "distance")[int(rng.integers(0, 2))],
    )
    k1 = float(rng.uniform(-max_gamma, max_gamma))
    k2 = float(rng.uniform(-max_gamma, max_gamma)) if interacting else 0.0
    terminal = TerminalSpec(
        "clipped", c=float(rng.uniform(-0.5, 0.5)), slope=float(rng.uniform(-1, 1)),
        lo=-1.0, hi=1.0, bound=1.0,
    )
    base = ObstacleSpec("linear", 0.0, float(rng.uniform(-1, 1)), float(rng.uniform(-0.5, 0.5)), k1, k2,
                        ("mean", "distance")[int(rng.integers(0, 2))])
    proto = ModelConfig(marks, clock, IntensityKernel(weights), driver, base, terminal, framework, M)
    tree = proto.tree()
    xi = proto.terminal_values(tree)
    law = DiscreteLaw.from_weighted(xi, tree.node_prob[M])
    hT = base(T, xi, tree.state(M), measure_statistic(law, base.measure_form, proto.order))
    c0 = float(np.min(xi - hT)) - float(rng.uniform(0.0, 0.2))
    obstacle = ObstacleSpec("linear", c0, base.c1, base.c_state, k1, k2, base.measure_form)
    return proto.with_(obstacle=obstacle)
