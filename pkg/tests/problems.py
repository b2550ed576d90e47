"""Benchmark problems shared by the unit and acceptance tests."""
from __future__ import annotations

import numpy as np

from ospde.model import (
    CoefficientSet,
    DominatorSpec,
    Lipschitz,
    ObstacleSpec,
    SigmaField,
    SpatialDomain,
    SpdeProblem,
)
from ospde.symbolic import parse_fields

PI = np.pi


def line(n: int) -> SpatialDomain:
    return SpatialDomain(((0.0, PI),), (n,))


def sine(x):
    return np.sin(x[:, 0])


def flat(value: float):
    return lambda t, x: np.full(x.shape[0], value)


def additive(f0: float = 0.0, h=None, J: int = 1, n: int = 1, lip=(0.0, 0.0, 0.0)) -> CoefficientSet:
    """State-independent coefficients: constant drift, zero g, noise h(x) (P, J)."""
    hx = h if h is not None else (lambda x: np.zeros((x.shape[0], J)))
    return CoefficientSet(
        f=lambda t, x, y, z: np.full(x.shape[0], f0),
        g=lambda t, x, y, z: np.zeros((x.shape[0], n)),
        h=lambda t, x, y, z: hx(x),
        lipschitz=Lipschitz(*lip),
        n=n,
        J=J,
        state_dependent=False,
    )


def heat(n: int = 127, T: float = 0.5, barrier: float | None = -10.0) -> SpdeProblem:
    obs = None if barrier is None else ObstacleSpec(barrier=flat(barrier))
    return SpdeProblem(line(n), SigmaField.constant([[1.0]], bound=1.0), CoefficientSet.zero(), sine, obs, horizon=T)


def mode_noise(J: int, scale: float = 1.0, power: float = 0.5):
    k = np.arange(1, J + 1)
    return lambda x: scale * np.sin(k * x[:, :1]) / k ** power


def penalty_sweep_problem() -> SpdeProblem:
    """xi = sin x above S = 0, noise pushing into the contact set through 8 sine channels."""
    J = 8
    return SpdeProblem(
        line(127),
        SigmaField.constant([[1.0]], bound=1.0),
        additive(0.0, mode_noise(J), J),
        sine,
        ObstacleSpec(barrier=flat(0.0)),
        horizon=0.5,
    )


def negative_drift_problem(f0: float = -5.0, n_nodes: int = 63, T: float = 0.5) -> SpdeProblem:
    return SpdeProblem(
        line(n_nodes),
        SigmaField.constant([[1.0]], bound=1.0),
        additive(f0, mode_noise(1, 0.5), 1),
        sine,
        ObstacleSpec(barrier=flat(0.0)),
        horizon=T,
    )


def picard_problem(obstacle: bool = True) -> SpdeProblem:
    """Nonlinear coefficients with Lipschitz constants (C, alpha, beta) = (0.5, 0.1, 0.3)."""
    def f(t, x, y, z):
        return 0.25 * (np.sin(y) + np.sin(z[:, 0])) + np.sin(x[:, 0])

    def g(t, x, y, z):
        return (0.25 * np.sin(y) + 0.1 * np.sin(z[:, 0]))[:, None]

    def h(t, x, y, z):
        return (np.sin(x[:, 0]) * (0.25 * np.sin(y) + 0.3 * np.sin(z[:, 0])))[:, None]

    coeffs = CoefficientSet(f, g, h, Lipschitz(0.5, 0.1, 0.3), 1, 1)
    obs = ObstacleSpec(barrier=flat(-0.1)) if obstacle else None
    return SpdeProblem(line(63), SigmaField.constant([[1.0]], bound=1.0), coeffs, sine, obs, horizon=1.0)


def comparison_pair(kind: str):
    """(A, B) with ordered data: 'drift' shifts f by 1, 'obstacle' shifts S and xi by 0.1."""
    J = 2
    noise = mode_noise(J, 0.5)

    def make(f0, s0, xi_shift):
        def f(t, x, y, z):
            return f0 - 0.5 * np.tanh(y)

        coeffs = CoefficientSet(
            f,
            lambda t, x, y, z: np.zeros((x.shape[0], 1)),
            lambda t, x, y, z: noise(x),
            Lipschitz(0.5, 0.0, 0.0),
            1,
            J,
        )
        return SpdeProblem(
            line(63),
            SigmaField.constant([[1.0]], bound=1.0),
            coeffs,
            lambda x: np.sin(x[:, 0]) + xi_shift,
            ObstacleSpec(barrier=flat(s0)),
            horizon=0.5,
        )

    if kind == "drift":
        return make(-1.0, 0.0, 0.0), make(0.0, 0.0, 0.0)
    if kind == "obstacle":
        return make(-1.0, 0.0, 0.0), make(-1.0, 0.1, 0.1)
    raise ValueError(kind)


def degiorgi_problem(J: int = 8, scale: float = 1.0) -> SpdeProblem:
    """Bounded coefficients, S' = 0 simulated as a dominating SPDE, S = S' - 1/2, xi = S'(0)."""
    zero_g = lambda t, x: np.zeros((x.shape[0], 1))
    zero_h = lambda t, x: np.zeros((x.shape[0], J))
    dom = DominatorSpec(flat(0.0), zero_g, zero_h, initial=lambda x: np.zeros(x.shape[0]))
    coeffs = additive(0.0, mode_noise(J, scale, 1.0), J)
    sigma = SigmaField.from_vector_fields(parse_fields(["d1"]), bound=1.0)
    return SpdeProblem(
        line(63),
        sigma,
        coeffs,
        lambda x: np.zeros(x.shape[0]),
        ObstacleSpec(dominator=dom, offset=0.5),
        horizon=1.0,
    )
