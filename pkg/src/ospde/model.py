"""Problem data for the obstacle problem and its structural assumptions.

The equation is

    du = [div(a grad u) + div(sigma g) + f] dt + sum_j h_j dB^j + nu,   u >= S

on a box with null Dirichlet data, ``a = sigma sigma^T``.  Coefficients are
vectorised callables ``(t, x, y, z) -> values`` where ``x`` has shape (P, d),
``y`` shape (P,) and ``z`` shape (P, n) holds ``sigma^T grad u``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .symbolic import VectorField

CoefficientFn = Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
SpaceFn = Callable[[np.ndarray], np.ndarray]
SpaceTimeFn = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SpatialDomain:
    """Axis-aligned box; ``resolution`` counts interior nodes per axis."""

    extent: tuple[tuple[float, float], ...]
    resolution: tuple[int, ...]

    def __post_init__(self) -> None:
        extent = tuple((float(a), float(b)) for a, b in self.extent)
        resolution = tuple(int(n) for n in self.resolution)
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "resolution", resolution)
        if len(extent) not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {len(extent)}")
        if len(resolution) != len(extent):
            raise ValueError("resolution needs one entry per axis")
        if any(n < 3 for n in resolution):
            raise ValueError("each axis needs at least 3 interior nodes")
        if any(not b > a for a, b in extent):
            raise ValueError("every axis interval must have positive length")

    @property
    def dim(self) -> int:
        return len(self.extent)

    @property
    def lengths(self) -> tuple[float, ...]:
        return tuple(b - a for a, b in self.extent)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / (n + 1) for L, n in zip(self.lengths, self.resolution))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def full_axes(self) -> list[np.ndarray]:
        """Node coordinates per axis, boundary nodes included."""
        return [np.linspace(a, b, n + 2) for (a, b), n in zip(self.extent, self.resolution)]

    def axes(self) -> list[np.ndarray]:
        return [ax[1:-1] for ax in self.full_axes()]

    def nodes(self) -> np.ndarray:
        """Interior node coordinates, shape (P, d), C order."""
        return _mesh_points(self.axes())

    def full_nodes(self) -> np.ndarray:
        return _mesh_points(self.full_axes())

    def boundary_mask(self) -> np.ndarray:
        """Flat boolean mask over ``full_nodes()`` selecting boundary nodes."""
        shape = tuple(n + 2 for n in self.resolution)
        mask = np.zeros(shape, dtype=bool)
        for axis in range(self.dim):
            idx = [slice(None)] * self.dim
            idx[axis] = 0
            mask[tuple(idx)] = True
            idx[axis] = -1
            mask[tuple(idx)] = True
        return mask.ravel()


def _mesh_points(axes: Sequence[np.ndarray]) -> np.ndarray:
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


@dataclass(frozen=True)
class SigmaField:
    """The factor ``sigma(x)`` (d x n) of the diffusion matrix ``a = sigma sigma^T``.

    ``bound`` is the declared ellipticity ceiling lambda_0 (None: undeclared).
    ``fields`` keeps the polynomial vector fields when sigma was built from them.
    ``matrix`` supplies a(x) directly, bypassing the factorisation; it exists
    so that tabulated diffusion data can be checked for semidefiniteness.
    """

    dim: int
    columns: int
    func: SpaceFn
    bound: float | None = None
    fields: tuple[VectorField, ...] | None = None
    matrix: SpaceFn | None = None

    def values(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.asarray(self.func(x), dtype=float)
        expected = (x.shape[0], self.dim, self.columns)
        if out.shape != expected:
            out = np.broadcast_to(out, expected).copy()
        return out

    def diffusion(self, x: np.ndarray) -> np.ndarray:
        """a(x) at each point, shape (P, d, d); ``matrix`` overrides sigma sigma^T."""
        if self.matrix is not None:
            x = np.atleast_2d(np.asarray(x, dtype=float))
            return np.broadcast_to(np.asarray(self.matrix(x), dtype=float), (x.shape[0], self.dim, self.dim)).copy()
        s = self.values(x)
        return np.einsum("pik,pjk->pij", s, s)

    @classmethod
    def constant(cls, matrix, bound: float | None = None) -> "SigmaField":
        m = np.atleast_2d(np.asarray(matrix, dtype=float))
        d, n = m.shape
        return cls(d, n, lambda x: np.broadcast_to(m, (x.shape[0], d, n)), bound)

    @classmethod
    def zero(cls, dim: int, columns: int = 1) -> "SigmaField":
        return cls.constant(np.zeros((dim, columns)), bound=0.0)

    @classmethod
    def from_vector_fields(cls, fields: Sequence[VectorField], bound: float | None = None) -> "SigmaField":
        """Column k of sigma is the coefficient vector of field L_k."""
        fields = tuple(fields)
        if not fields:
            raise ValueError("need at least one vector field")
        d = fields[0].dim

        def func(x: np.ndarray) -> np.ndarray:
            return np.stack([f(x) for f in fields], axis=-1)

        return cls(d, len(fields), func, bound, fields)


@dataclass(frozen=True)
class Lipschitz:
    C: float
    alpha: float
    beta: float

    def __post_init__(self) -> None:
        if min(self.C, self.alpha, self.beta) < 0:
            raise ValueError("Lipschitz constants must be non-negative")


def _zero_scalar(t, x, y, z):
    return np.zeros(x.shape[0])


@dataclass(frozen=True)
class CoefficientSet:
    """Drift ``f``, divergence data ``g`` (n components) and noise ``h`` (J channels).

    ``state_dependent`` may be declared; when None it is decided by probing.
    """

    f: CoefficientFn
    g: CoefficientFn
    h: CoefficientFn
    lipschitz: Lipschitz
    n: int
    J: int
    state_dependent: bool | None = None

    def __post_init__(self) -> None:
        if self.n < 1 or self.J < 1:
            raise ValueError("need n >= 1 divergence components and J >= 1 noise channels")

    def eval_f(self, t, x, y, z) -> np.ndarray:
        return _shaped(self.f(t, x, y, z), (x.shape[0],), "f")

    def eval_g(self, t, x, y, z) -> np.ndarray:
        return _shaped(self.g(t, x, y, z), (x.shape[0], self.n), "g")

    def eval_h(self, t, x, y, z) -> np.ndarray:
        return _shaped(self.h(t, x, y, z), (x.shape[0], self.J), "h")

    @classmethod
    def zero(cls, n: int = 1, J: int = 1) -> "CoefficientSet":
        return cls(
            f=_zero_scalar,
            g=lambda t, x, y, z: np.zeros((x.shape[0], n)),
            h=lambda t, x, y, z: np.zeros((x.shape[0], J)),
            lipschitz=Lipschitz(0.0, 0.0, 0.0),
            n=n,
            J=J,
            state_dependent=False,
        )

    def depends_on_state(self, x: np.ndarray, horizon: float = 1.0) -> bool:
        if self.state_dependent is not None:
            return self.state_dependent
        for t, y0, z0, y1, z1 in _probe_pairs(x, self.n, horizon, limit=40):
            if (
                not np.array_equal(self.eval_f(t, x, y0, z0), self.eval_f(t, x, y1, z1))
                or not np.array_equal(self.eval_g(t, x, y0, z0), self.eval_g(t, x, y1, z1))
                or not np.array_equal(self.eval_h(t, x, y0, z0), self.eval_h(t, x, y1, z1))
            ):
                return True
        return False


def _shaped(value, shape, name) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != shape:
        try:
            arr = np.broadcast_to(arr, shape).copy()
        except ValueError:
            raise ValueError(f"coefficient {name} returned shape {np.shape(value)}, expected {shape}") from None
    return arr


@dataclass(frozen=True)
class DominatorSpec:
    """Data of the linear SPDE whose solution S' dominates the obstacle.

    ``initial`` is only used when the obstacle has no explicit barrier
    (otherwise S'(0) is the barrier at t = 0).
    """

    f: SpaceTimeFn
    g: SpaceTimeFn
    h: SpaceTimeFn
    initial: SpaceFn | None = None


@dataclass(frozen=True)
class ObstacleSpec:
    """Either an explicit barrier S(t, x), or S = S' - offset with S' simulated."""

    barrier: SpaceTimeFn | None = None
    dominator: DominatorSpec | None = None
    offset: float = 0.0

    def __post_init__(self) -> None:
        if self.barrier is None and self.dominator is None:
            raise ValueError("obstacle needs a barrier or a dominating SPDE")
        if self.offset < 0:
            raise ValueError("offset must be non-negative so that S <= S'")

    def initial_values(self, x: np.ndarray) -> np.ndarray:
        if self.barrier is not None:
            return np.asarray(self.barrier(0.0, x), dtype=float)
        return np.asarray(self.dominator.initial(x), dtype=float) - self.offset

    def dominator_initial(self, x: np.ndarray) -> np.ndarray:
        if self.barrier is not None:
            return np.asarray(self.barrier(0.0, x), dtype=float)
        return np.asarray(self.dominator.initial(x), dtype=float)


@dataclass(frozen=True)
class SpdeProblem:
    domain: SpatialDomain
    sigma: SigmaField
    coeffs: CoefficientSet
    initial: SpaceFn
    obstacle: ObstacleSpec | None = None
    horizon: float = 1.0
    viscosity: float = 0.0

    def __post_init__(self) -> None:
        if not self.horizon > 0:
            raise ValueError("horizon T must be positive")
        if self.viscosity < 0:
            raise ValueError("viscosity must be non-negative")
        if self.sigma.dim != self.domain.dim:
            raise ValueError("sigma dimension does not match the domain")
        if self.sigma.columns != self.coeffs.n:
            raise ValueError("g must have one component per column of sigma")

    def initial_values(self) -> np.ndarray:
        """xi at interior nodes."""
        x = self.domain.nodes()
        return _shaped(self.initial(x), (x.shape[0],), "initial")


# --------------------------------------------------------------------------- #
# contraction gate
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ContractionReport:
    satisfied: bool
    epsilon: float | None = None
    gamma: float | None = None
    delta: float | None = None
    ratio: float | None = None


def check_contraction(lip: Lipschitz | tuple[float, float, float]) -> ContractionReport:
    """Decide ``2*alpha + beta**2 < 1`` and pick (epsilon, gamma, delta).

    epsilon is half of the largest feasible value in (0, 1], located by
    bisection; gamma and delta then follow from the balance equation of the
    weighted-norm contraction argument.
    """
    if not isinstance(lip, Lipschitz):
        lip = Lipschitz(*lip)
    C, a, b = lip.C, lip.alpha, lip.beta
    if not 2 * a + b * b < 1:
        return ContractionReport(False)

    def feasible(eps: float) -> bool:
        return C * eps + a + b * b * (1 + eps) < 1 - a - C * eps

    if feasible(1.0):
        edge = 1.0
    else:
        lo, hi = 0.0, 1.0
        # relative stop so a feasible edge far below 1 still comes out positive
        while lo == 0.0 or hi - lo > 1e-15 * hi:
            mid = 0.5 * (lo + hi)
            if feasible(mid):
                lo = mid
            else:
                hi = mid
        edge = lo
    eps = 0.5 * edge
    top = C * eps + a + b * b * (1 + eps)
    bottom = 1 - a - C * eps
    delta = 0.0 if C == 0 else C * (C + eps + (C + 1) / eps) / top
    gamma = 1.0 / eps + delta * bottom
    return ContractionReport(True, eps, gamma, delta, top / bottom)


# --------------------------------------------------------------------------- #
# validation
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Violation:
    assumption: str
    message: str


def _probe_pairs(x: np.ndarray, n: int, horizon: float, limit: int | None = None):
    """Deterministic lattice of (t, y, z, y', z') probe pairs, broadcast over x."""
    P = x.shape[0]
    ys = (-2.0, -0.5, 0.0, 1.0, 3.0)
    zs = list(itertools.product((-1.5, 0.0, 2.0), repeat=n)) if n <= 3 else [(0.0,) * n, (1.0,) * n, (-1.0,) * n]
    lattice = [(y, z) for y in ys for z in zs]
    count = 0
    for t in (0.0, 0.5 * horizon, horizon):
        for (y0, z0), (y1, z1) in itertools.combinations(lattice, 2):
            yield (
                t,
                np.full(P, y0),
                np.tile(np.asarray(z0, dtype=float), (P, 1)),
                np.full(P, y1),
                np.tile(np.asarray(z1, dtype=float), (P, 1)),
            )
            count += 1
            if limit is not None and count >= limit:
                return


def _probe_nodes(domain: SpatialDomain, count: int = 5) -> np.ndarray:
    nodes = domain.nodes()
    idx = np.unique(np.linspace(0, nodes.shape[0] - 1, count).round().astype(int))
    return nodes[idx]


def _lipschitz_violations(coeffs: CoefficientSet, x: np.ndarray, horizon: float) -> list[Violation]:
    C, a, b = coeffs.lipschitz.C, coeffs.lipschitz.alpha, coeffs.lipschitz.beta
    worst = {"H1": 0.0, "H2": 0.0, "H3": 0.0}
    for t, y0, z0, y1, z1 in _probe_pairs(x, coeffs.n, horizon):
        dy = np.abs(y0 - y1)
        dz = np.linalg.norm(z0 - z1, axis=1)
        checks = {
            "H1": (np.abs(coeffs.eval_f(t, x, y0, z0) - coeffs.eval_f(t, x, y1, z1)), C * (dy + dz)),
            "H2": (np.linalg.norm(coeffs.eval_g(t, x, y0, z0) - coeffs.eval_g(t, x, y1, z1), axis=1), C * dy + a * dz),
            "H3": (np.linalg.norm(coeffs.eval_h(t, x, y0, z0) - coeffs.eval_h(t, x, y1, z1), axis=1), C * dy + b * dz),
        }
        for key, (diff, bound) in checks.items():
            excess = diff - bound * (1 + 1e-9) - 1e-12
            worst[key] = max(worst[key], float(np.max(excess)))
    names = {"H1": "f", "H2": "g", "H3": "h"}
    return [
        Violation(key, f"Lipschitz bound for {names[key]} exceeded on probe lattice by {excess:.3g}")
        for key, excess in worst.items()
        if excess > 0
    ]


def validate_problem(problem: SpdeProblem) -> list[Violation]:
    """Check the structural assumptions on the grid and a probe lattice.

    Violations are returned as data; an empty list means every check passed.
    """
    out: list[Violation] = []
    dom = problem.domain
    full = dom.full_nodes()
    bmask = dom.boundary_mask()
    interior = dom.nodes()

    xi_full = np.asarray(problem.initial(full), dtype=float)
    if not np.all(np.isfinite(xi_full)):
        out.append(Violation("I", "initial datum has non-finite values"))
    elif np.any(np.abs(xi_full[bmask]) > 1e-12):
        out.append(Violation("I", "initial datum does not vanish on the boundary"))

    a = problem.sigma.diffusion(full)
    if not np.all(np.isfinite(a)):
        out.append(Violation("sigma", "sigma has non-finite values"))
    else:
        eig = np.linalg.eigvalsh(a)
        scale = max(1.0, float(np.max(np.abs(eig))))
        if np.min(eig) < -1e-12 * scale:
            out.append(Violation("sigma", "a = sigma sigma^T is not positive semidefinite"))
        bound = problem.sigma.bound
        if bound is not None and np.max(eig) > bound * (1 + 1e-12) + 1e-14:
            out.append(Violation("sigma", f"largest eigenvalue of a is {np.max(eig):.6g} > lambda_0 = {bound}"))

    x = _probe_nodes(dom)
    out.extend(_lipschitz_violations(problem.coeffs, x, problem.horizon))
    lip = problem.coeffs.lipschitz
    if not check_contraction(lip).satisfied:
        out.append(Violation("H4", f"contraction property fails: 2*alpha + beta^2 = {2 * lip.alpha + lip.beta ** 2:.6g} >= 1"))

    c = problem.coeffs
    P = interior.shape[0]
    zeros_y, zeros_z = np.zeros(P), np.zeros((P, c.n))
    for t in (0.0, problem.horizon):
        vals = (c.eval_f(t, interior, zeros_y, zeros_z), c.eval_g(t, interior, zeros_y, zeros_z), c.eval_h(t, interior, zeros_y, zeros_z))
        if not all(np.all(np.isfinite(v)) for v in vals):
            out.append(Violation("I", f"f(.,0,0), g(.,0,0) or h(.,0,0) non-finite at t={t}"))
            break

    obs = problem.obstacle
    if obs is not None:
        s0 = obs.initial_values(interior)
        if not np.all(np.isfinite(s0)):
            out.append(Violation("O", "obstacle has non-finite values at t = 0"))
        elif np.any(s0 > problem.initial_values() + 1e-12):
            out.append(Violation("O", "S0 <= xi violated"))
        if obs.barrier is not None:
            for t in np.linspace(0.0, problem.horizon, 5):
                if not np.all(np.isfinite(np.asarray(obs.barrier(float(t), interior), dtype=float))):
                    out.append(Violation("O", f"barrier non-finite at t={t:g}"))
                    break
    return out


def contraction_ratio(report: ContractionReport) -> float:
    """Theoretical Picard contraction factor in the weighted norm."""
    if not report.satisfied:
        return math.inf
    return report.ratio
