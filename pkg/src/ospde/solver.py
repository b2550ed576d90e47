"""Penalised semi-implicit stepping, the deterministic obstacle oracle and Picard iteration."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import trapezoid

from .discretize import DiscreteOperator, Discretization, Grid, discretize
from .model import SpdeProblem, check_contraction


class SolverError(RuntimeError):
    pass


class PicardDiverged(SolverError):
    def __init__(self, message: str, history: Sequence["PicardState"]):
        super().__init__(message)
        self.history = list(history)


@dataclass(frozen=True)
class TimeMesh:
    horizon: float
    steps: int

    def __post_init__(self) -> None:
        if not self.horizon > 0 or self.steps < 1:
            raise ValueError("time mesh needs T > 0 and at least one step")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)

    def refined(self) -> "TimeMesh":
        return TimeMesh(self.horizon, 2 * self.steps)


@dataclass(frozen=True)
class NoisePath:
    """Brownian increments, shape (steps, J), from a seeded PCG64 stream."""

    seed: int
    increments: np.ndarray

    @classmethod
    def generate(cls, seed: int, mesh: TimeMesh, channels: int) -> "NoisePath":
        rng = np.random.Generator(np.random.PCG64(int(seed)))
        dB = rng.standard_normal((mesh.steps, channels)) * np.sqrt(mesh.dt)
        return cls(int(seed), dB)

    @classmethod
    def zero(cls, mesh: TimeMesh, channels: int) -> "NoisePath":
        return cls(0, np.zeros((mesh.steps, channels)))

    def coarsened(self) -> "NoisePath":
        """Pairwise sums: the same Brownian path on a mesh with half the steps."""
        inc = self.increments
        return NoisePath(self.seed, inc[0::2] + inc[1::2])


def path_seed(base_seed: int, index: int) -> int:
    return int(base_seed) + int(index)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (M+1, P)
    grads: np.ndarray  # (M+1, n, P)
    reflection: np.ndarray  # (M, P), mass per node per step
    cell_volume: float
    penalty: float = 0.0
    obstacle: np.ndarray | None = None  # (M+1, P)
    dominator: np.ndarray | None = None  # (M+1, P)

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def norms2(self) -> np.ndarray:
        return self.cell_volume * np.sum(self.states ** 2, axis=1)

    def grad_norms2(self) -> np.ndarray:
        return self.cell_volume * np.sum(self.grads ** 2, axis=(1, 2))

    def minus(self) -> np.ndarray:
        """(u - S)^- per time and node; zero without an obstacle."""
        if self.obstacle is None:
            return np.zeros_like(self.states)
        return np.maximum(self.obstacle - self.states, 0.0)

    def penalty_residual(self) -> float:
        """||(u - S)^-|| in L2 over (0, T] x O."""
        m = self.minus()[1:]
        return float(np.sqrt(self.cell_volume * np.sum(self.dt[:, None] * m ** 2)))

    def energy(self) -> float:
        """sup_t ||u||^2 + sum dt ||sigma^T grad u||^2 + sum dt n ||(u - S)^-||^2."""
        dt = self.dt
        m = self.minus()[1:]
        return float(
            np.max(self.norms2())
            + np.sum(dt * self.grad_norms2()[1:])
            + self.penalty * self.cell_volume * np.sum(dt[:, None] * m ** 2)
        )

    def reflection_mass(self) -> float:
        return float(np.sum(self.reflection))

    def difference(self, other: "Trajectory") -> "Trajectory":
        return Trajectory(
            self.times,
            self.states - other.states,
            self.grads - other.grads,
            self.reflection - other.reflection,
            self.cell_volume,
        )


def weighted_norm(traj: Trajectory, gamma: float, delta: float) -> float:
    """int_0^T exp(-gamma s) (delta ||u_s||^2 + ||sigma^T grad u_s||^2) ds, trapezoid rule."""
    if gamma < 0 or delta < 0:
        raise ValueError("gamma and delta must be non-negative")
    integrand = np.exp(-gamma * traj.times) * (delta * traj.norms2() + traj.grad_norms2())
    return float(trapezoid(integrand, traj.times))


# --------------------------------------------------------------------------- #
# one step
# --------------------------------------------------------------------------- #


class Stepper:
    """Holds the factorised (I - dt L) for one (operator, dt) pair.

    Not shared between workers; each solve builds its own.
    """

    def __init__(self, disc: Discretization, dt: float):
        if not dt > 0:
            raise SolverError(f"time step must be positive, got {dt}")
        self.disc = disc
        self.dt = dt
        A = sp.identity(disc.grid.size, format="csc") - dt * disc.laplacian.matrix.tocsc()
        try:
            self._lu = spla.splu(A.tocsc())
        except RuntimeError as exc:  # pragma: no cover - singular only for dt <= 0
            raise SolverError(f"factorisation of I - dt L failed: {exc}") from exc

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        out = self._lu.solve(rhs)
        if not np.all(np.isfinite(out)):
            bad = np.flatnonzero(~np.isfinite(out))
            raise SolverError(f"non-finite values after linear solve at nodes {bad[:5].tolist()}")
        return out


def penalty_projection(w: np.ndarray, obstacle: np.ndarray | None, kappa: float) -> np.ndarray:
    """Pointwise solution of u = w + kappa (u - S)^-."""
    if obstacle is None or kappa == 0:
        return w
    return np.maximum(w, (w + kappa * obstacle) / (1.0 + kappa))


def step_penalized(
    u: np.ndarray,
    t: float,
    problem: SpdeProblem,
    stepper: Stepper,
    n: float,
    dB: np.ndarray,
    obstacle_next: np.ndarray | None = None,
    frozen: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Advance one step; returns (u_next, reflection mass per node).

    ``frozen`` = (y, z) with y shape (P,) and z shape (P, n) replaces the
    current state in the coefficients.
    """
    if n < 0:
        raise ValueError("penalty n must be non-negative")
    disc, dt = stepper.disc, stepper.dt
    x = disc.grid.nodes
    if frozen is None:
        y, z = u, disc.grad(u).T
    else:
        y, z = frozen
    c = problem.coeffs
    rhs = u + dt * (c.eval_f(t, x, y, z) + disc.div_sigma(c.eval_g(t, x, y, z))) + c.eval_h(t, x, y, z) @ dB
    w = stepper.solve(rhs)
    u_next = penalty_projection(w, obstacle_next, dt * n)
    return u_next, (u_next - w) * disc.grid.cell_volume


# --------------------------------------------------------------------------- #
# trajectories
# --------------------------------------------------------------------------- #


def obstacle_path(problem: SpdeProblem, path: NoisePath, mesh: TimeMesh, disc: Discretization, stepper: Stepper | None = None):
    """(S, S') on the time mesh; S' is None when the barrier is explicit."""
    obs = problem.obstacle
    if obs is None:
        return None, None
    x = disc.grid.nodes
    if obs.barrier is not None:
        S = np.stack([np.broadcast_to(np.asarray(obs.barrier(float(t), x), dtype=float), (x.shape[0],)) for t in mesh.times])
        return S, None
    dom = simulate_dominator(problem, path, mesh, disc, stepper)
    return dom - obs.offset, dom


def simulate_dominator(problem: SpdeProblem, path: NoisePath, mesh: TimeMesh, disc: Discretization | None = None, stepper: Stepper | None = None) -> np.ndarray:
    """The linear SPDE S' driven by the same noise, shape (M+1, P)."""
    obs = problem.obstacle
    if obs is None or obs.dominator is None:
        raise ValueError("problem has no dominating SPDE")
    disc = disc or discretize(problem)
    stepper = stepper or Stepper(disc, mesh.dt)
    dom = obs.dominator
    x = disc.grid.nodes
    P = x.shape[0]
    out = np.empty((mesh.steps + 1, P))
    out[0] = np.broadcast_to(obs.dominator_initial(x), (P,))
    for k, t in enumerate(mesh.times[:-1]):
        s = out[k]
        g = np.broadcast_to(np.asarray(dom.g(t, x), dtype=float), (P, problem.coeffs.n))
        h = np.broadcast_to(np.asarray(dom.h(t, x), dtype=float), (P, problem.coeffs.J))
        f = np.broadcast_to(np.asarray(dom.f(t, x), dtype=float), (P,))
        out[k + 1] = stepper.solve(s + mesh.dt * (f + disc.div_sigma(g)) + h @ path.increments[k])
    return out


def simulate(
    problem: SpdeProblem,
    n: float,
    path: NoisePath,
    mesh: TimeMesh,
    disc: Discretization | None = None,
    frozen: tuple[np.ndarray, np.ndarray] | None = None,
    stepper: Stepper | None = None,
    obstacle: tuple[np.ndarray | None, np.ndarray | None] | None = None,
) -> Trajectory:
    """Penalised trajectory; coefficients explicit in the start-of-step state.

    ``frozen`` = (Y, Z) with Y shape (M+1, P), Z shape (M+1, n, P) freezes the
    coefficient arguments along a previous iterate.
    """
    if path.increments.shape != (mesh.steps, problem.coeffs.J):
        raise ValueError(f"noise path has shape {path.increments.shape}, expected {(mesh.steps, problem.coeffs.J)}")
    disc = disc or discretize(problem)
    stepper = stepper or Stepper(disc, mesh.dt)
    S, dom = obstacle if obstacle is not None else obstacle_path(problem, path, mesh, disc, stepper)
    times = mesh.times
    P = disc.grid.size
    states = np.empty((mesh.steps + 1, P))
    reflection = np.zeros((mesh.steps, P))
    states[0] = problem.initial_values()
    for k in range(mesh.steps):
        fz = None if frozen is None else (frozen[0][k], frozen[1][k].T)
        states[k + 1], reflection[k] = step_penalized(
            states[k], times[k], problem, stepper, n, path.increments[k], None if S is None else S[k + 1], fz
        )
    grads = np.stack([disc.grad(s) for s in states])
    return Trajectory(times, states, grads, reflection, disc.grid.cell_volume, float(n), S, dom)


def solve_linear_obstacle(problem: SpdeProblem, n: float, path: NoisePath, mesh: TimeMesh, disc: Discretization | None = None) -> Trajectory:
    """Penalised solve for coefficients that do not depend on (u, sigma^T grad u)."""
    disc = disc or discretize(problem)
    if problem.coeffs.depends_on_state(disc.grid.nodes, problem.horizon):
        raise ValueError("coefficients depend on (y, z); use picard_solve")
    return simulate(problem, n, path, mesh, disc)


# --------------------------------------------------------------------------- #
# deterministic obstacle problem
# --------------------------------------------------------------------------- #


def _as_time_array(value, mesh: TimeMesh, P: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 2:
        if arr.shape != (mesh.steps + 1, P):
            raise ValueError(f"time-dependent data must have shape {(mesh.steps + 1, P)}")
        return arr
    return np.broadcast_to(arr, (mesh.steps + 1, P))


def solve_deterministic_obstacle(
    psi, u0: np.ndarray, forcing, epsilon: float, mesh: TimeMesh, laplacian: DiscreteOperator
) -> np.ndarray:
    """Penalised du/dt = L u + forcing + (u - psi)^- / epsilon; states (M+1, P).

    ``psi`` and ``forcing`` are scalars, (P,) arrays or (M+1, P) arrays.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    P = laplacian.shape[0]
    psi_t = _as_time_array(psi, mesh, P)
    f_t = _as_time_array(0.0 if forcing is None else forcing, mesh, P)
    A = (sp.identity(P, format="csc") - mesh.dt * laplacian.matrix).tocsc()
    lu = spla.splu(A)
    out = np.empty((mesh.steps + 1, P))
    out[0] = u0
    kappa = mesh.dt / epsilon
    for k in range(mesh.steps):
        w = lu.solve(out[k] + mesh.dt * f_t[k])
        out[k + 1] = penalty_projection(w, psi_t[k + 1], kappa)
    return out


def psor(A: sp.csr_matrix, b: np.ndarray, lower: np.ndarray, x0: np.ndarray, omega: float = 1.5, tol: float = 1e-12, max_sweeps: int = 100000) -> np.ndarray:
    """Projected SOR for the complementarity problem A x >= b, x >= lower."""
    A = sp.csr_matrix(A)
    indptr, indices, data = A.indptr, A.indices, A.data
    diag = A.diagonal()
    x = np.maximum(np.array(x0, dtype=float), lower)
    n = x.size
    for _ in range(max_sweeps):
        change = 0.0
        for i in range(n):
            lo, hi = indptr[i], indptr[i + 1]
            r = b[i] - np.dot(data[lo:hi], x[indices[lo:hi]])
            new = max(lower[i], x[i] + omega * r / diag[i])
            change = max(change, abs(new - x[i]))
            x[i] = new
        if change < tol:
            return x
    raise SolverError(f"PSOR did not converge in {max_sweeps} sweeps")


def psor_obstacle(psi, u0: np.ndarray, forcing, mesh: TimeMesh, laplacian: DiscreteOperator, omega: float = 1.5, tol: float = 1e-12) -> np.ndarray:
    """Implicit-Euler variational inequality solved by PSOR at each step."""
    P = laplacian.shape[0]
    psi_t = _as_time_array(psi, mesh, P)
    f_t = _as_time_array(0.0 if forcing is None else forcing, mesh, P)
    A = sp.csr_matrix(sp.identity(P) - mesh.dt * laplacian.matrix)
    out = np.empty((mesh.steps + 1, P))
    out[0] = u0
    for k in range(mesh.steps):
        out[k + 1] = psor(A, out[k] + mesh.dt * f_t[k], psi_t[k + 1], out[k], omega, tol)
    return out


# --------------------------------------------------------------------------- #
# Picard iteration
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class PicardState:
    m: int
    trajectory: Trajectory
    distance: float | None  # weighted distance to iterate m - 1
    gamma: float
    delta: float
    epsilon: float

    @property
    def converged_trajectory(self) -> Trajectory:
        return self.trajectory


def ratio_history(history: Sequence[PicardState]) -> list[float]:
    d = [s.distance for s in history if s.distance is not None]
    return [b / a for a, b in zip(d[:-1], d[1:]) if a > 0]


def picard_solve(
    problem: SpdeProblem,
    n: float,
    path: NoisePath,
    mesh: TimeMesh,
    tol: float = 1e-8,
    max_iter: int = 30,
    disc: Discretization | None = None,
) -> tuple[Trajectory, list[PicardState]]:
    """Iterate u^{m+1} = linear solve with coefficients frozen at (u^m, sigma^T grad u^m).

    u^0 is xi held constant in time.  Stops at the first m with
    ||u^{m+1} - u^m||_{gamma,delta} < tol.
    """
    report = check_contraction(problem.coeffs.lipschitz)
    if not report.satisfied:
        raise ValueError("contraction property 2*alpha + beta^2 < 1 fails")
    disc = disc or discretize(problem)
    stepper = Stepper(disc, mesh.dt)
    obstacle = obstacle_path(problem, path, mesh, disc, stepper)
    xi = problem.initial_values()
    M = mesh.steps
    zero_traj = Trajectory(
        mesh.times,
        np.broadcast_to(xi, (M + 1, xi.size)).copy(),
        np.broadcast_to(disc.grad(xi), (M + 1, problem.coeffs.n, xi.size)).copy(),
        np.zeros((M, xi.size)),
        disc.grid.cell_volume,
    )
    gamma, delta, eps = report.gamma, report.delta, report.epsilon
    history = [PicardState(0, zero_traj, None, gamma, delta, eps)]
    current = zero_traj
    for m in range(1, max_iter + 1):
        nxt = simulate(problem, n, path, mesh, disc, (current.states, current.grads), stepper, obstacle)
        dist = weighted_norm(nxt.difference(current), gamma, delta)
        history.append(PicardState(m, nxt, dist, gamma, delta, eps))
        if dist < tol:
            return nxt, history
        current = nxt
    raise PicardDiverged(
        f"Picard iteration did not reach tol={tol} in {max_iter} iterations; ratios {ratio_history(history)}",
        history,
    )


# --------------------------------------------------------------------------- #
# export
# --------------------------------------------------------------------------- #


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def trajectory_csv(traj: Trajectory, grid: Grid, every: int = 1) -> str:
    """Per-time-slice table: t, node coordinates, u, sigma^T grad u, reflection."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    d = grid.dim
    ncols = traj.grads.shape[1]
    writer.writerow(["step", "t"] + [f"x{i + 1}" for i in range(d)] + ["u"] + [f"grad{k + 1}" for k in range(ncols)] + ["reflection"])
    x = grid.nodes
    for k in range(0, traj.states.shape[0], every):
        refl = traj.reflection[k - 1] if k > 0 else np.zeros(grid.size)
        for p in range(grid.size):
            row = [str(k), _fmt(traj.times[k])] + [_fmt(c) for c in x[p]] + [_fmt(traj.states[k, p])]
            row += [_fmt(traj.grads[k, j, p]) for j in range(ncols)] + [_fmt(refl[p])]
            writer.writerow(row)
    return buf.getvalue()


def write_manifest(path: str | Path, **entries) -> None:
    Path(path).write_text(json.dumps(entries, sort_keys=True, indent=2) + "\n")
