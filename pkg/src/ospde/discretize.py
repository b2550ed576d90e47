"""Finite-difference operators on box grids.

Grid functions live on interior nodes (C order); boundary nodes carry zero.
Inner products are quadrature-weighted: ``<u, v> = h_1 ... h_d * sum(u * v)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.fft
import scipy.sparse as sp

from .model import SigmaField, SpatialDomain, SpdeProblem


class NonPsdDiffusion(ValueError):
    """a(x) has a negative eigenvalue at some node."""


@dataclass(frozen=True)
class Grid:
    domain: SpatialDomain

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return self.domain.resolution

    @property
    def full_shape(self) -> tuple[int, ...]:
        return tuple(n + 2 for n in self.shape)

    @property
    def spacing(self) -> tuple[float, ...]:
        return self.domain.spacing

    @property
    def cell_volume(self) -> float:
        return self.domain.cell_volume

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def nodes(self) -> np.ndarray:
        return self.domain.nodes()

    @cached_property
    def full_nodes(self) -> np.ndarray:
        return self.domain.full_nodes()

    @cached_property
    def boundary_index(self) -> np.ndarray:
        return np.flatnonzero(self.domain.boundary_mask())

    @cached_property
    def interior_index(self) -> np.ndarray:
        return np.flatnonzero(~self.domain.boundary_mask())

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        return float(self.cell_volume * np.dot(np.ravel(u), np.ravel(v)))

    def norm2(self, u: np.ndarray) -> float:
        return self.inner(u, u)

    def embed(self, u: np.ndarray) -> np.ndarray:
        """Interior values -> full grid array (boundary zero)."""
        full = np.zeros(int(np.prod(self.full_shape)))
        full[self.interior_index] = np.ravel(u)
        return full.reshape(self.full_shape)


@dataclass(frozen=True)
class Field:
    values: np.ndarray
    t: float = 0.0

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"field at t={self.t} has non-finite entries")


KINDS = ("divergence_form", "first_order", "mass", "fractional", "divergence_sigma")


@dataclass(frozen=True)
class DiscreteOperator:
    matrix: sp.csr_matrix
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        object.__setattr__(self, "matrix", sp.csr_matrix(self.matrix))

    def __matmul__(self, u: np.ndarray) -> np.ndarray:
        return self.matrix @ u

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def to_triplets(self) -> str:
        """Text dump: a header line then one ``row col value`` line per nonzero."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        lines = [f"# kind={self.kind} rows={coo.shape[0]} cols={coo.shape[1]} nnz={coo.nnz}"]
        lines += [f"{coo.row[i]} {coo.col[i]} {coo.data[i]:.17g}" for i in order]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_triplets())

    @classmethod
    def from_triplets(cls, text: str) -> "DiscreteOperator":
        lines = text.strip().splitlines()
        head = dict(item.split("=") for item in lines[0].lstrip("# ").split())
        rows, cols, vals = [], [], []
        for line in lines[1:]:
            i, j, v = line.split()
            rows.append(int(i))
            cols.append(int(j))
            vals.append(float(v))
        shape = (int(head["rows"]), int(head["cols"]))
        return cls(sp.csr_matrix((vals, (rows, cols)), shape=shape), head["kind"])


# --------------------------------------------------------------------------- #
# 1D building blocks on the full grid (n + 2 nodes)
# --------------------------------------------------------------------------- #


def _forward(n_full: int, h: float) -> sp.csr_matrix:
    """Edge differences, shape (n_full - 1, n_full)."""
    return sp.diags([-np.ones(n_full - 1), np.ones(n_full - 1)], [0, 1], shape=(n_full - 1, n_full)) / h


def _average(n_full: int) -> sp.csr_matrix:
    return sp.diags([np.full(n_full - 1, 0.5), np.full(n_full - 1, 0.5)], [0, 1], shape=(n_full - 1, n_full))


def _check_psd(a: np.ndarray) -> None:
    eig = np.linalg.eigvalsh(a)
    scale = max(1.0, float(np.max(np.abs(eig))))
    bad = np.flatnonzero(eig.min(axis=1) < -1e-12 * scale)
    if bad.size:
        raise NonPsdDiffusion(f"a(x) not positive semidefinite at {bad.size} node(s), first full-grid index {bad[0]}")


def _restrict(full: sp.spmatrix, grid: Grid) -> sp.csr_matrix:
    idx = grid.interior_index
    return sp.csr_matrix(full.tocsr()[idx][:, idx])


def divergence_full(sigma: SigmaField, grid: Grid, eps_visc: float = 0.0) -> sp.csr_matrix:
    """The flux-form operator on every node, boundary included.

    Rows at interior nodes give the stencil applied to a function with
    arbitrary boundary values; used for consistency checks.
    """
    if eps_visc < 0:
        raise ValueError("eps_visc must be non-negative")
    a = sigma.diffusion(grid.full_nodes)
    _check_psd(a)
    if grid.dim == 1:
        (n,), (h,) = grid.full_shape, grid.spacing
        a11 = a[:, 0, 0]
        face = 0.5 * (a11[:-1] + a11[1:]) + eps_visc
        D = _forward(n, h)
        full = -(D.T @ sp.diags(face) @ D)
    else:
        (nx, ny), (hx, hy) = grid.full_shape, grid.spacing
        a = a.reshape(nx, ny, 2, 2)
        cell = 0.25 * (a[:-1, :-1] + a[1:, :-1] + a[:-1, 1:] + a[1:, 1:])
        a11 = _edge_mean(cell[..., 0, 0], axis=1) + eps_visc  # x-edges (nx-1, ny)
        a22 = _edge_mean(cell[..., 1, 1], axis=0) + eps_visc  # y-edges (nx, ny-1)
        a12 = cell[..., 0, 1]
        Dx = sp.kron(_forward(nx, hx), sp.identity(ny))
        Dy = sp.kron(sp.identity(nx), _forward(ny, hy))
        Gx = sp.kron(_forward(nx, hx), _average(ny))
        Gy = sp.kron(_average(nx), _forward(ny, hy))
        cross = Gx.T @ sp.diags(a12.ravel()) @ Gy
        full = -(Dx.T @ sp.diags(a11.ravel()) @ Dx + Dy.T @ sp.diags(a22.ravel()) @ Dy + cross + cross.T)
    return sp.csr_matrix(full)


def assemble_divergence(sigma: SigmaField, grid: Grid, eps_visc: float = 0.0) -> DiscreteOperator:
    """Flux-form stencil for div((a + eps_visc I) grad .) with zero Dirichlet data.

    The discrete energy is a sum of squared edge differences weighted by
    face-averaged a_ii plus a cell-centred cross term, which makes the matrix
    symmetric and negative semidefinite whenever a is semidefinite.
    """
    L = _restrict(divergence_full(sigma, grid, eps_visc), grid)
    L = sp.csr_matrix(0.5 * (L + L.T))
    L.eliminate_zeros()
    return DiscreteOperator(L, "divergence_form")


def _edge_mean(cell: np.ndarray, axis: int) -> np.ndarray:
    """Average of the (one or two) cells adjacent to each edge normal to ``axis``'s partner."""
    pad = [(0, 0), (0, 0)]
    pad[axis] = (1, 1)
    padded = np.pad(cell, pad, constant_values=np.nan)
    lo = np.take(padded, np.arange(padded.shape[axis] - 1), axis=axis)
    hi = np.take(padded, np.arange(1, padded.shape[axis]), axis=axis)
    return np.nanmean(np.stack([lo, hi]), axis=0)


def _central(n: int, h: float) -> sp.csr_matrix:
    """Centred difference on interior nodes, zero boundary values folded in."""
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [-1, 1], shape=(n, n)) / (2 * h)


def partial_derivatives(grid: Grid) -> list[sp.csr_matrix]:
    if grid.dim == 1:
        return [sp.csr_matrix(_central(grid.shape[0], grid.spacing[0]))]
    (nx, ny), (hx, hy) = grid.shape, grid.spacing
    return [
        sp.csr_matrix(sp.kron(_central(nx, hx), sp.identity(ny))),
        sp.csr_matrix(sp.kron(sp.identity(nx), _central(ny, hy))),
    ]


def assemble_first_order(sigma: SigmaField, k: int, grid: Grid) -> DiscreteOperator:
    """Centred-difference L_k = sum_i sigma_ik d_i."""
    if not 0 <= k < sigma.columns:
        raise IndexError(f"sigma has {sigma.columns} columns, asked for {k}")
    s = sigma.values(grid.nodes)[:, :, k]
    parts = partial_derivatives(grid)
    M = sum(sp.diags(s[:, i]) @ parts[i] for i in range(grid.dim))
    return DiscreteOperator(sp.csr_matrix(M), "first_order")


def mass_matrix(grid: Grid) -> DiscreteOperator:
    return DiscreteOperator(sp.identity(grid.size, format="csr") * grid.cell_volume, "mass")


# --------------------------------------------------------------------------- #
# spectral norms
# --------------------------------------------------------------------------- #


def sine_coefficients(values: np.ndarray, grid: Grid) -> np.ndarray:
    """Coefficients against the L2-orthonormal Dirichlet sine basis of the box."""
    v = np.asarray(values, dtype=float).reshape(grid.shape)
    scale = np.prod([h * np.sqrt(2.0 / L) / 2.0 for h, L in zip(grid.spacing, grid.domain.lengths)])
    return scipy.fft.dstn(v, type=1) * scale


def sine_wavenumbers(grid: Grid) -> np.ndarray:
    """|k|^2 on the coefficient array, in physical units (k pi / L)."""
    axes = [np.arange(1, n + 1) * np.pi / L for n, L in zip(grid.shape, grid.domain.lengths)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return sum(m ** 2 for m in mesh)


def fractional_norm(field: Field | np.ndarray, eta: float, grid: Grid) -> float:
    """Squared H^eta norm: sum (1 + |k|^2)^eta |v_k|^2 over sine coefficients."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    values = field.values if isinstance(field, Field) else field
    coef = sine_coefficients(values, grid)
    return float(np.sum((1.0 + sine_wavenumbers(grid)) ** eta * coef ** 2))


# --------------------------------------------------------------------------- #
# bundle used by the solver
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Discretization:
    grid: Grid
    laplacian: DiscreteOperator
    first_order: tuple[DiscreteOperator, ...]

    @cached_property
    def _stacked(self) -> sp.csr_matrix:
        return sp.csr_matrix(sp.vstack([op.matrix for op in self.first_order]))

    @cached_property
    def _stacked_t(self) -> sp.csr_matrix:
        return sp.csr_matrix(self._stacked.T)

    def grad(self, u: np.ndarray) -> np.ndarray:
        """sigma^T grad u at interior nodes, shape (n, P)."""
        return (self._stacked @ u).reshape(len(self.first_order), -1)

    def div_sigma(self, g: np.ndarray) -> np.ndarray:
        """div(sigma g) as the discrete adjoint of -grad; ``g`` has shape (P, n)."""
        return -(self._stacked_t @ np.asarray(g).T.ravel())

    def energy(self, u: np.ndarray, v: np.ndarray | None = None) -> float:
        """-<L u, v>; the Dirichlet form of the divergence operator."""
        v = u if v is None else v
        return -self.grid.inner(self.laplacian @ u, v)


def discretize(problem: SpdeProblem) -> Discretization:
    grid = Grid(problem.domain)
    L = assemble_divergence(problem.sigma, grid, problem.viscosity)
    Lk = tuple(assemble_first_order(problem.sigma, k, grid) for k in range(problem.sigma.columns))
    return Discretization(grid, L, Lk)
