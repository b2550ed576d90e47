"""Monte Carlo layer: energy identities, comparison, De Giorgi levels, tails, mode blow-up."""
from __future__ import annotations

import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .discretize import Discretization, discretize, fractional_norm
from .model import SpdeProblem, _probe_nodes, _probe_pairs
from .solver import NoisePath, TimeMesh, Trajectory, path_seed, simulate


# --------------------------------------------------------------------------- #
# parallel map with ordered results
# --------------------------------------------------------------------------- #

_INSTALLED: Callable | None = None


def _install(func: Callable) -> None:
    global _INSTALLED
    _INSTALLED = func


def _call_installed(item):
    return _INSTALLED(item)


def parallel_map(func: Callable, items: Sequence, workers: int = 1) -> list:
    """``[func(i) for i in items]``, optionally over forked worker processes.

    ``func`` itself is never pickled (it is installed in each worker at fork
    time), so closures over problem data are fine; items and results are.
    Output order follows ``items`` regardless of scheduling.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(i) for i in items]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_install, initargs=(func,)) as pool:
        return list(pool.map(_call_installed, items, chunksize=max(1, len(items) // (4 * workers))))


def bootstrap_se(samples: np.ndarray, statistic: Callable[[np.ndarray], float] = np.mean, resamples: int = 200, seed: int = 0) -> float:
    samples = np.asarray(samples, dtype=float)
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = rng.integers(0, samples.size, size=(resamples, samples.size))
    stats = np.array([statistic(samples[i]) for i in idx])
    return float(np.std(stats, ddof=1))


# --------------------------------------------------------------------------- #
# discrete Ito identity
# --------------------------------------------------------------------------- #


def _phi(tag: str, R: float):
    if tag == "square":
        return (lambda u: u * u), (lambda u: 2 * u), (lambda u: np.full_like(u, 2.0))
    if tag == "smooth_capped":
        # 2 R^2 log cosh(u / R): quadratic near 0, linear growth, phi'' <= 2
        def phi(u):
            s = np.abs(u) / R
            return 2 * R * R * (s + np.log1p(np.exp(-2 * s)) - np.log(2.0))

        return phi, (lambda u: 2 * R * np.tanh(u / R)), (lambda u: 2.0 / np.cosh(u / R) ** 2)
    raise ValueError(f"unsupported test function {tag!r}; use 'square' or 'smooth_capped'")


def energy_residual(
    traj: Trajectory,
    problem: SpdeProblem,
    phi: str = "square",
    disc: Discretization | None = None,
    path: NoisePath | None = None,
    R: float = 1.0,
) -> np.ndarray:
    """Cumulative LHS - RHS of the discrete Ito identity for Phi, shape (M+1,).

    Per step the balance is

        <Phi(u1)> - <Phi(u0)> + dt E(Phi'(u1), u1)
          = dt <Phi'(u0), f + div(sigma g)> + <Phi'(u0), h dB>
            + 1/2 <Phi''(u0), (h dB)^2> + sum Phi'(u1) * reflection

    with coefficients evaluated at the start of the step.  The Ito
    correction uses the realised (h dB)^2, whose mean is dt |h|^2.
    """
    f_phi, d_phi, dd_phi = _phi(phi, R)
    disc = disc or discretize(problem)
    grid = disc.grid
    x = grid.nodes
    c = problem.coeffs
    M = traj.states.shape[0] - 1
    dB = np.zeros((M, c.J)) if path is None else path.increments
    out = np.zeros(M + 1)
    vol = grid.cell_volume
    for k in range(M):
        u0, u1 = traj.states[k], traj.states[k + 1]
        dt = traj.times[k + 1] - traj.times[k]
        t = traj.times[k]
        z = disc.grad(u0).T
        drift = c.eval_f(t, x, u0, z) + disc.div_sigma(c.eval_g(t, x, u0, z))
        noise = c.eval_h(t, x, u0, z) @ dB[k]
        lhs = vol * (np.sum(f_phi(u1)) - np.sum(f_phi(u0))) + dt * disc.energy(u1, d_phi(u1))
        rhs = (
            dt * grid.inner(d_phi(u0), drift)
            + grid.inner(d_phi(u0), noise)
            + 0.5 * grid.inner(dd_phi(u0), noise ** 2)
            + float(np.dot(d_phi(u1), traj.reflection[k]))
        )
        out[k + 1] = out[k] + lhs - rhs
    return out


def skorokhod_gap(traj: Trajectory) -> dict:
    """Complementarity of the reflection with the post-step gap u - S."""
    if traj.obstacle is None:
        return {"positive_part": 0.0, "two_sided": 0.0, "mass": 0.0}
    gap = traj.states[1:] - traj.obstacle[1:]
    refl = traj.reflection
    return {
        "positive_part": float(np.sum(np.maximum(gap, 0.0) * refl)),
        "two_sided": float(np.sum(np.abs(gap) * refl)),
        "mass": float(np.sum(refl)),
    }


# --------------------------------------------------------------------------- #
# comparison
# --------------------------------------------------------------------------- #


class ComparisonPrecondition(ValueError):
    pass


@dataclass(frozen=True)
class ComparisonStats:
    paths: int
    cells: int
    violations: int
    max_excess: float

    @property
    def violation_fraction(self) -> float:
        return self.violations / self.cells if self.cells else 0.0


def _check_order(a: SpdeProblem, b: SpdeProblem, disc: Discretization, mesh: TimeMesh) -> None:
    if a.domain != b.domain or a.horizon != b.horizon:
        raise ComparisonPrecondition("problems live on different domains or horizons")
    x = disc.grid.nodes
    if np.any(a.initial_values() > b.initial_values()):
        raise ComparisonPrecondition("xi_A <= xi_B violated")
    ca, cb = a.coeffs, b.coeffs
    if (ca.n, ca.J) != (cb.n, cb.J):
        raise ComparisonPrecondition("g or h differ in shape between the problems")
    xp = _probe_nodes(a.domain)
    for t, y0, z0, _, _ in _probe_pairs(xp, ca.n, a.horizon):
        if np.any(ca.eval_f(t, xp, y0, z0) > cb.eval_f(t, xp, y0, z0)):
            raise ComparisonPrecondition("f_A <= f_B violated on the probe lattice")
        if not np.array_equal(ca.eval_g(t, xp, y0, z0), cb.eval_g(t, xp, y0, z0)):
            raise ComparisonPrecondition("g differs between the problems")
        if not np.array_equal(ca.eval_h(t, xp, y0, z0), cb.eval_h(t, xp, y0, z0)):
            raise ComparisonPrecondition("h differs between the problems")
    oa, ob = a.obstacle, b.obstacle
    if (oa is None) != (ob is None):
        raise ComparisonPrecondition("only one problem has an obstacle")
    if oa is not None and oa.barrier is not None and ob.barrier is not None:
        for t in mesh.times:
            if np.any(np.asarray(oa.barrier(float(t), x)) > np.asarray(ob.barrier(float(t), x))):
                raise ComparisonPrecondition(f"S_A <= S_B violated at t={t:g}")


def comparison_test(
    problem_a: SpdeProblem,
    problem_b: SpdeProblem,
    seeds: Iterable[int],
    mesh: TimeMesh,
    tol: float = 1e-8,
    n: float = 1000.0,
    workers: int = 1,
) -> ComparisonStats:
    """Count (t, x) cells with u_A > u_B + tol when both runs share each noise path."""
    disc_a, disc_b = discretize(problem_a), discretize(problem_b)
    _check_order(problem_a, problem_b, disc_a, mesh)
    seeds = list(seeds)
    J = problem_a.coeffs.J

    def one(seed: int):
        path = NoisePath.generate(seed, mesh, J)
        ua = simulate(problem_a, n, path, mesh, disc_a)
        ub = simulate(problem_b, n, path, mesh, disc_b)
        if ua.obstacle is not None and np.any(ua.obstacle > ub.obstacle):
            raise ComparisonPrecondition(f"S_A <= S_B violated along path seed {seed}")
        diff = ua.states - ub.states
        return int(np.count_nonzero(diff > tol)), float(np.max(diff))

    results = parallel_map(one, seeds, workers)
    cells = len(seeds) * (mesh.steps + 1) * disc_a.grid.size
    return ComparisonStats(
        len(seeds), cells, sum(r[0] for r in results), max((r[1] for r in results), default=0.0)
    )


# --------------------------------------------------------------------------- #
# De Giorgi levels
# --------------------------------------------------------------------------- #


def truncation(v: np.ndarray, lam: float, m: int) -> np.ndarray:
    """v^m = [v - lam (1 - 2^-m)]^+."""
    return np.maximum(v - lam * (1.0 - 2.0 ** (-m)), 0.0)


@dataclass(frozen=True)
class DeGiorgiFragment:
    lam: float
    eta: float
    levels: np.ndarray  # V^m, m = 0..M
    nested: bool  # v^m <= v^{m-1} everywhere
    indicator_bound: bool  # 1{v^m > 0} <= 2^m v^{m-1} / lam everywhere

    @property
    def ratios(self) -> np.ndarray:
        prev, cur = self.levels[:-1], self.levels[1:]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(prev > 0, cur / prev, 0.0)

    def nonincreasing(self) -> bool:
        return bool(np.all(np.diff(self.levels) <= 0))


def level_energy(vm: np.ndarray, times: np.ndarray, eta: float, disc: Discretization) -> float:
    """sup_t ||v_t||^2 + sum dt (sum_k ||L_k v_t||^2 + ||v_t||^2_{H^eta}) over t_1..t_M."""
    grid = disc.grid
    sup = max(grid.norm2(row) for row in vm)
    dt = np.diff(times)
    acc = 0.0
    for k in range(1, vm.shape[0]):
        row = vm[k]
        if not np.any(row):
            continue
        acc += dt[k - 1] * (grid.norm2(disc.grad(row)) + fractional_norm(row, eta, grid))
    return float(sup + acc)


def degiorgi_sequence(v: np.ndarray, lam: float, levels: int, eta: float, times: np.ndarray, disc: Discretization) -> DeGiorgiFragment:
    """V^0..V^levels for one path of v = u - S' (shape (M+1, P))."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    V = np.empty(levels + 1)
    nested = indicator = True
    prev = None
    for m in range(levels + 1):
        vm = truncation(v, lam, m)
        V[m] = level_energy(vm, times, eta, disc)
        if prev is not None:
            nested &= bool(np.all(vm <= prev))
            indicator &= bool(np.all((vm > 0) <= (2.0 ** m * prev / lam)))
        prev = vm
    return DeGiorgiFragment(float(lam), float(eta), V, nested, indicator)


def lambda_zero(v0: np.ndarray) -> float:
    """2 sup v_0."""
    return float(2.0 * max(np.max(v0), 0.0))


# --------------------------------------------------------------------------- #
# ensembles
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class PathSummary:
    seed: int
    sup_plus: float  # sup_{t,x} (u - S')^+
    energy: float
    penalty_residual: float
    levels: np.ndarray | None = None
    nested: bool = True
    indicator_bound: bool = True


@dataclass
class McEnsemble:
    runs: list[PathSummary] = field(default_factory=list)
    lambda0: float = 0.0

    def __post_init__(self) -> None:
        seeds = [r.seed for r in self.runs]
        if len(set(seeds)) != len(seeds):
            raise ValueError("ensemble seeds must be pairwise distinct")

    @property
    def count(self) -> int:
        return len(self.runs)

    @property
    def sups(self) -> np.ndarray:
        return np.array([r.sup_plus for r in self.runs])

    @property
    def energies(self) -> np.ndarray:
        return np.array([r.energy for r in self.runs])


def run_ensemble(
    problem: SpdeProblem,
    n: float,
    mesh: TimeMesh,
    base_seed: int,
    paths: int,
    lam: float | None = None,
    levels: int = 6,
    eta: float = 0.5,
    workers: int = 1,
) -> McEnsemble:
    """Simulate ``paths`` trajectories; with ``lam`` also compute V^m per path.

    v = u - S' needs a dominating SPDE on the obstacle; without one v = u.
    """
    disc = discretize(problem)

    def one(index: int) -> PathSummary:
        seed = path_seed(base_seed, index)
        path = NoisePath.generate(seed, mesh, problem.coeffs.J)
        tr = simulate(problem, n, path, mesh, disc)
        v = tr.states - tr.dominator if tr.dominator is not None else tr.states
        frag = degiorgi_sequence(v, lam, levels, eta, tr.times, disc) if lam is not None else None
        return PathSummary(
            seed,
            float(max(np.max(v), 0.0)),
            tr.energy(),
            tr.penalty_residual(),
            None if frag is None else frag.levels,
            True if frag is None else frag.nested,
            True if frag is None else frag.indicator_bound,
        )

    runs = parallel_map(one, range(paths), workers)
    return McEnsemble(runs, lambda_zero(initial_excess(problem)))


def initial_excess(problem: SpdeProblem) -> np.ndarray:
    """v_0 = xi - S'(0) at interior nodes (xi alone without a dominator)."""
    v0 = problem.initial_values()
    obs = problem.obstacle
    if obs is not None and obs.dominator is not None:
        v0 = v0 - obs.dominator_initial(problem.domain.nodes())
    return v0


# --------------------------------------------------------------------------- #
# tails and moments
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class TailReport:
    lambdas: np.ndarray
    tail: np.ndarray
    degenerate: bool
    c_prime: float | None
    intercept: float | None
    r2: float | None
    fit_points: int
    moment_direct: float
    moment_layercake: float
    moment_se: float

    @property
    def moment_gap(self) -> float:
        return abs(self.moment_direct - self.moment_layercake)


def empirical_tail(sups: np.ndarray, lambdas: np.ndarray) -> np.ndarray:
    s = np.sort(np.asarray(sups, dtype=float))
    return 1.0 - np.searchsorted(s, lambdas, side="right") / s.size


def tail_and_moments(
    sups: np.ndarray | McEnsemble,
    lambdas: np.ndarray,
    p: float,
    alpha0: float,
    lambda0: float = 0.0,
    quadrature_points: int = 4001,
    resamples: int = 200,
    seed: int = 0,
) -> TailReport:
    """Empirical tail of the sup norm, stretched-exponential fit and p-th moment two ways.

    The fit is least squares of log P(> lam) = a - C' lam^(2 alpha0) over
    lam > max(lambda0, 1) with P > 0.
    """
    if isinstance(sups, McEnsemble):
        lambda0 = max(lambda0, sups.lambda0)
        sups = sups.sups
    sups = np.asarray(sups, dtype=float)
    if sups.size < 100:
        raise ValueError(f"need at least 100 paths, got {sups.size}")
    if not p > 2:
        raise ValueError("p must exceed 2")
    lambdas = np.asarray(lambdas, dtype=float)
    tail = empirical_tail(sups, lambdas)
    direct = float(np.mean(sups ** p))
    se = bootstrap_se(sups ** p, resamples=resamples, seed=seed)
    top = float(np.max(sups))
    if top <= 0:
        return TailReport(lambdas, tail, True, None, None, None, 0, 0.0, 0.0, 0.0)
    grid = np.linspace(0.0, top, quadrature_points)
    layer = float(p * trapezoid(grid ** (p - 1) * empirical_tail(sups, grid), grid))
    mask = (lambdas > max(lambda0, 1.0)) & (tail > 0)
    c_prime = intercept = r2 = None
    if np.count_nonzero(mask) >= 3:
        X = lambdas[mask] ** (2 * alpha0)
        Y = np.log(tail[mask])
        slope, intercept = np.polyfit(X, Y, 1)
        pred = intercept + slope * X
        ss_tot = float(np.sum((Y - Y.mean()) ** 2))
        r2 = 1.0 - float(np.sum((Y - pred) ** 2)) / ss_tot if ss_tot > 0 else 1.0
        c_prime = float(-slope)
        intercept = float(intercept)
    return TailReport(lambdas, tail, False, c_prime, intercept, r2, int(np.count_nonzero(mask)), direct, layer, se)


# --------------------------------------------------------------------------- #
# Galerkin modes with the divergence term outside the range of sigma
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class BlowupRow:
    modes: int
    mean: float
    se: float
    closed_form: float


@dataclass(frozen=True)
class BlowupReport:
    rows: tuple[BlowupRow, ...]
    slope: float
    r2: float


def example1_blowup(
    modes: Sequence[int],
    hbar: Callable[[np.ndarray], np.ndarray] | np.ndarray | None,
    T: float,
    dt: float,
    paths: int,
    base_seed: int = 0,
    resamples: int = 200,
) -> BlowupReport:
    """E||w^N(T)||^2 for the mode system du^n = -dt + hbar_n dB^n, u^n(0) = 0.

    Euler-Maruyama is exact here, so u^n(t_k) = -t_k + hbar_n B^n(t_k).
    Each path draws increments for max(modes) channels; smaller N reuse the
    leading channels of the same path.
    """
    modes = [int(N) for N in modes]
    if not modes or min(modes) < 1:
        raise ValueError("mode cutoffs must be >= 1")
    if paths < 1 or not T > 0 or not dt > 0:
        raise ValueError("need paths >= 1, T > 0 and dt > 0")
    steps = max(1, int(round(T / dt)))
    mesh = TimeMesh(T, steps)
    top = max(modes)
    k = np.arange(1, top + 1)
    if hbar is None:
        hb = np.zeros(top)
    elif callable(hbar):
        hb = np.asarray(hbar(k), dtype=float)
    else:
        hb = np.asarray(hbar, dtype=float)[:top]
    t_end = mesh.times[-1]
    finals = np.empty((paths, top))
    for p in range(paths):
        if np.any(hb):
            path = NoisePath.generate(path_seed(base_seed, p), mesh, top)
            B = path.increments.sum(axis=0)
        else:
            B = np.zeros(top)
        finals[p] = -t_end + hb * B
    sq = finals ** 2
    rows = []
    for N in modes:
        energy = sq[:, :N].sum(axis=1)
        closed = N * T * T + T * float(np.sum(hb[:N] ** 2))
        se = bootstrap_se(energy, resamples=resamples, seed=base_seed) if paths > 1 else 0.0
        rows.append(BlowupRow(N, float(np.mean(energy)), se, closed))
    xs = np.array(modes, dtype=float)
    ys = np.array([r.mean for r in rows])
    if len(modes) >= 2:
        slope, icpt = np.polyfit(xs, ys, 1)
        ss_tot = float(np.sum((ys - ys.mean()) ** 2))
        r2 = 1.0 - float(np.sum((ys - (icpt + slope * xs)) ** 2)) / ss_tot if ss_tot > 0 else 1.0
    else:
        slope, r2 = float("nan"), float("nan")
    return BlowupReport(tuple(rows), float(slope), float(r2))


def truncation_sensitivity(
    build: Callable[[int], SpdeProblem], channels: Sequence[int], n: float, mesh: TimeMesh, seeds: Sequence[int]
) -> dict[int, float]:
    """Mean energy as a function of the noise truncation level J."""
    out = {}
    for J in channels:
        problem = build(J)
        disc = discretize(problem)
        vals = [simulate(problem, n, NoisePath.generate(s, mesh, J), mesh, disc).energy() for s in seeds]
        out[int(J)] = float(np.mean(vals))
    return out
