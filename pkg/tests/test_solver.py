import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ospde.discretize import Grid, assemble_divergence, discretize
from ospde.model import CoefficientSet, Lipschitz, ObstacleSpec, SigmaField, SpdeProblem
from ospde.solver import (
    NoisePath,
    PicardDiverged,
    Stepper,
    TimeMesh,
    path_seed,
    penalty_projection,
    picard_solve,
    psor,
    psor_obstacle,
    simulate,
    solve_deterministic_obstacle,
    solve_linear_obstacle,
    step_penalized,
    trajectory_csv,
    weighted_norm,
)
from problems import additive, flat, heat, line, mode_noise, negative_drift_problem, picard_problem, sine


def test_time_mesh():
    m = TimeMesh(0.5, 50)
    assert m.dt == 0.01 and m.times[-1] == 0.5 and m.refined().steps == 100
    with pytest.raises(ValueError):
        TimeMesh(0.5, 0)


def test_noise_path_deterministic():
    m = TimeMesh(1.0, 20)
    a, b = NoisePath.generate(7, m, 3), NoisePath.generate(7, m, 3)
    assert np.array_equal(a.increments, b.increments)
    assert not np.array_equal(a.increments, NoisePath.generate(8, m, 3).increments)
    assert path_seed(100, 5) == 105


def test_coarsened_path_sums_pairs():
    m = TimeMesh(1.0, 20)
    p = NoisePath.generate(1, m, 2)
    assert np.allclose(p.coarsened().increments, p.increments[0::2] + p.increments[1::2])


def test_zero_problem_stays_zero():
    p = SpdeProblem(line(31), SigmaField.zero(1), CoefficientSet.zero(), lambda x: np.zeros(x.shape[0]))
    mesh = TimeMesh(1.0, 10)
    tr = simulate(p, 100.0, NoisePath.zero(mesh, 1), mesh)
    assert not tr.states.any() and not tr.reflection.any()


def test_inactive_obstacle_matches_free_solve():
    mesh = TimeMesh(0.5, 50)
    path = NoisePath.zero(mesh, 1)
    a = simulate(heat(63, barrier=-10.0), 1000.0, path, mesh)
    b = simulate(heat(63, barrier=None), 0.0, path, mesh)
    assert np.array_equal(a.states, b.states)
    assert not a.reflection.any()


def test_heat_decay():
    mesh = TimeMesh(0.5, 500)
    p = heat(127)
    tr = solve_linear_obstacle(p, 100.0, NoisePath.zero(mesh, 1), mesh)
    x = p.domain.nodes()[:, 0]
    h = p.domain.spacing[0]
    assert np.max(np.abs(tr.states[-1] - np.exp(-0.5) * np.sin(x))) <= 5 * (mesh.dt + h * h)


def test_negative_drift_reflects():
    p = negative_drift_problem()
    mesh = TimeMesh(0.5, 100)
    tr = simulate(p, 1000.0, NoisePath.generate(0, mesh, 1), mesh)
    assert tr.reflection.min() >= 0.0
    assert tr.reflection_mass() > 0
    coarse = simulate(p, 100.0, NoisePath.generate(0, mesh, 1), mesh)
    assert coarse.states.min() < tr.states.min() < 0.0


def test_penalty_residual_decreases_in_n():
    p = negative_drift_problem()
    mesh = TimeMesh(0.5, 100)
    path = NoisePath.generate(3, mesh, 1)
    disc = discretize(p)
    res = [simulate(p, n, path, mesh, disc).penalty_residual() for n in (10, 100, 1000)]
    assert res[0] > res[1] > res[2]


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 1e4))
def test_penalty_projection_solves_fixed_point(w, s, kappa):
    u = penalty_projection(np.array([w]), np.array([s]), kappa)[0]
    assert abs(u - (w + kappa * max(s - u, 0.0))) <= 1e-9 * (1 + abs(w) + kappa * abs(s))
    assert u >= w


def test_linear_solve_rejects_state_dependence():
    mesh = TimeMesh(1.0, 10)
    with pytest.raises(ValueError):
        solve_linear_obstacle(picard_problem(), 10.0, NoisePath.zero(mesh, 1), mesh)


def test_noise_shape_checked():
    mesh = TimeMesh(1.0, 10)
    with pytest.raises(ValueError):
        simulate(heat(15), 1.0, NoisePath.zero(mesh, 3), mesh)


def test_drift_linear_in_state_matches_direct_solve():
    c = -0.7
    coeffs = CoefficientSet(
        lambda t, x, y, z: c * y,
        lambda t, x, y, z: np.zeros((x.shape[0], 1)),
        lambda t, x, y, z: np.zeros((x.shape[0], 1)),
        Lipschitz(0.7, 0.0, 0.0),
        1,
        1,
    )
    p = SpdeProblem(line(31), SigmaField.constant([[1.0]]), coeffs, sine, horizon=0.2)
    mesh = TimeMesh(0.2, 20)
    tr = simulate(p, 0.0, NoisePath.zero(mesh, 1), mesh)
    disc = discretize(p)
    A = np.eye(disc.grid.size) - mesh.dt * disc.laplacian.matrix.toarray()
    u = p.initial_values()
    for _ in range(mesh.steps):
        u = np.linalg.solve(A, u * (1 + mesh.dt * c))
    assert np.allclose(tr.states[-1], u, rtol=0, atol=1e-12)


# --------------------------------------------------------------------------- #
# deterministic obstacle
# --------------------------------------------------------------------------- #


def deterministic_setup(n=31, steps=20, c=0.5):
    g = Grid(line(n))
    L = assemble_divergence(SigmaField.constant([[1.0]]), g)
    return g, L, TimeMesh(0.5, steps), np.full(g.size, c)


def test_nonpositive_obstacle_from_zero_stays_zero():
    g, L, mesh, _ = deterministic_setup()
    out = solve_deterministic_obstacle(-0.3, np.zeros(g.size), None, 1e-5, mesh, L)
    assert not out.any()


def test_psor_small_complementarity():
    A = np.array([[2.0, -1.0], [-1.0, 2.0]])
    b = np.array([-1.0, 1.0])
    x = psor(A, b, np.zeros(2), np.zeros(2))
    r = A @ x - b
    assert np.all(x >= 0) and np.all(r >= -1e-10) and abs(x @ r) < 1e-10


def test_penalised_close_to_psor():
    g, L, mesh, u0 = deterministic_setup()
    pen = solve_deterministic_obstacle(0.5, u0, None, 1e-5, mesh, L)
    vi = psor_obstacle(0.5, u0, None, mesh, L)
    assert np.max(np.abs(pen - vi)) < 1e-3


def test_penalised_monotone_in_epsilon():
    g, L, mesh, u0 = deterministic_setup()
    outs = [solve_deterministic_obstacle(0.5, u0, None, e, mesh, L) for e in (1e-2, 1e-3, 1e-4, 1e-5)]
    for coarse, fine in zip(outs[:-1], outs[1:]):
        assert np.all(fine >= coarse - 1e-10)


# --------------------------------------------------------------------------- #
# Picard
# --------------------------------------------------------------------------- #


def test_picard_constant_coefficients_one_iteration():
    J = 2
    p = SpdeProblem(
        line(31), SigmaField.constant([[1.0]], bound=1.0), additive(0.3, mode_noise(J), J), sine,
        ObstacleSpec(barrier=flat(0.0)), horizon=0.5,
    )
    mesh = TimeMesh(0.5, 50)
    path = NoisePath.generate(0, mesh, J)
    traj, hist = picard_solve(p, 100.0, path, mesh)
    assert hist[2].distance == 0.0 and len(hist) == 3
    assert np.array_equal(traj.states, simulate(p, 100.0, path, mesh).states)


def test_picard_linear_drift_matches_implicit_solve():
    c = 0.3
    coeffs = CoefficientSet(
        lambda t, x, y, z: c * y,
        lambda t, x, y, z: np.zeros((x.shape[0], 1)),
        lambda t, x, y, z: np.zeros((x.shape[0], 1)),
        Lipschitz(c, 0.0, 0.0),
        1,
        1,
    )
    p = SpdeProblem(line(31), SigmaField.constant([[1.0]]), coeffs, sine, horizon=0.5)
    diffs = []
    for steps in (50, 100):
        mesh = TimeMesh(0.5, steps)
        traj, _ = picard_solve(p, 0.0, NoisePath.zero(mesh, 1), mesh, tol=1e-10)
        disc = discretize(p)
        A = (1 - mesh.dt * c) * np.eye(disc.grid.size) - mesh.dt * disc.laplacian.matrix.toarray()
        u = p.initial_values()
        for _ in range(steps):
            u = np.linalg.solve(A, u)
        diffs.append(np.max(np.abs(traj.states[-1] - u)))
    assert diffs[0] < 5 * 0.01
    assert 0.4 < diffs[1] / diffs[0] < 0.6


def test_picard_rejects_failed_contraction():
    base = picard_problem()
    c = base.coeffs
    bad = CoefficientSet(c.f, c.g, c.h, Lipschitz(0.5, 0.5, 0.3), 1, 1)
    p = SpdeProblem(base.domain, base.sigma, bad, base.initial, base.obstacle, horizon=1.0)
    mesh = TimeMesh(1.0, 10)
    with pytest.raises(ValueError):
        picard_solve(p, 10.0, NoisePath.zero(mesh, 1), mesh)


def test_picard_reports_history_when_capped():
    mesh = TimeMesh(1.0, 20)
    with pytest.raises(PicardDiverged) as info:
        picard_solve(picard_problem(), 10.0, NoisePath.generate(0, mesh, 1), mesh, tol=1e-30, max_iter=3)
    assert len(info.value.history) == 4


# --------------------------------------------------------------------------- #
# weighted norm
# --------------------------------------------------------------------------- #


def short_trajectory(seed=0):
    mesh = TimeMesh(0.5, 20)
    return simulate(negative_drift_problem(n_nodes=15), 100.0, NoisePath.generate(seed, mesh, 1), mesh)


def test_weighted_norm_zero_and_homogeneous():
    tr = short_trajectory()
    assert weighted_norm(tr.difference(tr), 2.0, 1.0) == 0.0
    base = weighted_norm(tr, 2.0, 1.0)
    doubled = tr.difference(tr)
    doubled.states = 2 * tr.states
    doubled.grads = 2 * tr.grads
    assert weighted_norm(doubled, 2.0, 1.0) == 4 * base


@pytest.mark.parametrize("gamma, delta", [(0.0, 1.0), (1.5, 0.5)])
def test_weighted_norm_constant_in_time(gamma, delta):
    tr = short_trajectory()
    const = tr.difference(tr)
    const.states[:] = tr.states[0]
    const.grads[:] = tr.grads[0]
    level = delta * tr.norms2()[0] + tr.grad_norms2()[0]
    exact = level * 0.5 if gamma == 0 else level * (1 - np.exp(-gamma * 0.5)) / gamma
    assert np.isclose(weighted_norm(const, gamma, delta), exact, rtol=1e-3 if gamma else 1e-12)


def test_energy_and_trajectory_csv():
    tr = short_trajectory()
    assert tr.energy() >= np.max(tr.norms2())
    text = trajectory_csv(tr, discretize(negative_drift_problem(n_nodes=15)).grid, every=10)
    lines = text.splitlines()
    assert lines[0] == "step,t,x1,u,grad1,reflection"
    assert len(lines) == 1 + 3 * 15


def test_stepper_rejects_bad_dt():
    with pytest.raises(Exception):
        Stepper(discretize(heat(15)), 0.0)


def test_step_rejects_negative_penalty():
    p = heat(15)
    disc = discretize(p)
    with pytest.raises(ValueError):
        step_penalized(p.initial_values(), 0.0, p, Stepper(disc, 0.1), -1.0, np.zeros(1))
