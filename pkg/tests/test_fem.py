import math

import numpy as np
import pytest

from neuralfem import diff, fem, meshgen, problems
from neuralfem.mesh import DIRICHLET, Facet, Mesh, NEUMANN, tag_nodes_from_facets


def _simplex_moment(powers, dim):
    """Exact (1/V)·∫ Π λ_i^p_i over the reference simplex."""
    total = sum(powers)
    num = math.prod(math.factorial(p) for p in powers) * math.factorial(dim)
    return num / math.factorial(total + dim)


@pytest.mark.parametrize("dim", [2, 3])
def test_quadrature_degree_two_exact(dim):
    qp, qw = fem.volume_quadrature(dim)
    assert qw.sum() == pytest.approx(1.0, abs=1e-15)
    for total in range(3):
        for powers in np.ndindex(*(total + 1,) * (dim + 1)):
            if sum(powers) != total:
                continue
            approx = sum(w * math.prod(p ** e for p, e in zip(pt, powers))
                         for pt, w in zip(qp, qw))
            assert approx == pytest.approx(_simplex_moment(powers, dim), abs=1e-14)


def test_triangle_rule_not_degree_three():
    qp, qw = fem.volume_quadrature(2)
    approx = sum(w * pt[0] ** 3 for pt, w in zip(qp, qw))
    assert abs(approx - _simplex_moment((3, 0, 0), 2)) > 1e-3


def _single_right_triangle():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    elements = np.array([[0, 1, 2]])
    facets = [Facet((0, 1), DIRICHLET), Facet((1, 2), DIRICHLET),
              Facet((0, 2), DIRICHLET)]
    return Mesh(2, nodes, elements, facets, tag_nodes_from_facets(3, facets))


def test_local_matrices_unit_right_triangle():
    mesh = _single_right_triangle()
    ed = fem.element_data(mesh)
    assert ed.volumes[0] == pytest.approx(0.5)
    stiff = fem.local_stiffness(ed, np.ones(1))[0]
    expect_k = 0.5 * np.array([[2.0, -1.0, -1.0], [-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
    assert np.allclose(stiff, expect_k, atol=1e-14)
    mass = fem.local_mass(ed)[0]
    expect_m = (0.5 / 12.0) * np.array([[2.0, 1, 1], [1, 2, 1], [1, 1, 2]])
    assert np.allclose(mass, expect_m, atol=1e-15)


def _plain_spec(mesh, alpha=0.05, dt=0.01, n_steps=100):
    spec = problems.ProblemSpec(
        experiment="exp1", mesh=mesh, ic_params=np.zeros((0, 5)),
        material_params=np.zeros((0, 5)), vf0=0.5,
        constants={"alpha": alpha, "t0": 1.0, "temp_scale": 1.0},
        dirichlet_values=np.zeros(0), neumann_flux={}, dt=dt, n_steps=n_steps)
    spec.dirichlet_values = np.zeros(len(spec.dirichlet_nodes()))
    return spec


def test_element_residual_constant_state_is_zero():
    spec = _plain_spec(meshgen.unit_square_mesh(3))
    T = np.full(spec.mesh.num_nodes, 3.7)
    for e in (0, 5, 17):
        r = fem.element_residual(spec, e, T, T, 0.01)
        assert np.abs(r).max() < 1e-14


def test_degenerate_element_rejected():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    mesh = Mesh(2, nodes, np.array([[0, 1, 2]]))
    with pytest.raises(fem.FEMSolverError, match="degenerate"):
        fem.element_data(mesh)


def test_assembled_matrices_symmetric():
    spec = problems.sample_problem("exp2", np.random.default_rng(4))
    ws = fem.Workspace(spec)
    assert abs(ws.M - ws.M.T).max() <= 1e-13
    assert abs(ws.K - ws.K.T).max() <= 1e-13


def test_solve_step_residual_duality():
    spec = problems.sample_problem("exp1", np.random.default_rng(0))
    ws = fem.Workspace(spec)
    T0 = problems.initial_condition(spec)
    T0[ws.fixed] = ws.fixed_values
    T1 = ws.step_linear(T0)
    eps = fem.assemble_residual(spec, T1, T0, spec.dt)
    rhs = ws.M @ T0 / spec.dt
    assert np.abs(eps).max() <= 1e-10 * max(1.0, np.linalg.norm(rhs))
    # persistence does not satisfy the equations
    eps_p = fem.assemble_residual(spec, T0, T0, spec.dt)
    assert np.abs(eps_p).max() > 1e-6


def test_steady_constant_state():
    mesh = meshgen.unit_square_mesh(4)
    spec = _plain_spec(mesh)
    spec.dirichlet_values = np.full(len(spec.dirichlet_nodes()), 2.5)
    T0 = np.full(mesh.num_nodes, 2.5)
    T1 = fem.solve_step_linear(spec, T0)
    assert np.abs(T1 - T0).max() < 1e-10


def test_linear_step_against_dense_oracle():
    spec = problems.sample_problem("exp1", np.random.default_rng(8))
    ws = fem.Workspace(spec)
    rng = np.random.default_rng(1)
    T0 = problems.initial_condition(spec) + 0.01 * rng.standard_normal(
        spec.mesh.num_nodes)
    T0[ws.fixed] = ws.fixed_values
    T1 = ws.step_linear(T0)

    A = (ws.M / spec.dt + ws.K).toarray()
    rhs = ws.M @ T0 / spec.dt
    free, fixed = ws.free, ws.fixed
    dense = np.empty_like(T0)
    dense[fixed] = ws.fixed_values
    dense[free] = np.linalg.solve(A[np.ix_(free, free)],
                                  rhs[free] - A[np.ix_(free, fixed)] @ ws.fixed_values)
    assert np.abs(T1 - dense).max() <= 1e-12


def test_neumann_residual_localized():
    spec = problems.sample_problem("exp3", np.random.default_rng(2))
    T0 = problems.initial_condition(spec)
    eps = fem.assemble_residual(spec, T0, T0, spec.dt)
    free = spec.free_nodes()
    inner = {v for f in spec.mesh.boundary_facets if f.group == "inner"
             for v in f.nodes}
    hot = np.array([v in inner for v in free])
    assert np.abs(eps[hot]).min() > 0.0
    assert np.abs(eps[~hot]).max() == 0.0


def test_neumann_load_matches_facet_area():
    spec = problems.sample_problem("exp3", np.random.default_rng(3))
    load = fem.neumann_load(spec)
    inner = [f for f in spec.mesh.boundary_facets if f.group == "inner"]
    total = spec.mesh.facet_areas(inner).sum() * spec.neumann_flux["inner"]
    assert load.sum() == pytest.approx(total, rel=1e-12)


def test_nonlinear_step_reduces_to_linear_without_source():
    spec = problems.sample_problem("exp2", np.random.default_rng(5))
    spec.constants["q0"] = 0.0
    ws = fem.Workspace(spec)
    T0 = problems.initial_condition(spec) + np.linspace(0, 1, spec.mesh.num_nodes)
    T0[ws.fixed] = ws.fixed_values
    assert np.abs(ws.step_nonlinear(T0, spec.dt) -
                  ws.step_linear(T0)).max() <= 1e-12


def test_picard_against_bruteforce_iteration():
    # single interior node: the fixed point reduces to a scalar recursion
    mesh = meshgen.unit_square_mesh(2)
    spec = problems.ProblemSpec(
        experiment="exp2", mesh=mesh, ic_params=np.zeros((0, 5)),
        material_params=np.zeros((0, 5)), vf0=0.5,
        constants=dict(problems.EXP2_CONSTANTS),
        dirichlet_values=np.full(8, 100.0), neumann_flux={}, dt=0.01, n_steps=100)
    ws = fem.Workspace(spec)
    assert len(ws.free) == 1
    T0 = np.full(9, 100.0)
    t_new = 0.01

    # independent dense loop with explicitly written quadrature sums
    ed = fem.element_data(mesh)
    A = (ws.M / spec.dt + ws.K).toarray()
    qp, qw = fem.volume_quadrature(2)
    c = spec.constants
    iterates = []
    T = T0.copy()
    for _ in range(100):
        fq = np.zeros(9)
        for e, el in enumerate(mesh.elements):
            for p, w in enumerate(qw):
                T_p = sum(qp[p][m] * T[el[m]] for m in range(3))
                q_p = c["q0"] * 0.5 * math.exp(-c["C"] * T_p * t_new / c["t0"]) \
                    * c["C"] * T_p
                for m in range(3):
                    fq[el[m]] += ed.volumes[e] * w * q_p * qp[p][m]
        rhs = ws.M @ T0 / spec.dt + fq
        Tn = T0.copy()
        f = ws.free
        Tn[f] = (rhs[f] - A[np.ix_(f, ws.fixed)] @ ws.fixed_values) \
            / A[np.ix_(f, f)][0, 0]
        iterates.append(Tn[f][0])
        if abs(Tn[f][0] - T[f][0]) <= 1e-8 * max(1.0, abs(T[f][0])):
            T = Tn
            break
        T = Tn

    result = ws.step_nonlinear(T0, t_new)
    assert result[ws.free][0] == pytest.approx(iterates[-1], abs=1e-12)
    assert len(iterates) < 100  # converged well under the cap


def test_picard_residual_small():
    spec = problems.sample_problem("exp2", np.random.default_rng(1))
    ws = fem.Workspace(spec)
    T0 = problems.initial_condition(spec)
    T1 = ws.step_nonlinear(T0, spec.dt)
    eps = fem.assemble_residual(spec, T1, T0, spec.dt)
    assert np.abs(eps).max() <= 1e-6


def test_trajectory_invariants_and_overshoot():
    spec = problems.sample_problem("exp1", np.random.default_rng(6))
    traj = fem.solve_trajectory(spec)
    assert traj.data.shape == (101, spec.mesh.num_nodes)
    ic = problems.initial_condition(spec)
    assert np.array_equal(traj.data[0], ic)
    dn = spec.dirichlet_nodes()
    assert np.abs(traj.data[:, dn] - spec.dirichlet_values[None, :]).max() == 0.0
    assert traj.data.max() <= ic.max() + 1e-6


def test_constant_preservation():
    mesh = meshgen.unit_square_mesh(5)
    spec = _plain_spec(mesh, n_steps=20)
    spec.ic_params = np.array([[0.0, 0.5, 0.5, 0.1, 0.1]])  # zero-amplitude IC
    base = problems.initial_condition(spec) + 1.25
    spec.dirichlet_values = base[spec.dirichlet_nodes()]

    ws = fem.Workspace(spec)
    T = base.copy()
    for n in range(1, 21):
        T = ws.step_linear(T)
    assert np.abs(T - base).max() <= 1e-10


def test_assembly_deterministic_and_matches_element_sum():
    spec = problems.sample_problem("exp2", np.random.default_rng(2))
    rng = np.random.default_rng(3)
    T_new = problems.initial_condition(spec) + rng.standard_normal(
        spec.mesh.num_nodes)
    T_old = problems.initial_condition(spec)
    a = fem.assemble_residual(spec, T_new, T_old, 0.03)
    b = fem.assemble_residual(spec, T_new, T_old, 0.03)
    assert np.array_equal(a, b)

    full = fem.assemble_residual(spec, T_new, T_old, 0.03, _restrict=False)
    acc = np.zeros(spec.mesh.num_nodes)
    for e in range(spec.mesh.num_elements):
        acc[spec.mesh.elements[e]] += fem.element_residual(spec, e, T_new, T_old,
                                                           0.03)
    assert np.abs(acc - full).max() <= 1e-13 * max(1.0, np.abs(full).max())


def test_trajectory_io_roundtrip(tmp_path):
    traj = fem.Trajectory(data=np.random.default_rng(0).standard_normal((11, 7)))
    p = tmp_path / "t.bin"
    fem.write_trajectory(traj, p)
    raw = p.read_bytes()
    assert raw[:7] == b"NFTRAJ1"
    back = fem.read_trajectory(p)
    assert np.array_equal(back.data, traj.data)
    with pytest.raises(ValueError, match="magic"):
        fem.read_trajectory(tmp_path / "bad.bin") if (tmp_path / "bad.bin").write_bytes(
            b"NOPE") else None


def _manufactured_error(n, dt, t_end, alpha=0.05):
    """Implicit Euler error in the M-norm for T = sin(πx)sin(πy)e^{-t}."""
    cfact = -1.0 + 2.0 * np.pi ** 2 * alpha

    def exact(x, t):
        return np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1]) * np.exp(-t)

    mesh = meshgen.unit_square_mesh(n)
    spec = _plain_spec(mesh, alpha=alpha, dt=dt)
    ws = fem.Workspace(spec, extra_source=lambda x, t: cfact * exact(x, t))
    T = exact(mesh.nodes, 0.0)
    T[ws.fixed] = 0.0
    for k in range(1, int(round(t_end / dt)) + 1):
        T = ws.step_linear(T, k * dt)
    e = T - exact(mesh.nodes, t_end)
    return float(np.sqrt(e @ (ws.M @ e)))


def test_spatial_convergence_second_order():
    errs = [_manufactured_error(n, dt=2e-4, t_end=0.02) for n in (8, 16, 32)]
    for a, b in zip(errs, errs[1:]):
        assert 4.0 * 0.8 <= a / b <= 4.0 * 1.2


def test_temporal_convergence_first_order():
    errs = [_manufactured_error(48, dt, t_end=0.2) for dt in (0.04, 0.02)]
    assert 2.0 * 0.8 <= errs[0] / errs[1] <= 2.0 * 1.2


@pytest.mark.parametrize("tag,seed", [("exp1", 0), ("exp2", 1), ("exp3", 2)])
def test_residual_form_matches_reference_assembly(tag, seed):
    spec = problems.sample_problem(tag, np.random.default_rng(seed))
    ws = fem.Workspace(spec)
    rf = fem.ResidualForm(spec)
    rng = np.random.default_rng(7)
    T0 = problems.initial_condition(spec)
    T0[ws.fixed] = ws.fixed_values
    scale = spec.constants["temp_scale"]
    U = np.stack([T0 + 0.05 * scale * rng.standard_normal(len(T0))
                  for _ in range(3)])
    U[:, ws.fixed] = ws.fixed_values
    times = spec.dt * np.arange(1, 4)
    got = rf.residuals(diff.tensor(U), T0, times).data
    ref = np.stack([
        fem.assemble_residual(spec, U[0], T0, times[0]),
        fem.assemble_residual(spec, U[1], U[0], times[1]),
        fem.assemble_residual(spec, U[2], U[1], times[2]),
    ])
    tol = 1e-13 * max(1.0, np.abs(ref).max())
    assert np.abs(got - ref).max() <= tol


def test_residual_form_gradient_matches_fd():
    spec = problems.sample_problem("exp2", np.random.default_rng(9))
    rf = fem.ResidualForm(spec)
    ws = fem.Workspace(spec)
    T0 = problems.initial_condition(spec)
    n = spec.mesh.num_nodes
    rng = np.random.default_rng(0)
    U0 = np.stack([T0 + 5.0 * rng.standard_normal(n) for _ in range(2)])
    times = spec.dt * np.arange(1, 3)

    U = diff.parameter(U0)
    loss = diff.reduce_mean(diff.square(rf.residuals(U, T0, times)))
    diff.backward(loss)

    probe = rng.choice(U0.size, size=8, replace=False)
    eps = 1e-5
    for flat in probe:
        idx = np.unravel_index(flat, U0.shape)
        up, dn = U0.copy(), U0.copy()
        up[idx] += eps
        dn[idx] -= eps
        with diff.no_grad():
            lu = diff.reduce_mean(diff.square(
                rf.residuals(diff.tensor(up), T0, times))).item()
            ld = diff.reduce_mean(diff.square(
                rf.residuals(diff.tensor(dn), T0, times))).item()
        fd = (lu - ld) / (2 * eps)
        ref = U.grad[idx]
        assert fd == pytest.approx(ref, rel=2e-5, abs=1e-12)
