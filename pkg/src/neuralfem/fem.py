"""P1 Galerkin finite elements with implicit Euler time stepping.

Provides the reference solver producing ground-truth trajectories, the
element-wise residual of the discrete weak form (shared, via identical
quadrature, with the differentiable physics loss), and the trajectory
file format.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import DIRICHLET, Mesh
from .problems import ProblemSpec, initial_condition, material_values, \
    nodal_diffusivity, source_term

log = logging.getLogger(__name__)

TRAJECTORY_MAGIC = b"NFTRAJ1"

# 4-point degree-2 tetrahedral rule, barycentric (a, b, b, b) permutations
TET_QA = 0.5854101966249685
TET_QB = 0.1381966011250105


class FEMSolverError(RuntimeError):
    """Linear solver failed to converge."""


def volume_quadrature(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric points (rows) and weights; exact through degree 2."""
    if dim == 2:
        pts = np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]])
        return pts, np.full(3, 1.0 / 3.0)
    if dim == 3:
        a, b = TET_QA, TET_QB
        pts = np.array([[a, b, b, b], [b, a, b, b], [b, b, a, b], [b, b, b, a]])
        return pts, np.full(4, 0.25)
    raise ValueError(f"unsupported dimension {dim}")


def facet_quadrature(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Rule on a boundary facet (edge in 2D, triangle in 3D)."""
    if dim == 2:
        return np.array([[0.5, 0.5]]), np.array([1.0])
    if dim == 3:
        return volume_quadrature(2)
    raise ValueError(f"unsupported dimension {dim}")


@dataclass
class ElementData:
    """Geometric precomputation shared by assembly and the physics loss."""

    volumes: np.ndarray  # (E,)
    grads: np.ndarray  # (E, d+1, d) gradients of the P1 basis
    qp_bary: np.ndarray  # (nq, d+1)
    qp_weights: np.ndarray  # (nq,)

    def quad_points(self, mesh: Mesh) -> np.ndarray:
        """Physical quadrature point coordinates, (E, nq, dim)."""
        return np.einsum("qv,evd->eqd", self.qp_bary, mesh.nodes[mesh.elements])


def element_data(mesh: Mesh) -> ElementData:
    pts = mesh.nodes[mesh.elements]
    d = mesh.dim
    jac = np.swapaxes(pts[:, 1:] - pts[:, :1], 1, 2)  # (E, d, d)
    det = np.linalg.det(jac)
    vol = det / (2.0 if d == 2 else 6.0)
    if np.any(vol <= 0):
        raise FEMSolverError("degenerate or inverted element")
    jinv = np.linalg.inv(jac)
    grads = np.empty((len(pts), d + 1, d))
    grads[:, 1:] = jinv  # row i of J^-1 is the gradient of barycentric i+1
    grads[:, 0] = -jinv.sum(axis=1)
    qp, qw = volume_quadrature(d)
    return ElementData(volumes=vol, grads=grads, qp_bary=qp, qp_weights=qw)


def local_mass(ed: ElementData) -> np.ndarray:
    """Consistent mass blocks V_e · Σ_q w_q φ_m φ_v, (E, d+1, d+1)."""
    ref = np.einsum("q,qm,qv->mv", ed.qp_weights, ed.qp_bary, ed.qp_bary)
    return ed.volumes[:, None, None] * ref[None]


def local_stiffness(ed: ElementData, alpha_bar: np.ndarray) -> np.ndarray:
    """Diffusion blocks ᾱ_e V_e ∇φ_m·∇φ_v with quadrature-averaged α."""
    gg = np.einsum("emd,evd->emv", ed.grads, ed.grads)
    return (alpha_bar * ed.volumes)[:, None, None] * gg


def _scatter_matrix(mesh: Mesh, blocks: np.ndarray) -> sp.csr_matrix:
    el = mesh.elements
    n_loc = el.shape[1]
    rows = np.repeat(el, n_loc, axis=1).ravel()
    cols = np.tile(el, (1, n_loc)).ravel()
    mat = sp.coo_matrix((blocks.ravel(), (rows, cols)),
                        shape=(mesh.num_nodes, mesh.num_nodes))
    return mat.tocsr()


def neumann_load(spec: ProblemSpec) -> np.ndarray:
    """Constant boundary-flux load vector ∫_Γ_N (α h_N) φ_m dA."""
    mesh = spec.mesh
    load = np.zeros(mesh.num_nodes)
    if not spec.neumann_flux:
        return load
    qp, qw = facet_quadrature(mesh.dim)
    shape_int = qw @ qp  # ∫ φ_m over the reference facet, per local vertex
    for f in mesh.boundary_facets:
        flux = spec.neumann_flux.get(f.group, 0.0)
        if flux == 0.0:
            continue
        area = mesh.facet_areas([f])[0]
        for m, v in enumerate(f.nodes):
            load[v] += flux * area * shape_int[m]
    return load


def project_source(mesh: Mesh, ed: ElementData, fn, t: float) -> np.ndarray:
    """Load vector ∫ f(x, t) φ_m dV for a callable source (test utility)."""
    xq = ed.quad_points(mesh)  # (E, nq, dim)
    fq = fn(xq.reshape(-1, mesh.dim), t).reshape(xq.shape[:2])
    contrib = np.einsum("e,q,eq,qm->em", ed.volumes, ed.qp_weights, fq, ed.qp_bary)
    load = np.zeros(mesh.num_nodes)
    np.add.at(load, mesh.elements.ravel(), contrib.ravel())
    return load


class Workspace:
    """Per-problem precomputation: matrices, loads, and the Dirichlet split.

    The diffusivity field is time-independent in all experiments, so mass
    and stiffness are assembled once and shared by every step and every
    Picard iterate.
    """

    def __init__(self, spec: ProblemSpec, extra_source=None):
        self.spec = spec
        self.extra_source = extra_source  # callable f(x, t), for manufactured tests
        mesh = spec.mesh
        self.ed = element_data(mesh)
        alpha = nodal_diffusivity(spec)
        alpha_qp = alpha[mesh.elements] @ self.ed.qp_bary.T  # (E, nq)
        self.alpha_bar = alpha_qp @ self.ed.qp_weights
        self.mass_loc = local_mass(self.ed)
        self.stiff_loc = local_stiffness(self.ed, self.alpha_bar)
        self.M = _scatter_matrix(mesh, self.mass_loc)
        self.K = _scatter_matrix(mesh, self.stiff_loc)
        self.f_neumann = neumann_load(spec)

        self.free = spec.free_nodes()
        self.fixed = spec.dirichlet_nodes()
        self.fixed_values = spec.dirichlet_values
        A = (self.M / spec.dt + self.K).tocsr()
        self.A_ff = A[self.free][:, self.free].tocsr()
        self.A_fc = A[self.free][:, self.fixed].tocsr()

        vf = material_values(spec)
        self.vf_qp = None
        if vf is not None:
            self.vf_qp = vf[mesh.elements] @ self.ed.qp_bary.T

    def source_load(self, T: np.ndarray, t_new: float) -> np.ndarray:
        """∫ q(T, t, V_f) φ_m dV with all fields interpolated at quadrature."""
        mesh = self.spec.mesh
        if self.vf_qp is None:
            return np.zeros(mesh.num_nodes)
        c = self.spec.constants
        T_qp = T[mesh.elements] @ self.ed.qp_bary.T
        q_qp = source_term(T_qp, t_new, self.vf_qp, q0=c["q0"], C=c["C"], t0=c["t0"])
        contrib = np.einsum("e,q,eq,qm->em", self.ed.volumes, self.ed.qp_weights,
                            q_qp, self.ed.qp_bary)
        load = np.zeros(mesh.num_nodes)
        np.add.at(load, mesh.elements.ravel(), contrib.ravel())
        return load

    def _solve(self, rhs_free: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
        n = len(rhs_free)
        if n == 0:
            return rhs_free
        if n < 500:
            return np.linalg.solve(self.A_ff.toarray(), rhs_free)
        precond = sp.diags(1.0 / self.A_ff.diagonal())
        x, info = spla.cg(self.A_ff, rhs_free, x0=x0, rtol=1e-12, atol=0.0,
                          maxiter=20 * n, M=precond)
        if info != 0:
            raise FEMSolverError(f"CG failed to converge (info={info}, n={n})")
        return x

    def _finish(self, rhs: np.ndarray, x0: np.ndarray | None) -> np.ndarray:
        rhs_free = rhs[self.free] - self.A_fc @ self.fixed_values
        T = np.empty(self.spec.mesh.num_nodes)
        T[self.fixed] = self.fixed_values
        T[self.free] = self._solve(rhs_free, x0)
        res = self.A_ff @ T[self.free] - rhs_free
        if np.linalg.norm(res) > 1e-10 * max(1.0, np.linalg.norm(rhs_free)):
            raise FEMSolverError("post-solve residual check failed")
        return T

    def step_linear(self, T_old: np.ndarray, t_new: float = 0.0) -> np.ndarray:
        rhs = self.M @ T_old / self.spec.dt + self.f_neumann
        if self.extra_source is not None:
            rhs += project_source(self.spec.mesh, self.ed, self.extra_source, t_new)
        return self._finish(rhs, T_old[self.free])

    def step_nonlinear(self, T_old: np.ndarray, t_new: float,
                       max_iter: int = 100, tol: float = 1e-8) -> np.ndarray:
        base = self.M @ T_old / self.spec.dt + self.f_neumann
        T = T_old
        for _ in range(max_iter):
            T_next = self._finish(base + self.source_load(T, t_new), T[self.free])
            delta = np.abs(T_next - T).max()
            if delta <= tol * max(1.0, np.abs(T).max()):
                return T_next
            T = T_next
        log.warning("Picard iteration hit the %d-iteration cap (delta=%.3e)",
                    max_iter, delta)
        return T

    def step(self, T_old: np.ndarray, t_new: float) -> np.ndarray:
        if self.spec.experiment == "exp2":
            return self.step_nonlinear(T_old, t_new)
        return self.step_linear(T_old, t_new)


def element_residual(spec: ProblemSpec, elem: int, T_new: np.ndarray,
                     T_old: np.ndarray, t_new: float) -> np.ndarray:
    """Residual contributions of one element, per local test function."""
    full = assemble_residual(spec, T_new, T_old, t_new, _only_element=elem,
                             _restrict=False)
    return full[spec.mesh.elements[elem]]


def assemble_residual(spec: ProblemSpec, T_new: np.ndarray, T_old: np.ndarray,
                      t_new: float, _only_element: int | None = None,
                      _restrict: bool = True) -> np.ndarray:
    """Discrete weak-form residual, restricted to free test functions.

    For each test function φ_m:
      Σ_e ∫_e [(T_new − T_old)/Δt − q(T_new, t_new)] φ_m + α ∇T_new·∇φ_m dV
      − ∫_Γ_N (α h_N) φ_m dA
    evaluated with the degree-2 quadrature rule.
    """
    mesh = spec.mesh
    ed = element_data(mesh)
    elements = mesh.elements
    alpha = nodal_diffusivity(spec)
    alpha_bar = (alpha[elements] @ ed.qp_bary.T) @ ed.qp_weights
    mass = local_mass(ed)
    stiff = local_stiffness(ed, alpha_bar)

    dU = (T_new - T_old)[elements] / spec.dt
    contrib = np.einsum("evm,ev->em", mass, dU) \
        + np.einsum("evm,ev->em", stiff, T_new[elements])

    vf = material_values(spec)
    if vf is not None:
        c = spec.constants
        T_qp = T_new[elements] @ ed.qp_bary.T
        vf_qp = vf[elements] @ ed.qp_bary.T
        q_qp = source_term(T_qp, t_new, vf_qp, q0=c["q0"], C=c["C"], t0=c["t0"])
        contrib -= np.einsum("e,q,eq,qm->em", ed.volumes, ed.qp_weights, q_qp,
                             ed.qp_bary)

    if _only_element is not None:
        mask = np.zeros(len(contrib), dtype=bool)
        mask[_only_element] = True
        contrib = np.where(mask[:, None], contrib, 0.0)

    res = np.zeros(mesh.num_nodes)
    np.add.at(res, elements.ravel(), contrib.ravel())
    if _only_element is None:
        res -= neumann_load(spec)
    else:
        qp, qw = facet_quadrature(mesh.dim)
        shape_int = qw @ qp
        elem_nodes = set(elements[_only_element])
        for f in mesh.boundary_facets:
            flux = spec.neumann_flux.get(f.group, 0.0)
            if flux == 0.0 or not set(f.nodes) <= elem_nodes:
                continue
            area = mesh.facet_areas([f])[0]
            for m, v in enumerate(f.nodes):
                res[v] -= flux * area * shape_int[m]
    if _restrict:
        return res[spec.free_nodes()]
    return res


def solve_step_linear(spec: ProblemSpec, T_old: np.ndarray, t_new: float = 0.0,
                      workspace: Workspace | None = None) -> np.ndarray:
    ws = workspace or Workspace(spec)
    return ws.step_linear(T_old, t_new)


def solve_step_nonlinear(spec: ProblemSpec, T_old: np.ndarray, t_new: float,
                         workspace: Workspace | None = None) -> np.ndarray:
    ws = workspace or Workspace(spec)
    return ws.step_nonlinear(T_old, t_new)


class ResidualForm:
    """Differentiable element-split residual over a prediction bundle.

    Uses exactly the quadrature and local matrices of the reference
    solver, evaluated with tape ops so gradients reach the model through
    both the new and the previous bundle state.
    """

    def __init__(self, spec: ProblemSpec):
        from . import diff

        self._diff = diff
        self.spec = spec
        mesh = spec.mesh
        self.elements = mesh.elements
        self.n_nodes = mesh.num_nodes
        ed = element_data(mesh)
        alpha = nodal_diffusivity(spec)
        alpha_bar = (alpha[mesh.elements] @ ed.qp_bary.T) @ ed.qp_weights
        self.mass_dt = local_mass(ed) / spec.dt  # (E, v, m)
        self.stiff = local_stiffness(ed, alpha_bar)
        self.qp_bary = ed.qp_bary
        self.qp_weights = ed.qp_weights
        self.volumes = ed.volumes
        self.f_neumann = neumann_load(spec)
        self.free = spec.free_nodes()
        vf = material_values(spec)
        self.vf_qp = None if vf is None else vf[mesh.elements] @ ed.qp_bary.T

    def _gather_elements(self, U):
        d = self._diff
        nb = U.data.shape[0]
        flat = d.gather(U, self.elements.ravel(), axis=1)
        return d.reshape(flat, (nb, self.elements.shape[0], self.elements.shape[1]))

    def _contract_local(self, X, A):
        """Σ_v X[t,e,v]·A[e,v,m] -> (t,e,m) via a loop over local m."""
        d = self._diff
        nb, ne = X.data.shape[0], X.data.shape[1]
        cols = []
        for m in range(A.shape[2]):
            term = d.reduce_sum(X * A[:, :, m][None], axis=2)
            cols.append(d.reshape(term, (nb, ne, 1)))
        return d.concatenate(cols, axis=2)

    def residuals(self, U, T_old: np.ndarray, times: np.ndarray):
        """Free-node residuals, shape (N_TB, N_φ,F), on the tape.

        ``U`` is the bundle tensor (N_TB, N mesh nodes) with Dirichlet rows
        already overwritten; ``T_old`` the window input state (noiseless);
        ``times`` the physical time of each bundle slot.
        """
        d = self._diff
        n_tb = U.data.shape[0]
        if n_tb > 1:
            prev = d.gather(U, np.arange(n_tb - 1), axis=0)
            U_old = d.concatenate([d.tensor(T_old[None, :]), prev], axis=0)
        else:
            U_old = d.tensor(T_old[None, :])

        Ue = self._gather_elements(U)
        Oe = self._gather_elements(U_old)
        contrib = self._contract_local(Ue - Oe, self.mass_dt) \
            + self._contract_local(Ue, self.stiff)

        if self.vf_qp is not None:
            c = self.spec.constants
            nb, ne, nq = n_tb, len(self.volumes), len(self.qp_weights)
            qp_cols = []
            for p in range(nq):
                tq = d.reduce_sum(Ue * self.qp_bary[p][None, None, :], axis=2)
                qp_cols.append(d.reshape(tq, (nb, ne, 1)))
            T_qp = d.concatenate(qp_cols, axis=2)  # (t, e, q)
            tt = times.reshape(-1, 1, 1)
            scale = c["q0"] * c["C"] * (1.0 - self.vf_qp)[None]
            q_qp = d.tensor(scale) * T_qp * d.exp(
                T_qp * d.tensor(-c["C"] / c["t0"] * tt))
            src_cols = []
            for m in range(self.qp_bary.shape[1]):
                w = self.qp_weights * self.qp_bary[:, m]
                sm = d.reduce_sum(q_qp * w[None, None, :], axis=2)
                src_cols.append(d.reshape(sm * d.tensor(self.volumes[None]),
                                          (nb, ne, 1)))
            contrib = contrib - d.concatenate(src_cols, axis=2)

        flat = d.reshape(contrib, (n_tb, self.elements.size))
        res = d.scatter_add(flat, self.elements.ravel(), self.n_nodes, axis=1)
        res = res - d.tensor(self.f_neumann[None, :])
        return d.gather(res, self.free, axis=1)


@dataclass
class Trajectory:
    """Nodal solution history, row n is the state at time n·dt."""

    data: np.ndarray  # (N_t + 1, N_nodes)
    dt: float = 0.01

    @property
    def n_steps(self) -> int:
        return self.data.shape[0] - 1


def solve_trajectory(spec: ProblemSpec) -> Trajectory:
    ws = Workspace(spec)
    T = initial_condition(spec)
    T[ws.fixed] = ws.fixed_values
    out = np.empty((spec.n_steps + 1, spec.mesh.num_nodes))
    out[0] = T
    for n in range(1, spec.n_steps + 1):
        T = ws.step(T, n * spec.dt)
        out[n] = T
    return Trajectory(data=out, dt=spec.dt)


def write_trajectory(traj: Trajectory, path: str | Path):
    rows, cols = traj.data.shape
    with open(path, "wb") as fh:
        fh.write(TRAJECTORY_MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(traj.data, dtype="<f8").tobytes())


def read_trajectory(path: str | Path, dt: float = 0.01) -> Trajectory:
    raw = Path(path).read_bytes()
    if raw[:len(TRAJECTORY_MAGIC)] != TRAJECTORY_MAGIC:
        raise ValueError("not a trajectory file (bad magic)")
    off = len(TRAJECTORY_MAGIC)
    rows, cols = struct.unpack_from("<II", raw, off)
    data = np.frombuffer(raw, dtype="<f8", offset=off + 8, count=rows * cols)
    return Trajectory(data=data.reshape(rows, cols).copy(), dt=dt)
