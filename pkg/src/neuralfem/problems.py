"""Initial-boundary-value problem sampling for the three experiment families.

Experiment 1: linear heat diffusion on L-shaped plates, Gaussian initial
conditions, boundary held at the initial temperature.  Experiment 2:
nonlinear heating of convex plates with an inhomogeneous fibre fraction
field.  Experiment 3: heat-up of 3D hollow cylinders with mixed
Dirichlet/Neumann boundaries.  The four large evaluation problems reuse
these physics on much bigger meshes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import meshgen
from .mesh import DIRICHLET, NEUMANN, Mesh, read_mesh, write_mesh

log = logging.getLogger(__name__)

PROBLEM_FORMAT_VERSION = 1

EXPERIMENTS = ("exp1", "exp2", "exp3")
PROBLEM_TAGS = ("exp1", "exp2", "exp3", "sheet10", "sheet100", "grid", "longcyl")

# physics constants per experiment family
EXP1_CONSTANTS = {"alpha": 5e-2, "t0": 1.0, "temp_scale": 1.0}
EXP2_CONSTANTS = {"alpha_f": 0.1, "alpha_m": 0.01, "q0": 20.0, "C": 0.08,
                  "t0": 1.0, "T0": 100.0, "temp_scale": 100.0}
EXP3_CONSTANTS = {"alpha": 1.0, "t0": 1.0, "T0": 0.0, "h0": 1.0, "temp_scale": 1.0}

N_IC_DEFAULT = 10
N_IC_LARGE = 1000
N_MATERIAL_TERMS = 10
VF_CLAMP = (0.01, 0.99)

DT_DEFAULT = 0.01
N_STEPS_DEFAULT = 100


@dataclass
class ProblemSpec:
    """One fully sampled initial-boundary-value problem."""

    experiment: str  # physics family: exp1 | exp2 | exp3
    mesh: Mesh
    ic_params: np.ndarray  # (N_ic, 5): amplitude, x0, y0, sx, sy
    material_params: np.ndarray  # (N_f, 5): amplitude, kx, ky, dx, dy
    vf0: float
    constants: dict
    dirichlet_values: np.ndarray  # per Dirichlet node, ascending node index
    neumann_flux: dict = field(default_factory=dict)  # facet group -> alpha*h_N
    dt: float = DT_DEFAULT
    n_steps: int = N_STEPS_DEFAULT
    name: str = ""

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def dirichlet_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.mesh.node_tags == DIRICHLET)

    def free_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.mesh.node_tags != DIRICHLET)


def gaussian_field(params: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """Sum of anisotropic Gaussians: a·exp(-(dx²/(2 sx) + dy²/(2 sy)))."""
    out = np.zeros(len(nodes))
    for a, x0, y0, sx, sy in params:
        dx = nodes[:, 0] - x0
        dy = nodes[:, 1] - y0
        out += a * np.exp(-(dx * dx / (2.0 * sx) + dy * dy / (2.0 * sy)))
    return out


def sample_ic_params(rng: np.random.Generator, mesh: Mesh,
                     n_ic: int = N_IC_DEFAULT) -> np.ndarray:
    a = rng.uniform(0.5, 1.0, n_ic)
    centers = mesh.nodes[rng.integers(0, mesh.num_nodes, n_ic), :2]
    sx = rng.uniform(1.0 / 12.0, 1.0 / 6.0, n_ic)
    sy = rng.uniform(1.0 / 12.0, 1.0 / 6.0, n_ic)
    return np.stack([a, centers[:, 0], centers[:, 1], sx, sy], axis=1)


def sample_initial_condition(rng: np.random.Generator, mesh: Mesh,
                             n_ic: int = N_IC_DEFAULT) -> np.ndarray:
    """Nodal values of a random sum of Gaussians centered at mesh nodes."""
    return gaussian_field(sample_ic_params(rng, mesh, n_ic), mesh.nodes)


def material_field(params: np.ndarray, vf0: float, nodes: np.ndarray) -> np.ndarray:
    """Fibre volume fraction: vf0 plus a sum of sine products, clamped."""
    out = np.full(len(nodes), vf0)
    for a, kx, ky, dx, dy in params:
        out += a * np.sin(kx * nodes[:, 0] + dx) * np.sin(ky * nodes[:, 1] + dy)
    n_clamped = int(((out < VF_CLAMP[0]) | (out > VF_CLAMP[1])).sum())
    if n_clamped:
        log.warning("clamped %d of %d V_f samples into %s",
                    n_clamped, len(out), VF_CLAMP)
    return np.clip(out, *VF_CLAMP)


def sample_material_params(rng: np.random.Generator,
                           n_terms: int = N_MATERIAL_TERMS) -> np.ndarray:
    a = rng.uniform(0.0, 1.0 / 20.0, n_terms)
    kx = rng.uniform(0.0, 8.0 * np.pi, n_terms)
    ky = rng.uniform(0.0, 8.0 * np.pi, n_terms)
    dx = rng.uniform(0.0, 2.0 * np.pi, n_terms)
    dy = rng.uniform(0.0, 2.0 * np.pi, n_terms)
    return np.stack([a, kx, ky, dx, dy], axis=1)


def sample_material_field(rng: np.random.Generator, mesh: Mesh) -> np.ndarray:
    return material_field(sample_material_params(rng), 0.5, mesh.nodes)


def diffusivity(v_f, alpha_f: float = 0.1, alpha_m: float = 0.01):
    """Inverse mixture rule for the two-phase thermal diffusivity."""
    v = np.asarray(v_f, dtype=np.float64)
    if np.any(v <= 0.0) or np.any(v >= 1.0):
        raise ValueError("V_f must lie strictly inside (0, 1)")
    out = 1.0 / (v / alpha_f + (1.0 - v) / alpha_m)
    return float(out) if np.isscalar(v_f) else out


def source_term(T, t, v_f, q0: float = 20.0, C: float = 0.08, t0: float = 1.0):
    """Exothermic source q0·(1-V_f)·exp(-C·T·t/t0)·C·T in K/s."""
    return q0 * (1.0 - np.asarray(v_f)) * np.exp(-C * np.asarray(T) * t / t0) \
        * C * np.asarray(T)


def initial_condition(spec: ProblemSpec) -> np.ndarray:
    if spec.experiment == "exp1":
        return gaussian_field(spec.ic_params, spec.mesh.nodes)
    if spec.experiment == "exp2":
        return np.full(spec.mesh.num_nodes, spec.constants["T0"])
    return np.full(spec.mesh.num_nodes, spec.constants["T0"])


def material_values(spec: ProblemSpec) -> np.ndarray | None:
    if spec.experiment != "exp2":
        return None
    return material_field(spec.material_params, spec.vf0, spec.mesh.nodes)


def nodal_diffusivity(spec: ProblemSpec) -> np.ndarray:
    """Diffusivity at every node; constant for experiments 1 and 3."""
    if spec.experiment == "exp2":
        return diffusivity(material_values(spec), spec.constants["alpha_f"],
                           spec.constants["alpha_m"])
    return np.full(spec.mesh.num_nodes, spec.constants["alpha"])


def _finish_spec(experiment: str, mesh: Mesh, ic_params, material_params,
                 name: str) -> ProblemSpec:
    if experiment == "exp1":
        constants = dict(EXP1_CONSTANTS)
        neumann = {}
    elif experiment == "exp2":
        constants = dict(EXP2_CONSTANTS)
        neumann = {}
    else:
        constants = dict(EXP3_CONSTANTS)
        neumann = {"inner": constants["h0"], "outer": 0.0}
    spec = ProblemSpec(experiment=experiment, mesh=mesh,
                       ic_params=np.asarray(ic_params, dtype=np.float64).reshape(-1, 5),
                       material_params=np.asarray(material_params,
                                                  dtype=np.float64).reshape(-1, 5),
                       vf0=0.5, constants=constants,
                       dirichlet_values=np.zeros(0), neumann_flux=neumann, name=name)
    dn = spec.dirichlet_nodes()
    if experiment == "exp1":
        spec.dirichlet_values = gaussian_field(spec.ic_params, mesh.nodes)[dn]
    else:
        spec.dirichlet_values = np.full(len(dn), constants["T0"])
    return spec


def sample_problem(tag: str, rng: np.random.Generator, name: str = "",
                   mesh_cfg=None) -> ProblemSpec:
    """Sample one problem of the given family (training or large variant).

    ``mesh_cfg`` optionally overrides the family's mesh generator config
    (smaller element targets for quick studies, finer for convergence).
    """
    if tag == "exp1":
        mesh = meshgen.generate_lshape(rng, mesh_cfg or meshgen.LShapeConfig())
        return _finish_spec("exp1", mesh, sample_ic_params(rng, mesh), np.zeros((0, 5)),
                            name)
    if tag == "exp2":
        mesh = meshgen.generate_convex_polygon(rng,
                                               mesh_cfg or meshgen.PolygonConfig())
        return _finish_spec("exp2", mesh, np.zeros((0, 5)),
                            sample_material_params(rng), name)
    if tag == "exp3":
        mesh = meshgen.generate_hollow_cylinder(rng,
                                                mesh_cfg or meshgen.CylinderConfig())
        return _finish_spec("exp3", mesh, np.zeros((0, 5)), np.zeros((0, 5)), name)
    if tag in ("sheet10", "sheet100"):
        mesh = meshgen.generate_corrugated_sheet(10 if tag == "sheet10" else 100)
        return _finish_spec("exp1", mesh, sample_ic_params(rng, mesh, N_IC_LARGE),
                            np.zeros((0, 5)), name)
    if tag == "grid":
        mesh = meshgen.generate_grid_plate()
        return _finish_spec("exp2", mesh, np.zeros((0, 5)),
                            sample_material_params(rng), name)
    if tag == "longcyl":
        mesh = meshgen.generate_long_cylinder()
        return _finish_spec("exp3", mesh, np.zeros((0, 5)), np.zeros((0, 5)), name)
    raise ValueError(f"unknown problem tag {tag!r}")


def build_problem_pool(tag: str, count: int, seed: int,
                       mesh_cfg=None) -> list[ProblemSpec]:
    """Fixed geometry pool: problem i is a pure function of (seed, i)."""
    return [sample_problem(tag, np.random.default_rng([seed, i]),
                           name=f"{tag}-s{seed}-{i:03d}", mesh_cfg=mesh_cfg)
            for i in range(count)]


def train_val_split(count: int, seed: int,
                    train_frac: float = 0.75) -> tuple[np.ndarray, np.ndarray]:
    """Random split, re-drawn per repetition seed over a fixed pool."""
    perm = np.random.default_rng([seed, 0x5EED]).permutation(count)
    k = int(round(train_frac * count))
    return np.sort(perm[:k]), np.sort(perm[k:])


def resample_initial_conditions(spec: ProblemSpec,
                                rng: np.random.Generator) -> ProblemSpec:
    """Fresh Gaussian ICs on the same mesh (per-repetition randomization)."""
    if spec.experiment != "exp1":
        return spec
    ic = sample_ic_params(rng, spec.mesh, len(spec.ic_params))
    new = replace(spec, ic_params=ic)
    new.dirichlet_values = gaussian_field(ic, spec.mesh.nodes)[new.dirichlet_nodes()]
    return new


def save_problem(spec: ProblemSpec, path: str | Path, mesh_path: str | Path = None):
    """Versioned JSON next to its mesh file (written if absent)."""
    path = Path(path)
    if mesh_path is None:
        mesh_path = path.with_suffix("").name + ".mesh.json"
    mesh_file = path.parent / mesh_path
    if not mesh_file.exists():
        write_mesh(spec.mesh, mesh_file)
    doc = {
        "version": PROBLEM_FORMAT_VERSION,
        "experiment": spec.experiment,
        "name": spec.name,
        "mesh_path": str(mesh_path),
        "ic_params": spec.ic_params.tolist(),
        "material_params": spec.material_params.tolist(),
        "vf0": spec.vf0,
        "constants": spec.constants,
        "dirichlet_values": spec.dirichlet_values.tolist(),
        "neumann_flux": spec.neumann_flux,
        "dt": spec.dt,
        "n_steps": spec.n_steps,
    }
    path.write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def load_problem(path: str | Path) -> ProblemSpec:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("version") != PROBLEM_FORMAT_VERSION:
        raise ValueError(f"unsupported problem format version {doc.get('version')!r}")
    mesh = read_mesh(path.parent / doc["mesh_path"])
    return ProblemSpec(
        experiment=doc["experiment"], mesh=mesh,
        ic_params=np.array(doc["ic_params"], dtype=np.float64).reshape(-1, 5),
        material_params=np.array(doc["material_params"],
                                 dtype=np.float64).reshape(-1, 5),
        vf0=float(doc["vf0"]), constants=doc["constants"],
        dirichlet_values=np.array(doc["dirichlet_values"], dtype=np.float64),
        neumann_flux=doc["neumann_flux"], dt=float(doc["dt"]),
        n_steps=int(doc["n_steps"]), name=doc.get("name", ""),
    )
