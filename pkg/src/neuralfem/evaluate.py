"""Error metrics, comparison tables, the timing harness, and field plots."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


def _rows(traj) -> np.ndarray:
    if isinstance(traj, np.ndarray):
        data = traj
    else:
        data = np.asarray(getattr(traj, "data", traj))
    if data.ndim != 2:
        raise ValueError(f"trajectory must be 2D, got shape {data.shape}")
    return data


def normalized_l2(predicted, truth) -> float:
    """Relative trajectory error sqrt(Σ|T̃−T|²)/sqrt(Σ|T|²).

    The sum runs over time steps 1..N_t (the shared initial row is
    excluded) and all nodes.
    """
    pred, ref = _rows(predicted), _rows(truth)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    diff = pred[1:] - ref[1:]
    denom = float(np.sqrt(np.sum(ref[1:] * ref[1:])))
    if denom == 0.0:
        raise ValueError("reference trajectory is identically zero")
    return float(np.sqrt(np.sum(diff * diff))) / denom


def relative_error_field(predicted, truth, n: int) -> np.ndarray:
    """Nodal error at step ``n`` scaled by the truth's global range."""
    pred, ref = _rows(predicted), _rows(truth)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    span = float(ref.max() - ref.min())
    if span == 0.0:
        raise ValueError("constant reference trajectory has no range")
    return (pred[n] - ref[n]) / span


@dataclass
class EvalRow:
    """Aggregated accuracy of one method on one experiment."""

    method: str
    experiment: str
    mu: float
    sigma: float
    n_repetitions: int


@dataclass
class EvalReport:
    """Comparison table plus the per-run numbers behind it."""

    rows: list = field(default_factory=list)
    per_run: dict = field(default_factory=dict)  # (method, exp, rep) -> mean
    provenance: dict = field(default_factory=dict)

    def format(self) -> str:
        """Rows as 'method experiment mu±sigma (x1e3)' text lines."""
        lines = ["method          experiment  L2 x1e3 (mu +- sigma)  reps"]
        for r in self.rows:
            lines.append(f"{r.method:<15} {r.experiment:<11} "
                         f"{1e3 * r.mu:8.2f} +- {1e3 * r.sigma:6.2f}   "
                         f"{r.n_repetitions}")
        return "\n".join(lines)


def compare(per_run_errors: dict, provenance: dict | None = None) -> EvalReport:
    """Aggregate per-repetition error lists into a comparison table.

    ``per_run_errors`` maps (method, experiment, repetition) to an
    iterable of per-problem normalized L2 errors.  Each repetition
    contributes its problem mean; mu/sigma are over repetitions.
    """
    per_run = {}
    groups: dict = {}
    for (method, experiment, rep), errors in sorted(per_run_errors.items()):
        errors = np.asarray(list(errors), dtype=float)
        if errors.size == 0 or np.any(errors < 0):
            raise ValueError(f"bad error list for {(method, experiment, rep)}")
        mean = float(errors.mean())
        per_run[(method, experiment, rep)] = mean
        groups.setdefault((method, experiment), []).append(mean)
    rows = [EvalRow(method=m, experiment=e, mu=float(np.mean(v)),
                    sigma=float(np.std(v)), n_repetitions=len(v))
            for (m, e), v in sorted(groups.items())]
    return EvalReport(rows=rows, per_run=per_run,
                      provenance=dict(provenance or {}))


def bench(model, spec, repeats: int = 1) -> dict:
    """Wall-clock rollout vs reference solve on an already built problem.

    Mesh and problem generation are excluded by construction (the
    problem is prepared by the caller); timings cover the solves only.
    """
    from . import fem, mgn

    t_model = t_fem = float("inf")
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        mgn.rollout(spec, model)
        t_model = min(t_model, time.perf_counter() - t0)
        t0 = time.perf_counter()
        fem.solve_trajectory(spec)
        t_fem = min(t_fem, time.perf_counter() - t0)
    result = {"problem": spec.name, "nodes": spec.mesh.num_nodes,
              "elements": spec.mesh.num_elements,
              "rollout_seconds": t_model, "fem_seconds": t_fem,
              "fem_over_rollout": t_fem / t_model,
              "scope": "solve only; mesh and problem generation excluded"}
    log.info("bench %s: rollout %.3fs, fem %.3fs (ratio %.2f)",
             spec.name, t_model, t_fem, result["fem_over_rollout"])
    return result


def _axial_cut(mesh, values: np.ndarray):
    """Nodes of a 3D mesh on the plane y=0, as (x, z) with their values."""
    span = float(np.abs(mesh.nodes).max())
    on_plane = np.abs(mesh.nodes[:, 1]) <= 1e-9 * span
    pts = mesh.nodes[on_plane][:, [0, 2]]
    if len(pts) < 3:
        raise ValueError("no axial cut: mesh has no nodes on the y=0 plane")
    return pts, values[on_plane]


def plot_field(mesh, values: np.ndarray, path: str | Path, title: str = ""):
    """Color-mapped nodal field as an SVG file.

    2D meshes render their own triangles; 3D meshes are cut by the
    axial plane y=0 and the section is re-triangulated for display.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    values = np.asarray(values, dtype=float)
    if values.shape != (mesh.num_nodes,):
        raise ValueError(f"field shape {values.shape} does not match "
                         f"{mesh.num_nodes} nodes")
    fig, ax = plt.subplots(figsize=(7.0, 5.0))
    if mesh.dim == 2:
        tpc = ax.tripcolor(mesh.nodes[:, 0], mesh.nodes[:, 1], mesh.elements,
                           values, shading="gouraud")
    else:
        from scipy.spatial import Delaunay

        pts, vals = _axial_cut(mesh, values)
        tri = Delaunay(pts)
        # drop triangles spanning the hollow core (centroid below the
        # smallest sampled radius)
        cz = np.abs(pts[tri.simplices, 1].mean(axis=1))
        keep = cz >= np.abs(pts[:, 1]).min() - 1e-12
        tpc = ax.tripcolor(pts[:, 0], pts[:, 1], tri.simplices[keep], vals,
                           shading="gouraud")
    vmin, vmax = float(values.min()), float(values.max())
    fig.colorbar(tpc, ax=ax, label=f"min {vmin:.4g}, max {vmax:.4g}")
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    path = Path(path)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return path
