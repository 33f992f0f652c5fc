"""Simplex mesh container, topology checks and versioned JSON persistence."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# node / facet classification
DIRICHLET = 0
NEUMANN = 1
INTERIOR = 2

TAG_NAMES = {DIRICHLET: "dirichlet", NEUMANN: "neumann", INTERIOR: "interior"}
TAG_IDS = {v: k for k, v in TAG_NAMES.items()}

MESH_FORMAT_VERSION = 1


class MeshError(ValueError):
    """Invalid or inconsistent mesh data."""


@dataclass
class Facet:
    """One boundary facet: an edge (2D) or a triangle (3D)."""

    nodes: tuple[int, ...]
    tag: int  # DIRICHLET or NEUMANN
    group: str = "boundary"


@dataclass
class Mesh:
    """Unstructured simplex mesh (triangles in 2D, tetrahedra in 3D).

    ``nodes`` is (N, dim) in meters, ``elements`` (E, dim+1) node indices
    with positive signed volume, ``boundary_facets`` the tagged boundary
    and ``node_tags`` one classification per node.
    """

    dim: int
    nodes: np.ndarray
    elements: np.ndarray
    boundary_facets: list[Facet] = field(default_factory=list)
    node_tags: np.ndarray = field(default=None)
    meta: dict = field(default_factory=dict)  # generator provenance, not serialized

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.float64)
        self.elements = np.asarray(self.elements, dtype=np.int64)
        if self.node_tags is None:
            self.node_tags = np.full(len(self.nodes), INTERIOR, dtype=np.int8)
        else:
            self.node_tags = np.asarray(self.node_tags, dtype=np.int8)

    @property
    def num_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def num_elements(self) -> int:
        return self.elements.shape[0]

    def element_volumes(self) -> np.ndarray:
        """Signed areas (2D) or volumes (3D); positive on a valid mesh."""
        pts = self.nodes[self.elements]
        if self.dim == 2:
            e1 = pts[:, 1] - pts[:, 0]
            e2 = pts[:, 2] - pts[:, 0]
            return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        e1 = pts[:, 1] - pts[:, 0]
        e2 = pts[:, 2] - pts[:, 0]
        e3 = pts[:, 3] - pts[:, 0]
        return np.einsum("ij,ij->i", np.cross(e1, e2), e3) / 6.0

    def facet_areas(self, facets: list[Facet] | None = None) -> np.ndarray:
        """Lengths (2D) or areas (3D) of boundary facets."""
        facets = self.boundary_facets if facets is None else facets
        idx = np.array([f.nodes for f in facets], dtype=np.int64)
        pts = self.nodes[idx]
        if self.dim == 2:
            return np.linalg.norm(pts[:, 1] - pts[:, 0], axis=1)
        return 0.5 * np.linalg.norm(
            np.cross(pts[:, 1] - pts[:, 0], pts[:, 2] - pts[:, 0]), axis=1)

    def edge_array(self) -> np.ndarray:
        """Unique undirected element edges, ascending pairs, lexsorted."""
        n_loc = self.elements.shape[1]
        pairs = []
        for a in range(n_loc):
            for b in range(a + 1, n_loc):
                pairs.append(self.elements[:, [a, b]])
        edges = np.concatenate(pairs, axis=0)
        edges = np.sort(edges, axis=1)
        return np.unique(edges, axis=0)

    def all_facets(self) -> tuple[np.ndarray, np.ndarray]:
        """All element facets (sorted node tuples) and their multiplicity."""
        n_loc = self.elements.shape[1]
        combos = [[j for j in range(n_loc) if j != i] for i in range(n_loc)]
        facets = np.concatenate([self.elements[:, c] for c in combos], axis=0)
        facets = np.sort(facets, axis=1)
        uniq, counts = np.unique(facets, axis=0, return_counts=True)
        return uniq, counts

    def orient_positive(self):
        """Swap the last two local nodes of any inverted element."""
        vol = self.element_volumes()
        bad = vol < 0
        if bad.any():
            self.elements[bad] = self.elements[bad][:, [0, 1, 3, 2] if self.dim == 3
                                                    else [0, 2, 1]]

    def validate(self):
        """Raise MeshError on any violated structural invariant."""
        n = self.num_nodes
        if self.elements.size and (self.elements.min() < 0 or self.elements.max() >= n):
            raise MeshError("element refers to a node index out of range")
        for f in self.boundary_facets:
            if min(f.nodes) < 0 or max(f.nodes) >= n:
                raise MeshError("boundary facet refers to a node index out of range")
        vols = self.element_volumes()
        if (vols <= 0).any():
            raise MeshError(f"{int((vols <= 0).sum())} elements with non-positive volume")

        uniq, counts = self.all_facets()
        if counts.max(initial=1) > 2:
            raise MeshError("a facet is shared by more than two elements")
        boundary = {tuple(f) for f in uniq[counts == 1]}
        listed = {tuple(sorted(f.nodes)) for f in self.boundary_facets}
        if boundary != listed:
            raise MeshError("boundary facet list does not match element topology")

        dir_nodes = {i for f in self.boundary_facets if f.tag == DIRICHLET for i in f.nodes}
        neu_nodes = {i for f in self.boundary_facets if f.tag == NEUMANN for i in f.nodes}
        for v in range(n):
            expect = (DIRICHLET if v in dir_nodes
                      else NEUMANN if v in neu_nodes else INTERIOR)
            if self.node_tags[v] != expect:
                raise MeshError(
                    f"node {v} tagged {TAG_NAMES[int(self.node_tags[v])]}, "
                    f"expected {TAG_NAMES[expect]}")


def tag_nodes_from_facets(num_nodes: int, facets: list[Facet]) -> np.ndarray:
    """Node tags implied by facet tags; Dirichlet wins at shared corners."""
    tags = np.full(num_nodes, INTERIOR, dtype=np.int8)
    for f in facets:
        if f.tag == NEUMANN:
            for v in f.nodes:
                tags[v] = NEUMANN
    for f in facets:
        if f.tag == DIRICHLET:
            for v in f.nodes:
                tags[v] = DIRICHLET
    return tags


def write_mesh(mesh: Mesh, path: str | Path):
    """Versioned JSON, full double precision, byte-stable for fixed input."""
    doc = {
        "version": MESH_FORMAT_VERSION,
        "dim": mesh.dim,
        "nodes": [list(map(float, p)) for p in mesh.nodes],
        "elements": [list(map(int, e)) for e in mesh.elements],
        "boundary_facets": [
            {"nodes": list(map(int, f.nodes)), "tag": TAG_NAMES[f.tag], "group": f.group}
            for f in mesh.boundary_facets
        ],
        "node_tags": [TAG_NAMES[int(t)] for t in mesh.node_tags],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def read_mesh(path: str | Path) -> Mesh:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != MESH_FORMAT_VERSION:
        raise MeshError(f"unsupported mesh format version {doc.get('version')!r}")
    facets = [Facet(tuple(f["nodes"]), TAG_IDS[f["tag"]], f.get("group", "boundary"))
              for f in doc["boundary_facets"]]
    return Mesh(
        dim=int(doc["dim"]),
        nodes=np.array(doc["nodes"], dtype=np.float64),
        elements=np.array(doc["elements"], dtype=np.int64),
        boundary_facets=facets,
        node_tags=np.array([TAG_IDS[t] for t in doc["node_tags"]], dtype=np.int8),
    )
