"""Mesh generators for the benchmark geometries.

2D domains are meshed by overlaying a jittered hexagonal point lattice on
the polygon interior, appending boundary points resampled at the target
spacing, Laplacian-smoothing the interior and taking the Delaunay
triangulation restricted to the domain.  3D hollow cylinders use a
structured hex grid split into six tetrahedra per cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import shapely
from scipy.spatial import Delaunay, ConvexHull, cKDTree
from shapely.geometry import Polygon

from .mesh import DIRICHLET, NEUMANN, Facet, Mesh, tag_nodes_from_facets

# triangle count windows observed across the training pools
LSHAPE_ELEMENT_WINDOW = (155, 524)
POLYGON_ELEMENT_WINDOW = (148, 1122)

# fixed spacings reproducing the large benchmark meshes
SHEET_SPACING = 0.069
GRID_SPACING = 0.0340

# corrugated sheet profile: one period is 3 m long, 0.5 m thick plate
SHEET_PERIOD = 3.0
SHEET_THICKNESS = 0.5
SHEET_AMPLITUDE = 0.75

# grid plate: 4 m square, 10 x 10 square holes
GRID_SIDE = 4.0
GRID_HOLES_PER_ROW = 10
GRID_HOLE_SPACING = 0.175
GRID_HOLE_SIDE = (GRID_SIDE - 11 * GRID_HOLE_SPACING) / GRID_HOLES_PER_ROW

_LATTICE_TRI_AREA = math.sqrt(3.0) / 4.0  # unit-spacing equilateral triangle


class MeshGenerationError(RuntimeError):
    """Triangulation failed to meet its size or coverage contract."""


def _resample_loop(loop: np.ndarray, h: float) -> np.ndarray:
    """Subdivide each polygon edge to spacing <= h, keeping all vertices."""
    pts = []
    m = len(loop)
    for i in range(m):
        a = loop[i]
        b = loop[(i + 1) % m]
        n_seg = max(1, int(round(np.linalg.norm(b - a) / h)))
        t = np.arange(n_seg, dtype=np.float64)[:, None] / n_seg
        pts.append(a + t * (b - a))
    return np.concatenate(pts, axis=0)


def _hex_lattice(bounds: tuple, h: float, jitter: float = 0.08) -> np.ndarray:
    """Jittered triangular lattice covering the bounding box."""
    minx, miny, maxx, maxy = bounds
    dy = h * math.sqrt(3.0) / 2.0
    rows = np.arange(math.floor(miny / dy) - 1, math.ceil(maxy / dy) + 2)
    cols = np.arange(math.floor(minx / h) - 1, math.ceil(maxx / h) + 2)
    jj, ii = np.meshgrid(rows, cols, indexing="ij")
    x = ii * h + (jj % 2) * (h / 2.0)
    y = jj * dy
    pts = np.stack([x.ravel(), y.ravel()], axis=1)
    rng = np.random.default_rng(1234)  # fixed: generator must be deterministic
    return pts + rng.uniform(-jitter * h, jitter * h, size=pts.shape)


def _domain_simplices(points: np.ndarray, polygon: Polygon) -> tuple:
    tri = Delaunay(points)
    cent = points[tri.simplices].mean(axis=1)
    keep = shapely.contains_xy(polygon, cent[:, 0], cent[:, 1])
    return tri.simplices[keep], tri


def _tri_areas(pts: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    p = pts[simplices]
    return 0.5 * np.abs(
        (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
        - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))


def _repair_slivers(pts: np.ndarray, simplices: np.ndarray, h: float) -> np.ndarray:
    """Remove near-degenerate triangles from collinear boundary triples.

    A sliver's longest edge chords past its middle vertex; flipping that
    edge against the neighboring triangle (or dropping the sliver when the
    chord is unshared) restores a conforming triangulation.
    """
    area_tol = 1e-10 * h * h
    for _ in range(10):
        areas = _tri_areas(pts, simplices)
        bad = np.flatnonzero(areas < area_tol)
        if bad.size == 0:
            return simplices
        edge_map = {}
        for t, tri in enumerate(simplices):
            for a, b in ((0, 1), (1, 2), (2, 0)):
                edge_map.setdefault(tuple(sorted((tri[a], tri[b]))), []).append(t)
        tris = [list(t) for t in simplices]
        drop = set()
        for t in bad:
            if t in drop:
                continue
            v = simplices[t]
            p = pts[v]
            lens = [np.sum((p[(a + 1) % 3] - p[a]) ** 2) for a in range(3)]
            m = (int(np.argmax(lens)) + 2) % 3  # vertex opposite the chord
            chord = tuple(sorted((v[(m + 1) % 3], v[(m + 2) % 3])))
            others = [x for x in edge_map.get(chord, []) if x != t and x not in drop]
            drop.add(int(t))
            if others:
                n = others[0]
                far = [x for x in tris[n] if x not in chord][0]
                tris.append([chord[0], int(v[m]), far])
                tris.append([int(v[m]), chord[1], far])
                drop.add(n)
        simplices = np.array([tri for i, tri in enumerate(tris) if i not in drop],
                             dtype=np.int64)
    raise MeshGenerationError("sliver repair did not converge")


def triangulate(loops: list[np.ndarray], h: float, *, clearance: float = 0.68,
                smooth_iters: int = 2, max_area: float | None = None,
                max_refine_rounds: int = 8) -> Mesh:
    """Mesh the polygon bounded by ``loops`` (outer ring first, then holes).

    All loop vertices are preserved as mesh nodes.  Elements exceeding
    ``max_area`` (default 1.5 lattice triangles) are split by centroid
    insertion.  The result covers the polygon exactly; any coverage gap
    raises MeshGenerationError.
    """
    polygon = Polygon(loops[0], [lp for lp in loops[1:]])
    if not polygon.is_valid or polygon.area <= 0:
        raise MeshGenerationError("invalid polygon (self-intersecting or empty)")
    if max_area is None:
        max_area = 1.5 * _LATTICE_TRI_AREA * h * h

    bdry = np.concatenate([_resample_loop(np.asarray(lp, dtype=np.float64), h)
                           for lp in loops], axis=0)
    n_bdry = len(bdry)

    lattice = _hex_lattice(polygon.bounds, h)
    inside = shapely.contains_xy(polygon, lattice[:, 0], lattice[:, 1])
    lattice = lattice[inside]
    if len(lattice):
        dist, _ = cKDTree(bdry).query(lattice)
        lattice = lattice[dist >= clearance * h]
    pts = np.concatenate([bdry, lattice], axis=0)

    for _ in range(smooth_iters):
        simplices, _ = _domain_simplices(pts, polygon)
        n = len(pts)
        deg = np.zeros(n)
        acc = np.zeros((n, 2))
        for a, b in ((0, 1), (1, 2), (2, 0)):
            np.add.at(acc, simplices[:, a], pts[simplices[:, b]])
            np.add.at(acc, simplices[:, b], pts[simplices[:, a]])
            np.add.at(deg, simplices[:, a], 1.0)
            np.add.at(deg, simplices[:, b], 1.0)
        movable = (np.arange(n) >= n_bdry) & (deg > 0)
        pts[movable] = acc[movable] / deg[movable, None]

    for _ in range(max_refine_rounds):
        simplices, _ = _domain_simplices(pts, polygon)
        area = _tri_areas(pts, simplices)
        big = area > max_area
        if not big.any():
            break
        pts = np.concatenate([pts, pts[simplices[big]].mean(axis=1)], axis=0)
    else:
        raise MeshGenerationError("area refinement did not converge")
    simplices = _repair_slivers(pts, simplices, h)

    # drop points not referenced by any kept triangle
    used = np.zeros(len(pts), dtype=bool)
    used[simplices.ravel()] = True
    if not used[:n_bdry].all():
        raise MeshGenerationError("boundary point lost from triangulation")
    remap = np.cumsum(used) - 1
    mesh = Mesh(dim=2, nodes=pts[used], elements=remap[simplices])
    mesh.orient_positive()

    uniq, counts = mesh.all_facets()
    mesh.boundary_facets = [Facet(tuple(int(v) for v in f), DIRICHLET, "boundary")
                            for f in uniq[counts == 1]]
    mesh.node_tags = tag_nodes_from_facets(mesh.num_nodes, mesh.boundary_facets)

    covered = float(mesh.element_volumes().sum())
    if abs(covered - polygon.area) > 1e-6 * polygon.area:
        raise MeshGenerationError(
            f"triangulation covers {covered:.6g} of {polygon.area:.6g} target area")
    return mesh


def _sized_triangulation(loops, area: float, n_target: int, window: tuple,
                         attempts: int = 5) -> Mesh:
    """Pick the lattice spacing for ~n_target elements inside the window."""
    h = math.sqrt(area / (_LATTICE_TRI_AREA * n_target))
    last = None
    for _ in range(attempts):
        mesh = triangulate(loops, h)
        last = mesh.num_elements
        if window[0] <= last <= window[1]:
            mesh.meta["spacing"] = h
            return mesh
        h *= math.sqrt(last / n_target)
    raise MeshGenerationError(
        f"could not reach {window} elements (last attempt {last})")


@dataclass(frozen=True)
class LShapeConfig:
    """Sampling ranges for the L-shaped plates."""

    length: tuple = (0.5, 1.0)
    height: tuple = (0.5, 1.0)
    cut_frac_x: tuple = (1.0 / 3.0, 2.0 / 3.0)
    cut_frac_y: tuple = (1.0 / 3.0, 2.0 / 3.0)
    element_target: tuple = (230, 440)
    element_window: tuple = LSHAPE_ELEMENT_WINDOW


def generate_lshape(rng: np.random.Generator, cfg: LShapeConfig = LShapeConfig()) -> Mesh:
    """Rectangle with one rectangular corner cut removed, all-Dirichlet."""
    length = rng.uniform(*cfg.length)
    height = rng.uniform(*cfg.height)
    ax = rng.uniform(*cfg.cut_frac_x) * length
    ay = rng.uniform(*cfg.cut_frac_y) * height
    corner = int(rng.integers(4))
    n_target = int(rng.integers(cfg.element_target[0], cfg.element_target[1] + 1))

    outline = {
        0: [(ax, 0), (length, 0), (length, height), (0, height), (0, ay), (ax, ay)],
        1: [(0, 0), (length, 0), (length, ay), (length - ax, ay),
            (length - ax, height), (0, height)],
        2: [(0, 0), (length, 0), (length, height), (length - ax, height),
            (length - ax, height - ay), (0, height - ay)],
        3: [(0, 0), (length, 0), (length, height), (ax, height), (ax, height - ay),
            (0, height - ay)],
    }[corner]
    loop = np.array(outline, dtype=np.float64)
    area = Polygon(loop).area
    mesh = _sized_triangulation([loop], area, n_target, cfg.element_window)
    mesh.meta.update(kind="lshape", length=length, height=height, cut=(ax, ay),
                     corner=corner)
    return mesh


@dataclass(frozen=True)
class PolygonConfig:
    """Sampling ranges for the random convex plates."""

    n_points: int = 7
    element_target: tuple = (250, 900)
    element_window: tuple = POLYGON_ELEMENT_WINDOW


def generate_convex_polygon(rng: np.random.Generator,
                            cfg: PolygonConfig = PolygonConfig()) -> Mesh:
    """Convex hull of uniform points in the unit square, all-Dirichlet."""
    n_target = int(rng.integers(cfg.element_target[0], cfg.element_target[1] + 1))
    for _ in range(100):
        pts = rng.uniform(0.0, 1.0, size=(cfg.n_points, 2))
        hull = ConvexHull(pts)
        if hull.volume > 0.05:  # reject near-degenerate draws
            break
    else:
        raise MeshGenerationError("could not sample a non-degenerate hull")
    loop = pts[hull.vertices]  # counter-clockwise
    mesh = _sized_triangulation([loop], hull.volume, n_target, cfg.element_window)
    mesh.meta.update(kind="polygon", vertices=loop.tolist())
    return mesh


def _sheet_outline(n_periods: int, h: float) -> np.ndarray:
    """Closed outline of the corrugated sheet cross-section."""
    width = SHEET_PERIOD * n_periods
    # x step chosen so arc spacing along the steepest part stays near h
    slope_max = SHEET_AMPLITUDE * 2.0 * math.pi / SHEET_PERIOD
    dx = h / math.sqrt(1.0 + slope_max * slope_max)
    n_samp = int(math.ceil(width / dx))
    x = np.linspace(0.0, width, n_samp + 1)
    y = SHEET_AMPLITUDE * np.cos(2.0 * math.pi * x / SHEET_PERIOD)
    dy = -SHEET_AMPLITUDE * (2.0 * math.pi / SHEET_PERIOD) * np.sin(
        2.0 * math.pi * x / SHEET_PERIOD)
    norm = np.sqrt(1.0 + dy * dy)
    nx, ny = -dy / norm, 1.0 / norm
    half = SHEET_THICKNESS / 2.0
    upper = np.stack([x + half * nx, y + half * ny], axis=1)
    lower = np.stack([x - half * nx, y - half * ny], axis=1)
    return np.concatenate([lower, upper[::-1]], axis=0)


def generate_corrugated_sheet(n_periods: int, h: float = SHEET_SPACING) -> Mesh:
    """Cosine-corrugated plate cross-section with ``n_periods`` waves."""
    if n_periods < 1:
        raise MeshGenerationError("need at least one corrugation period")
    mesh = triangulate([_sheet_outline(n_periods, h)], h)
    mesh.meta.update(kind="sheet", n_periods=n_periods, spacing=h)
    return mesh


def generate_grid_plate(h: float = GRID_SPACING) -> Mesh:
    """Square plate with a 10 x 10 grid of square holes, all-Dirichlet."""
    outer = np.array([(0, 0), (GRID_SIDE, 0), (GRID_SIDE, GRID_SIDE),
                      (0, GRID_SIDE)], dtype=np.float64)
    holes = []
    s, g = GRID_HOLE_SIDE, GRID_HOLE_SPACING
    for i in range(GRID_HOLES_PER_ROW):
        for j in range(GRID_HOLES_PER_ROW):
            x0 = g + i * (s + g)
            y0 = g + j * (s + g)
            holes.append(np.array([(x0, y0), (x0 + s, y0), (x0 + s, y0 + s),
                                   (x0, y0 + s)], dtype=np.float64))
    mesh = triangulate([outer] + holes, h)
    mesh.meta.update(kind="grid_plate", spacing=h, hole_side=s)
    return mesh


def build_hollow_cylinder(length: float, r_outer: float, r_inner: float,
                          n_x: int = 20, n_r: int = 2, n_theta: int = 16) -> Mesh:
    """Structured tet mesh of a hollow cylinder along the x axis.

    Ends (x = 0, x = length) are Dirichlet; inner and outer lateral
    surfaces are Neumann groups "inner" / "outer".
    """
    if not (0 < r_inner < r_outer):
        raise MeshGenerationError("need 0 < r_inner < r_outer")
    if min(n_x, n_r) < 1 or n_theta < 3:
        raise MeshGenerationError("cylinder resolution too coarse")
    xs = np.linspace(0.0, length, n_x + 1)
    rs = np.linspace(r_inner, r_outer, n_r + 1)
    thetas = 2.0 * np.pi * np.arange(n_theta) / n_theta

    def nid(i, j, k):
        return (i * (n_r + 1) + j) * n_theta + (k % n_theta)

    xg, rg, tg = np.meshgrid(xs, rs, thetas, indexing="ij")
    nodes = np.stack([xg.ravel(), (rg * np.cos(tg)).ravel(),
                      (rg * np.sin(tg)).ravel()], axis=1)

    # Kuhn split: six tets per hex sharing the main diagonal c0-c7, where
    # corner bits are (x, r, theta); consistent diagonals keep faces conforming
    corner_paths = [(0, 1, 3, 7), (0, 1, 5, 7), (0, 2, 3, 7),
                    (0, 2, 6, 7), (0, 4, 5, 7), (0, 4, 6, 7)]
    elements = []
    for i in range(n_x):
        for j in range(n_r):
            for k in range(n_theta):
                c = [nid(i + (b & 1), j + ((b >> 1) & 1), k + ((b >> 2) & 1))
                     for b in range(8)]
                for path in corner_paths:
                    elements.append([c[b] for b in path])
    mesh = Mesh(dim=3, nodes=nodes, elements=np.array(elements, dtype=np.int64))
    mesh.orient_positive()

    uniq, counts = mesh.all_facets()
    tol = 1e-9 * max(length, r_outer)
    facets = []
    for f in uniq[counts == 1]:
        p = nodes[f]
        x = p[:, 0]
        r = np.hypot(p[:, 1], p[:, 2])
        if np.all(np.abs(x) < tol):
            facets.append(Facet(tuple(int(v) for v in f), DIRICHLET, "x0"))
        elif np.all(np.abs(x - length) < tol):
            facets.append(Facet(tuple(int(v) for v in f), DIRICHLET, "xL"))
        elif np.all(np.abs(r - r_inner) < tol):
            facets.append(Facet(tuple(int(v) for v in f), NEUMANN, "inner"))
        elif np.all(np.abs(r - r_outer) < tol):
            facets.append(Facet(tuple(int(v) for v in f), NEUMANN, "outer"))
        else:
            raise MeshGenerationError("boundary facet on no recognized surface")
    mesh.boundary_facets = facets
    mesh.node_tags = tag_nodes_from_facets(mesh.num_nodes, facets)
    mesh.meta.update(kind="cylinder", length=length, r_outer=r_outer,
                     r_inner=r_inner, n_x=n_x, n_r=n_r, n_theta=n_theta)
    return mesh


@dataclass(frozen=True)
class CylinderConfig:
    """Sampling ranges for the hollow cylinder family."""

    length: tuple = (4.0, 5.0)
    r_outer: tuple = (0.8, 1.0)
    a_inner: tuple = (0.6, 0.8)  # r_inner = a_inner * r_outer
    n_x: int = 20
    n_r: int = 2
    n_theta: int = 16


def generate_hollow_cylinder(rng: np.random.Generator,
                             cfg: CylinderConfig = CylinderConfig()) -> Mesh:
    length = rng.uniform(*cfg.length)
    r_outer = rng.uniform(*cfg.r_outer)
    r_inner = rng.uniform(*cfg.a_inner) * r_outer
    return build_hollow_cylinder(length, r_outer, r_inner,
                                 n_x=cfg.n_x, n_r=cfg.n_r, n_theta=cfg.n_theta)


def generate_long_cylinder(cfg: CylinderConfig = CylinderConfig()) -> Mesh:
    """Fixed out-of-distribution cylinder, 200 m long, same cell aspect."""
    length, r_outer, a_inner = 200.0, 0.9, 0.7
    n_x = int(round(cfg.n_x * length / (0.5 * (cfg.length[0] + cfg.length[1]))))
    return build_hollow_cylinder(length, r_outer, a_inner * r_outer,
                                 n_x=n_x, n_r=cfg.n_r, n_theta=cfg.n_theta)


def unit_square_mesh(n: int) -> Mesh:
    """Structured n x n unit square (2 n^2 triangles), all-Dirichlet."""
    xs = np.linspace(0.0, 1.0, n + 1)
    xg, yg = np.meshgrid(xs, xs, indexing="ij")
    nodes = np.stack([xg.ravel(), yg.ravel()], axis=1)

    def nid(i, j):
        return i * (n + 1) + j

    elements = []
    for i in range(n):
        for j in range(n):
            a, b = nid(i, j), nid(i + 1, j)
            c, d = nid(i + 1, j + 1), nid(i, j + 1)
            elements.append([a, b, c])
            elements.append([a, c, d])
    mesh = Mesh(dim=2, nodes=nodes, elements=np.array(elements, dtype=np.int64))
    mesh.orient_positive()
    uniq, counts = mesh.all_facets()
    mesh.boundary_facets = [Facet(tuple(int(v) for v in f), DIRICHLET, "boundary")
                            for f in uniq[counts == 1]]
    mesh.node_tags = tag_nodes_from_facets(mesh.num_nodes, mesh.boundary_facets)
    mesh.meta.update(kind="unit_square", n=n)
    return mesh


def mesh_quality(mesh: Mesh) -> dict:
    """Summary statistics used by the generator tests."""
    vols = mesh.element_volumes()
    out = {"num_elements": mesh.num_elements, "num_nodes": mesh.num_nodes,
           "min_volume": float(vols.min()), "max_volume": float(vols.max())}
    if mesh.dim == 2:
        p = mesh.nodes[mesh.elements]
        angles = []
        for a in range(3):
            u = p[:, (a + 1) % 3] - p[:, a]
            v = p[:, (a + 2) % 3] - p[:, a]
            cosang = np.einsum("ij,ij->i", u, v) / (
                np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
            angles.append(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
        out["min_angle_deg"] = float(np.min(angles))
    return out
