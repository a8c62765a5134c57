"""Triangular meshes of a disk, point location and barycentric interpolation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay

from .errors import InvalidParameterError, PointOutsideDomainError

logger = logging.getLogger(__name__)

UNIT_AREA_RADIUS = 1.0 / np.sqrt(np.pi)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming P1 triangulation of a disk centred at the origin.

    Parameters
    ----------
    nodes : (N, 2) array
        Node coordinates.
    triangles : (T, 3) int array
        Counterclockwise node-index triples.
    boundary_nodes : int array
        Indices of nodes lying on the boundary circle.
    h_max : float
        Longest triangle side.
    radius : float
        Radius of the analytic boundary circle, kept for reflection geometry
        and for snapping points in the gap between polygon and circle.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_nodes: np.ndarray
    h_max: float
    radius: float

    def __post_init__(self):
        for name in ("nodes", "triangles", "boundary_nodes"):
            getattr(self, name).setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def areas(self) -> np.ndarray:
        return np.abs(self.signed_areas)

    @property
    def area(self) -> float:
        return float(self.areas.sum())

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """(T, 3, 2) gradients of the three local hat functions, constant per triangle."""
        p = self.nodes[self.triangles]
        # grad of barycentric coordinate i is the rotated opposite edge over 2|T|
        x, y = p[..., 0], p[..., 1]
        two_a = 2.0 * self.signed_areas
        gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
        gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
        return np.stack([gx, gy], axis=2) / two_a[:, None, None]

    @cached_property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique sorted edges and, per edge, the number of incident triangles."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e = np.sort(e, axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq, counts

    @cached_property
    def boundary_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Boundary edges (as local vertex slots) and the triangle owning each."""
        t = self.triangles
        slots = np.array([[0, 1], [1, 2], [2, 0]])
        tri_idx = np.repeat(np.arange(len(t)), 3)
        local = np.tile(slots, (len(t), 1))
        e = np.sort(t[tri_idx[:, None], local], axis=1)
        _, inv, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
        mask = counts[inv.ravel()] == 1
        return local[mask], tri_idx[mask]

    @cached_property
    def _locator(self) -> "_GridLocator":
        return _GridLocator(self)

    def to_json(self) -> dict:
        return {
            "nodes": self.nodes.tolist(),
            "triangles": self.triangles.tolist(),
            "boundary": self.boundary_nodes.tolist(),
            "h_max": self.h_max,
            "radius": self.radius,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Mesh":
        nodes = np.asarray(data["nodes"], dtype=float)
        radius = data.get("radius")
        if radius is None:
            radius = float(np.max(np.linalg.norm(nodes, axis=1)))
        return cls(
            nodes=nodes,
            triangles=np.asarray(data["triangles"], dtype=np.int64),
            boundary_nodes=np.asarray(data["boundary"], dtype=np.int64),
            h_max=float(data["h_max"]),
            radius=float(radius),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "Mesh":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_disk_mesh(radius: float = UNIT_AREA_RADIUS, h_max: float = 0.05, preserve_area: bool = True) -> Mesh:
    """Triangulate the disk of the given radius.

    Nodes are placed on concentric rings with spacing ``h_max / 2`` (alternate
    rings rotated by half a step) and connected by a Delaunay triangulation.
    The construction is deterministic.

    With ``preserve_area`` the node cloud is scaled by ``1 + O(h_max^2)`` so the
    polygon area equals ``pi * radius^2`` exactly; otherwise the outer ring
    lies on the circle and the polygon is inscribed.

    Raises
    ------
    InvalidParameterError
        If ``radius <= 0`` or ``h_max`` is not in ``(0, radius)``.
    """
    if not radius > 0:
        raise InvalidParameterError(f"radius must be positive, got {radius}")
    if not 0 < h_max < radius:
        raise InvalidParameterError(f"h_max must lie in (0, radius={radius}), got {h_max}")

    spacing = 0.5 * h_max
    n_rings = int(np.ceil(radius / spacing))
    pts = [np.zeros((1, 2))]
    ring_of = [np.zeros(1, dtype=int)]
    for i in range(1, n_rings + 1):
        r = radius * i / n_rings
        m = max(6, int(round(2.0 * np.pi * r / spacing)))
        phase = 0.5 * (i % 2) * 2.0 * np.pi / m
        ang = phase + 2.0 * np.pi * np.arange(m) / m
        pts.append(np.column_stack([r * np.cos(ang), r * np.sin(ang)]))
        ring_of.append(np.full(m, i))
    nodes = np.concatenate(pts)
    ring_of = np.concatenate(ring_of)

    tri = Delaunay(nodes).simplices.astype(np.int64)
    p = nodes[tri]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    sa = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    # qhull may emit flat simplices along the cocircular outer ring
    keep = np.abs(sa) > 1e-14 * spacing**2
    tri, sa = tri[keep], sa[keep]
    neg = sa < 0
    tri[neg] = tri[neg][:, [0, 2, 1]]

    if preserve_area:
        nodes *= np.sqrt(np.pi * radius**2 / np.abs(sa).sum())

    edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    longest = float(np.max(np.linalg.norm(nodes[edges[:, 0]] - nodes[edges[:, 1]], axis=1)))
    boundary = np.flatnonzero(ring_of == n_rings)
    mesh = Mesh(nodes=nodes, triangles=tri, boundary_nodes=boundary, h_max=longest, radius=float(radius))
    logger.debug("disk mesh: %d nodes, %d triangles, h_max=%.4f", mesh.n_nodes, mesh.n_triangles, longest)
    return mesh


@dataclass(frozen=True)
class PointLocation:
    triangle_index: int
    barycentric: np.ndarray


class _GridLocator:
    """Uniform background grid bucketing triangles by bounding box."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        p = mesh.nodes[mesh.triangles]
        lo, hi = p.min(axis=1), p.max(axis=1)
        self.origin = mesh.nodes.min(axis=0)
        extent = mesh.nodes.max(axis=0) - self.origin
        n_cells = max(1, int(np.sqrt(mesh.n_triangles / 2)))
        self.shape = (n_cells, n_cells)
        self.cell = extent / n_cells + 1e-15
        i0 = self._cell_coords(lo)
        i1 = self._cell_coords(hi)
        cells, owners = [], []
        for t in range(mesh.n_triangles):
            ii, jj = np.meshgrid(np.arange(i0[t, 0], i1[t, 0] + 1), np.arange(i0[t, 1], i1[t, 1] + 1))
            cid = (ii * n_cells + jj).ravel()
            cells.append(cid)
            owners.append(np.full(cid.size, t))
        cells = np.concatenate(cells)
        owners = np.concatenate(owners)
        order = np.argsort(cells, kind="stable")
        self.cell_tris = owners[order]
        counts = np.bincount(cells, minlength=n_cells * n_cells)
        self.start = np.concatenate([[0], np.cumsum(counts)])
        self.count = counts
        # barycentric transform per triangle: lambda_{1,2} = Tinv @ (x - p0)
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        self.p0 = p[:, 0]
        self.tinv = np.stack(
            [np.stack([e2[:, 1], -e2[:, 0]], axis=1), np.stack([-e1[:, 1], e1[:, 0]], axis=1)], axis=1
        ) / det[:, None, None]

    def _cell_coords(self, x):
        ij = np.floor((x - self.origin) / self.cell).astype(int)
        return np.clip(ij, 0, self.shape[0] - 1)

    def barycentric(self, tri: np.ndarray, x: np.ndarray) -> np.ndarray:
        d = x - self.p0[tri]
        l12 = np.einsum("nij,nj->ni", self.tinv[tri], d)
        return np.column_stack([1.0 - l12.sum(axis=1), l12])

    def locate(self, x: np.ndarray, tol: float):
        n = x.shape[0]
        tri = np.full(n, -1, dtype=np.int64)
        bary = np.zeros((n, 3))
        ij = self._cell_coords(x)
        cid = ij[:, 0] * self.shape[0] + ij[:, 1]
        cnt = self.count[cid]
        for slot in range(int(cnt.max(initial=0))):
            todo = np.flatnonzero((tri < 0) & (slot < cnt))
            if todo.size == 0:
                break
            cand = self.cell_tris[self.start[cid[todo]] + slot]
            b = self.barycentric(cand, x[todo])
            ok = b.min(axis=1) >= -tol
            tri[todo[ok]] = cand[ok]
            bary[todo[ok]] = b[ok]
        return tri, bary


def _clean(bary: np.ndarray) -> np.ndarray:
    b = np.clip(bary, 0.0, 1.0)
    return b / b.sum(axis=1, keepdims=True)


def _snap_to_boundary(mesh: Mesh, x: np.ndarray):
    """Nearest point on the boundary polygon, as (triangle, barycentric)."""
    local, owner = mesh.boundary_edges
    t = mesh.triangles[owner]
    a = mesh.nodes[t[np.arange(len(t)), local[:, 0]]]
    b = mesh.nodes[t[np.arange(len(t)), local[:, 1]]]
    ab = b - a
    s = np.einsum("ekd,ed->ek", x[None, :, :] - a[:, None, :], ab) / np.einsum("ed,ed->e", ab, ab)[:, None]
    s = np.clip(s, 0.0, 1.0)
    proj = a[:, None, :] + s[..., None] * ab[:, None, :]
    dist = np.linalg.norm(proj - x[None], axis=2)
    best = np.argmin(dist, axis=0)
    k = np.arange(x.shape[0])
    bary = np.zeros((x.shape[0], 3))
    bary[k, local[best, 0]] = 1.0 - s[best, k]
    bary[k, local[best, 1]] = s[best, k]
    return owner[best], bary


def locate_points(mesh: Mesh, points, tol: float = 1e-9, snap: bool = False):
    """Locate many points at once.

    Parameters
    ----------
    points : (n, 2) array_like
    tol : float
        Barycentric slack accepted for points on edges.
    snap : bool
        If true, points inside the analytic disk but in the thin gap outside
        the boundary polygon are moved to the nearest boundary edge.

    Returns
    -------
    triangles : (n,) int array
    barycentric : (n, 3) array
    n_snapped : int

    Raises
    ------
    PointOutsideDomainError
        For the first point that cannot be located.
    """
    x = np.atleast_2d(np.asarray(points, dtype=float))
    tri, bary = mesh._locator.locate(x, tol)
    missing = np.flatnonzero(tri < 0)
    n_snapped = 0
    if missing.size:
        inside_disk = np.linalg.norm(x[missing], axis=1) <= mesh.radius * (1.0 + 1e-9) + tol
        if not snap or not inside_disk.all():
            bad = missing[~inside_disk][0] if not inside_disk.all() else missing[0]
            raise PointOutsideDomainError(f"point {bad} at {x[bad].tolist()} lies outside the mesh", index=int(bad))
        tri[missing], bary[missing] = _snap_to_boundary(mesh, x[missing])
        n_snapped = int(missing.size)
    return tri, _clean(bary), n_snapped


def locate_point(mesh: Mesh, x, tol: float = 1e-9) -> PointLocation:
    tri, bary, _ = locate_points(mesh, np.asarray(x, dtype=float)[None, :], tol=tol)
    return PointLocation(int(tri[0]), bary[0])


def interpolation_matrix(mesh: Mesh, points, snap: bool = False):
    """Sparse (n, N) matrix mapping nodal values to values at ``points``."""
    from scipy.sparse import csr_matrix

    tri, bary, n_snapped = locate_points(mesh, points, snap=snap)
    n = tri.size
    rows = np.repeat(np.arange(n), 3)
    cols = mesh.triangles[tri].ravel()
    mat = csr_matrix((bary.ravel(), (rows, cols)), shape=(n, mesh.n_nodes))
    return mat, n_snapped
