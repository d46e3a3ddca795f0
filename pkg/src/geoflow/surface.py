"""Closed triangle-mesh surfaces and the cotangent Laplace-Beltrami operator.

A SurfaceMesh owns its vertex/triangle arrays plus two precomputed pieces:
barycentric lumped vertex areas and the symmetric cotangent weight matrix.
The discrete Laplace-Beltrami operator is the lumped-mass form
(lap u)_i = (1/A_i) sum_j w_ij (u_j - u_i), which is exactly zero on
constants and symmetric negative semidefinite in its weak form on meshes
without obtuse-triangle weight sign flips.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import MeshError

__all__ = [
    "SurfaceMesh",
    "SurfaceField",
    "make_icosphere",
    "make_fibonacci_sphere",
    "make_blob_mesh",
    "laplace_beltrami_apply",
    "surface_integral",
    "THREE_ATOM_CENTERS",
    "SIX_ATOM_CENTERS",
]

THREE_ATOM_CENTERS = ((0.0, 1.0, 0.0), (-0.864, -0.5, 0.0), (0.864, -0.5, 0.0))
SIX_ATOM_CENTERS = (
    (1.0, 0.0, 0.0), (-1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0), (0.0, -1.0, 0.0),
    (0.0, 0.0, 1.0), (0.0, 0.0, -1.0),
)


class SurfaceMesh:
    """Closed orientable triangle mesh with cotangent-Laplacian precompute."""

    def __init__(self, vertices, triangles):
        v = np.ascontiguousarray(vertices, dtype=np.float64)
        t = np.ascontiguousarray(triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (n, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError(f"triangles must be (m, 3), got {t.shape}")
        if not np.all(np.isfinite(v)):
            raise MeshError("vertex coordinates contain non-finite values")
        if t.min(initial=0) < 0 or t.max(initial=-1) >= len(v):
            raise MeshError("triangle indices out of range")
        self.vertices = v
        self.triangles = t
        self._validate_manifold()
        self._build_operators()

    # -- structural checks -------------------------------------------------

    def _validate_manifold(self):
        t = self.triangles
        if len(t) == 0:
            raise MeshError("mesh has no triangles")
        edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        und = np.sort(edges, axis=1)
        _, counts = np.unique(und, axis=0, return_counts=True)
        if not np.all(counts == 2):
            raise MeshError("mesh is not closed: every edge must be shared by exactly 2 triangles")
        dkeys, dcounts = np.unique(edges, axis=0, return_counts=True)
        if not np.all(dcounts == 1):
            raise MeshError("mesh is not consistently oriented")
        del dkeys

    def _build_operators(self):
        v, t = self.vertices, self.triangles
        p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        cross = np.cross(p1 - p0, p2 - p0)
        areas = 0.5 * np.linalg.norm(cross, axis=1)
        mean_area = areas.mean()
        if np.any(areas <= 1e-12 * mean_area):
            raise MeshError("degenerate triangle (area below 1e-12 of mean)")
        self.triangle_areas = areas
        self.total_area = float(areas.sum())

        # barycentric lumped vertex areas
        lumped = np.zeros(len(v))
        np.add.at(lumped, t.ravel(), np.repeat(areas / 3.0, 3))
        if np.any(lumped <= 0):
            raise MeshError("non-positive lumped vertex area")
        self.vertex_areas = lumped

        # cotangent weights: edge (j,k) opposite corner i gains cot(angle_i)/2
        rows, cols, vals = [], [], []
        corners = (p0, p1, p2)
        for i in range(3):
            a = corners[i]
            b = corners[(i + 1) % 3]
            c = corners[(i + 2) % 3]
            u, w = b - a, c - a
            cot = np.einsum("ij,ij->i", u, w) / (2.0 * areas)
            j = t[:, (i + 1) % 3]
            k = t[:, (i + 2) % 3]
            rows.extend([j, k])
            cols.extend([k, j])
            vals.extend([0.5 * cot, 0.5 * cot])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        W = sparse.csr_matrix((vals, (rows, cols)), shape=(len(v), len(v)))
        # weak form: (M u)_i = sum_j w_ij (u_j - u_i); symmetric by assembly
        diag = np.asarray(W.sum(axis=1)).ravel()
        self.weak_laplacian = (W - sparse.diags(diag)).tocsr()
        self._gershgorin = None
        self._adjacency = None

    # -- derived data -------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def euler_characteristic(self) -> int:
        n_edges = 3 * self.n_triangles // 2
        return self.n_vertices - n_edges + self.n_triangles

    def laplacian_gershgorin(self) -> float:
        """Upper bound on the largest |eigenvalue| of the lumped operator."""
        if self._gershgorin is None:
            absrow = np.asarray(abs(self.weak_laplacian).sum(axis=1)).ravel()
            self._gershgorin = float(np.max(absrow / self.vertex_areas))
        return self._gershgorin

    def vertex_adjacency(self) -> sparse.csr_matrix:
        if self._adjacency is None:
            t = self.triangles
            e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
            ones = np.ones(len(e), dtype=np.int8)
            A = sparse.csr_matrix((ones, (e[:, 0], e[:, 1])), shape=(self.n_vertices,) * 2)
            self._adjacency = ((A + A.T) > 0).astype(np.int8)
        return self._adjacency


@dataclass
class SurfaceField:
    mesh: SurfaceMesh
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float64)
        if arr.shape != (self.mesh.n_vertices,):
            raise MeshError(
                f"field length {arr.shape} does not match vertex count {self.mesh.n_vertices}"
            )
        if not np.all(np.isfinite(arr)):
            raise MeshError("surface field contains non-finite values")
        self.values = arr

    @classmethod
    def full(cls, mesh: SurfaceMesh, value: float) -> "SurfaceField":
        return cls(mesh, np.full(mesh.n_vertices, float(value)))


def laplace_beltrami_apply(mesh: SurfaceMesh, u: SurfaceField | np.ndarray) -> SurfaceField:
    """Lumped-mass cotangent Laplacian: (1/A_i) sum_j w_ij (u_j - u_i)."""
    vals = u.values if isinstance(u, SurfaceField) else np.asarray(u, dtype=np.float64)
    out = mesh.weak_laplacian @ vals / mesh.vertex_areas
    return SurfaceField(mesh, out)


def surface_integral(mesh: SurfaceMesh, u: SurfaceField | np.ndarray) -> float:
    """Lumped quadrature sum_i A_i u_i."""
    vals = u.values if isinstance(u, SurfaceField) else np.asarray(u, dtype=np.float64)
    if vals.shape != (mesh.n_vertices,):
        raise MeshError("field length does not match vertex count")
    return float(mesh.vertex_areas @ vals)


# -- builders ----------------------------------------------------------------


def make_icosphere(subdivisions: int) -> SurfaceMesh:
    """Unit icosphere: V = 10*4^n + 2 vertices, F = 20*4^n triangles."""
    if subdivisions < 0:
        raise MeshError("subdivisions must be >= 0")
    if subdivisions > 7:
        raise MeshError("subdivisions > 7 would be excessive (V > 160k)")
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
            (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
            (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(map(tuple, verts))
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            idx = cache.get(key)
            if idx is None:
                p = np.array(verts[i]) + np.array(verts[j])
                p /= np.linalg.norm(p)
                verts.append(tuple(p))
                idx = len(verts) - 1
                cache[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return SurfaceMesh(np.array(verts), np.array(faces))


def make_fibonacci_sphere(n_vertices: int) -> SurfaceMesh:
    """Quasi-uniform unit sphere mesh from a Fibonacci lattice + convex hull.

    Useful for vertex counts an icosphere cannot hit (e.g. ~1000 nodes).
    """
    from scipy.spatial import ConvexHull

    if n_vertices < 12:
        raise MeshError("need at least 12 vertices for a sphere mesh")
    i = np.arange(n_vertices)
    golden = (1.0 + np.sqrt(5.0)) / 2.0
    theta = 2.0 * np.pi * i / golden
    z = 1.0 - (2.0 * i + 1.0) / n_vertices
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    pts = np.column_stack([rho * np.cos(theta), rho * np.sin(theta), z])
    hull = ConvexHull(pts)
    tris = hull.simplices.copy()
    # orient every triangle outward (radial test is exact on a convex body)
    p0, p1, p2 = pts[tris[:, 0]], pts[tris[:, 1]], pts[tris[:, 2]]
    normals = np.cross(p1 - p0, p2 - p0)
    centroid = (p0 + p1 + p2) / 3.0
    flip = np.einsum("ij,ij->i", normals, centroid) < 0
    tris[flip] = tris[flip][:, ::-1]
    return SurfaceMesh(pts, tris)


def _smooth_union_distance(x, y, z, centers, radius, beta):
    d = None
    acc = None
    for c in centers:
        di = np.sqrt((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2) - radius
        e = np.exp(-beta * di)
        acc = e if acc is None else acc + e
        d = di
    del d
    return -np.log(acc) / beta


def _collapse_short_edges(verts: np.ndarray, tris: np.ndarray, ratio: float, passes: int):
    """Collapse edges shorter than ratio * median edge (manifold-safe)."""
    for _ in range(passes):
        e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
        e = np.unique(np.sort(e, axis=1), axis=0)
        lengths = np.linalg.norm(verts[e[:, 0]] - verts[e[:, 1]], axis=1)
        cutoff = ratio * np.median(lengths)
        short = np.argsort(lengths)
        neigh = [set() for _ in range(len(verts))]
        for a, b in e:
            neigh[a].add(int(b))
            neigh[b].add(int(a))
        parent = np.arange(len(verts))
        touched = np.zeros(len(verts), dtype=bool)
        n_collapsed = 0
        for idx in short:
            if lengths[idx] >= cutoff:
                break
            a, b = int(e[idx, 0]), int(e[idx, 1])
            if touched[a] or touched[b]:
                continue
            # link condition: endpoints of a collapsible edge share exactly
            # the two triangle-opposite vertices
            if len(neigh[a] & neigh[b]) != 2:
                continue
            verts[a] = 0.5 * (verts[a] + verts[b])
            parent[b] = a
            # freeze the whole 1-ring so collapses cannot interact in a pass
            touched[list(neigh[a] | neigh[b])] = True
            touched[a] = touched[b] = True
            n_collapsed += 1
        if n_collapsed == 0:
            break
        tris = parent[tris]
        keep = (
            (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
        )
        tris = tris[keep]
        used = np.unique(tris)
        remap = np.full(len(verts), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        verts = verts[used]
        tris = remap[tris]
    return verts, tris


def make_blob_mesh(centers, radius: float = 1.0, n_grid: int = 64,
                   blend: float = 6.0) -> SurfaceMesh:
    """Quasi-uniform mesh of a smoothly blended union of spheres.

    Marching cubes on a soft-min signed distance of the sphere union,
    followed by short-edge collapse. The blend keeps the three/six-atom
    molecular blobs free of the pinch singularities of the exact union.
    """
    from skimage import measure

    centers = np.asarray(centers, dtype=np.float64)
    lo = centers.min() - radius - 0.5
    hi = centers.max() + radius + 0.5
    h = (hi - lo) / (n_grid - 1)
    ax = lo + h * np.arange(n_grid)
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    dist = _smooth_union_distance(x, y, z, centers, radius, blend)
    verts, faces, _, _ = measure.marching_cubes(dist, level=0.0, spacing=(h, h, h))
    verts = verts + lo
    faces = np.asarray(faces, dtype=np.int64)
    cleaned = _collapse_short_edges(verts.copy(), faces.copy(), ratio=0.35, passes=6)
    try:
        return SurfaceMesh(*cleaned)
    except MeshError:
        # collapse produced a defect on this input; the raw MC mesh is closed
        return SurfaceMesh(verts, faces)
