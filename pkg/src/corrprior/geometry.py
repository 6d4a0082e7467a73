"""Mesh and point-set geometry used throughout the package.

Every function here is pure: inputs are never mutated and the array-backed
containers are read-only once constructed, so they can be shared between
threads freely.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.interpolate import RBFInterpolator
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree


class GeometryError(ValueError):
    """Raised when a mesh or point set violates a geometric precondition."""


class DisconnectedMeshError(GeometryError):
    pass


class DegenerateControlPointsError(GeometryError):
    pass


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def as_points(points) -> np.ndarray:
    """Return ``points`` as a float64 ``(n, 3)`` array (accepts containers)."""
    if isinstance(points, (SurfaceMesh,)):
        return points.vertices
    if isinstance(points, (PointCloud, CorrespondenceSet)):
        return points.points
    a = np.asarray(points, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise GeometryError(f"expected an (n, 3) point array, got shape {a.shape}")
    return a


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    """Triangle mesh: ``vertices`` (n, 3) float64 and ``faces`` (f, 3) int64."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = _frozen(self.vertices, np.float64)
        f = _frozen(self.faces, np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise GeometryError(f"vertices must be (n, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise GeometryError(f"faces must be (f, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise GeometryError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def validate(self) -> "SurfaceMesh":
        """Check the full mesh invariants, raising :class:`GeometryError`."""
        f = self.faces
        if len(f) == 0:
            raise GeometryError("mesh has no faces")
        if not np.all(np.isfinite(self.vertices)):
            raise GeometryError("mesh has non-finite vertex coordinates")
        degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if degenerate.any():
            raise GeometryError(f"degenerate face at index {int(np.flatnonzero(degenerate)[0])}")
        referenced = np.zeros(self.n_vertices, dtype=bool)
        referenced[f.ravel()] = True
        if not referenced.all():
            raise GeometryError(f"vertex {int(np.flatnonzero(~referenced)[0])} is not referenced by any face")
        n_comp, labels = connected_components(edge_graph(self), directed=False)
        if n_comp > 1:
            raise DisconnectedMeshError(_disconnected_message(labels))
        return self

    def with_vertices(self, vertices) -> "SurfaceMesh":
        return SurfaceMesh(vertices, self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (e, 2) array with ``i < j``."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen(as_points(self.points), np.float64))

    @property
    def vertices(self) -> np.ndarray:
        # lets point clouds stand in wherever only vertex positions are used
        return self.points

    @property
    def n_vertices(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Ordered correspondence points; index ``m`` is the same landmark on every shape."""

    points: np.ndarray

    def __post_init__(self):
        p = _frozen(as_points(self.points), np.float64)
        if not np.all(np.isfinite(p)):
            raise GeometryError("correspondence coordinates must be finite")
        object.__setattr__(self, "points", p)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class NeighborhoodGraph:
    """``indices[i]`` lists the ``k`` neighbours of vertex ``i``, nearest first."""

    indices: np.ndarray
    metric: str = "euclidean"
    distances: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.metric not in ("geodesic", "euclidean", "feature-space"):
            raise GeometryError(f"unknown metric tag {self.metric!r}")
        idx = _frozen(self.indices, np.int64)
        if idx.ndim != 2:
            raise GeometryError("neighbour indices must be (n, k)")
        n = len(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise GeometryError("neighbour index out of range")
        if np.any(idx == np.arange(n)[:, None]):
            raise GeometryError("a vertex cannot be its own neighbour")
        object.__setattr__(self, "indices", idx)

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def _disconnected_message(labels) -> str:
    counts = np.bincount(labels)
    minor = int(np.argsort(counts)[0])
    members = np.flatnonzero(labels == minor)
    return (f"mesh is disconnected into {len(counts)} components; component {minor} "
            f"has {len(members)} vertices starting at vertex {int(members[0])}")


def edge_graph(mesh: SurfaceMesh) -> sparse.csr_matrix:
    """Symmetric sparse adjacency with Euclidean edge lengths as weights."""
    e = mesh.edges()
    w = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    n = mesh.n_vertices
    g = sparse.coo_matrix((np.r_[w, w], (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(n, n))
    return g.tocsr()


def _rank_neighbors(dist: np.ndarray, k: int, rows: np.ndarray):
    dist = dist.copy()
    dist[np.arange(len(rows)), rows] = np.inf
    # stable sort => ties resolved towards the lower index
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(dist, order, axis=1)


def geodesic_knn(mesh: SurfaceMesh, k: int, chunk: int = 512) -> NeighborhoodGraph:
    """k nearest vertices by shortest-path distance over the mesh edge graph."""
    n = mesh.n_vertices
    if not 0 < k < n:
        raise GeometryError(f"k={k} must satisfy 0 < k < n_vertices={n}")
    g = edge_graph(mesh)
    n_comp, labels = connected_components(g, directed=False)
    if n_comp > 1:
        raise DisconnectedMeshError(_disconnected_message(labels))
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k))
    for start in range(0, n, chunk):
        rows = np.arange(start, min(start + chunk, n))
        d = dijkstra(g, directed=False, indices=rows)
        idx[rows], dist[rows] = _rank_neighbors(d, k, rows)
    return NeighborhoodGraph(idx, "geodesic", dist)


def euclidean_knn(points, k: int, chunk: int = 1024, metric: str = "euclidean") -> NeighborhoodGraph:
    """k nearest neighbours by Euclidean distance; works for features of any width."""
    if isinstance(points, (SurfaceMesh, PointCloud, CorrespondenceSet)):
        x = as_points(points)
    else:
        x = np.asarray(points, dtype=np.float64)
        if x.ndim != 2:
            raise GeometryError(f"expected a 2-D array of points or features, got shape {x.shape}")
    n = len(x)
    if not 0 < k < n:
        raise GeometryError(f"k={k} must satisfy 0 < k < n_points={n}")
    sq = np.einsum("ij,ij->i", x, x)
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k))
    for start in range(0, n, chunk):
        rows = np.arange(start, min(start + chunk, n))
        d = np.maximum(sq[rows, None] + sq[None, :] - 2.0 * x[rows] @ x.T, 0.0)
        # exact re-evaluation so near-ties rank correctly
        order, _ = _rank_neighbors(d, min(k + 8, n - 1), rows)
        exact = np.linalg.norm(x[order] - x[rows, None, :], axis=2)
        sub = np.lexsort((order, exact), axis=1)[:, :k]
        idx[rows] = np.take_along_axis(order, sub, axis=1)
        dist[rows] = np.take_along_axis(exact, sub, axis=1)
    return NeighborhoodGraph(idx, metric, dist)


def nearest_sq_distances(a, b) -> np.ndarray:
    """For each point of ``a`` the squared distance to its nearest point in ``b``."""
    a, b = as_points(a), as_points(b)
    _, j = cKDTree(b).query(a)
    return np.sum((a - b[j]) ** 2, axis=1)


def chamfer_terms(a, b) -> tuple[float, float]:
    """The two directed mean squared nearest-neighbour distances (a->b, b->a)."""
    a, b = as_points(a), as_points(b)
    if len(a) == 0 or len(b) == 0:
        raise GeometryError("Chamfer distance of an empty point set is undefined")
    return float(nearest_sq_distances(a, b).mean()), float(nearest_sq_distances(b, a).mean())


def chamfer_distance(a, b) -> float:
    """Two-way squared-L2 Chamfer distance with mean reduction in each direction."""
    fwd, bwd = chamfer_terms(a, b)
    return fwd + bwd


def closest_points_on_triangles(p, a, b, c) -> np.ndarray:
    """Closest point to each ``p[i]`` on triangle ``(a[i], b[i], c[i])`` (Voronoi-region test)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    def safe(x):
        return np.where(x == 0.0, 1.0, x)

    v_ab = d1 / safe(d1 - d3)
    w_ac = d2 / safe(d2 - d6)
    w_bc = (d4 - d3) / safe((d4 - d3) + (d5 - d6))
    denom = 1.0 / safe(va + vb + vc)
    v_in, w_in = vb * denom, vc * denom

    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    out = a + ab * v_in[:, None] + ac * w_in[:, None]
    choices = [a, b, a + ab * v_ab[:, None], c, a + ac * w_ac[:, None], b + (c - b) * w_bc[:, None]]
    # np.select semantics: first matching condition wins, so apply in reverse
    for cond, choice in reversed(list(zip(conds, choices))):
        out = np.where(cond[:, None], choice, out)
    return out


def _vertex_face_incidence(mesh: SurfaceMesh) -> sparse.csr_matrix:
    f = mesh.faces
    rows = f.ravel()
    cols = np.repeat(np.arange(len(f)), 3)
    return sparse.csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(mesh.n_vertices, len(f)))


def point_surface_distances(points, mesh: SurfaceMesh, chunk: int = 2048) -> np.ndarray:
    """Exact Euclidean distance from each point to the nearest triangle of ``mesh``.

    An upper bound ``u`` comes from the triangles around the nearest vertex;
    any triangle within ``u`` has its centroid within ``u + R`` (``R`` the
    largest centroid-to-corner radius), so only those are evaluated.
    """
    p = as_points(points)
    v, f = mesh.vertices, mesh.faces
    if len(f) == 0:
        raise GeometryError("mesh has no faces")
    tri = v[f]
    centroids = tri.mean(axis=1)
    radius = float(np.max(np.linalg.norm(tri - centroids[:, None, :], axis=2)))
    vtree, ctree = cKDTree(v), cKDTree(centroids)
    incidence = _vertex_face_incidence(mesh)
    out = np.empty(len(p))

    def exact(q, qi, fi):
        cp = closest_points_on_triangles(q[qi], tri[fi, 0], tri[fi, 1], tri[fi, 2])
        best = np.full(len(q), np.inf)
        np.minimum.at(best, qi, np.linalg.norm(q[qi] - cp, axis=1))
        return best

    for start in range(0, len(p), chunk):
        q = p[start:start + chunk]
        _, nearest = vtree.query(q)
        ring = incidence[nearest].tocoo()
        upper = exact(q, ring.row, ring.col)
        balls = ctree.query_ball_point(q, upper + radius + 1e-12)
        lens = np.fromiter((len(b) for b in balls), dtype=np.int64, count=len(q))
        fi = np.fromiter((i for b in balls for i in b), dtype=np.int64, count=int(lens.sum()))
        qi = np.repeat(np.arange(len(q)), lens)
        out[start:start + len(q)] = np.minimum(upper, exact(q, qi, fi))
    return out


def sample_surface(mesh: SurfaceMesh, n: int, seed=0) -> np.ndarray:
    """Area-uniform random points on the mesh surface."""
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (mesh.vertices[mesh.faces[face, i]] for i in range(3))
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def point_to_mesh_distance(points, mesh: SurfaceMesh, n_face_samples: int | None = None, seed=0):
    """Point-to-mesh (P2M) distance.

    Returns
    -------
    per_point : ndarray
        Distance of every point to the nearest triangle.
    summary : dict
        ``point_to_face`` (mean of ``per_point``), ``face_to_point`` (mean distance
        from area-uniform surface samples to the nearest point) and ``p2m``,
        their sum.
    """
    p = as_points(points)
    per_point = point_surface_distances(p, mesh)
    if n_face_samples is None:
        n_face_samples = max(len(mesh.faces), len(p))
    samples = sample_surface(mesh, n_face_samples, seed)
    back, _ = cKDTree(p).query(samples)
    fwd = float(per_point.mean())
    bwd = float(back.mean())
    return per_point, {"point_to_face": fwd, "face_to_point": bwd, "p2m": fwd + bwd}


def symmetric_surface_distance(mesh_a: SurfaceMesh, mesh_b: SurfaceMesh) -> float:
    """Average of the two directed mean vertex-to-surface distances."""
    ab = point_surface_distances(mesh_a.vertices, mesh_b).mean()
    ba = point_surface_distances(mesh_b.vertices, mesh_a).mean()
    return float(0.5 * (ab + ba))


def tps_warp(source, target):
    """Thin-plate-spline map sending ``source`` control points onto ``target``.

    The kernel carries an affine term, so affine motions are reproduced
    exactly. Returns a callable mapping (n, 3) arrays.
    """
    src, dst = as_points(source), as_points(target)
    if src.shape != dst.shape:
        raise GeometryError(f"control point sets differ in shape: {src.shape} vs {dst.shape}")
    centred = src - src.mean(axis=0)
    if len(src) < 4 or np.linalg.matrix_rank(centred, tol=1e-9 * max(1.0, np.abs(centred).max())) < 3:
        raise DegenerateControlPointsError("control points are coplanar or too few for a 3-D warp")
    try:
        interp = RBFInterpolator(src, dst, kernel="thin_plate_spline", degree=1)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise DegenerateControlPointsError(str(exc)) from exc
    return interp


def surface_to_surface_distance(pred, mean_correspondences, mean_mesh: SurfaceMesh, true_mesh: SurfaceMesh) -> float:
    """Warp ``mean_mesh`` by the TPS taking the mean correspondences onto ``pred``
    and return its symmetric distance to ``true_mesh``."""
    pred, mean_c = as_points(pred), as_points(mean_correspondences)
    if pred.shape != mean_c.shape:
        raise GeometryError(f"prediction has {len(pred)} points, mean shape has {len(mean_c)}")
    warp = tps_warp(mean_c, pred)
    warped = mean_mesh.with_vertices(warp(mean_mesh.vertices))
    return symmetric_surface_distance(warped, true_mesh)


def medoid_index(meshes) -> int:
    """Index of the mesh minimising the summed symmetric surface distance to all others."""
    meshes = list(meshes)
    if not meshes:
        raise GeometryError("medoid of an empty list")
    n = len(meshes)
    directed = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                directed[i, j] = point_surface_distances(meshes[i].vertices, meshes[j]).mean()
    sym = 0.5 * (directed + directed.T)
    return int(np.argmin(sym.sum(axis=1)))


def jitter_vertices(mesh, sigma_fraction: float, seed=0):
    """Add i.i.d. Gaussian noise with std ``sigma_fraction * max|vertex coordinate|``."""
    if sigma_fraction < 0:
        raise GeometryError("sigma_fraction must be non-negative")
    v = as_points(mesh)
    if sigma_fraction == 0:
        noisy = v.copy()
    else:
        rng = np.random.default_rng(seed)
        noisy = v + rng.normal(0.0, sigma_fraction * np.abs(v).max(), size=v.shape)
    if isinstance(mesh, SurfaceMesh):
        return mesh.with_vertices(noisy)
    if isinstance(mesh, PointCloud):
        return PointCloud(noisy)
    return noisy


def farthest_point_subsample(points, m: int, seed_index: int = 0) -> CorrespondenceSet:
    """Greedy farthest-point selection; output follows selection order."""
    p = as_points(points)
    n = len(p)
    if m > n:
        raise GeometryError(f"cannot select {m} points from {n}")
    if m <= 0:
        raise GeometryError("m must be positive")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = seed_index
    d = np.sum((p - p[seed_index]) ** 2, axis=1)
    for i in range(1, m):
        # already-chosen points have d == 0, so argmax never repeats while any point is left
        chosen[i] = int(np.argmax(d))
        d = np.minimum(d, np.sum((p - p[chosen[i]]) ** 2, axis=1))
    return CorrespondenceSet(p[chosen])


def icosphere(frequency: int = 10) -> SurfaceMesh:
    """Unit geodesic sphere: every icosahedron face split into ``frequency**2`` triangles.

    Has ``10 * frequency**2 + 2`` vertices.
    """
    t = (1.0 + 5 ** 0.5) / 2.0
    base_v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    base_v /= np.linalg.norm(base_v, axis=1, keepdims=True)
    base_f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    n = frequency
    # barycentric lattice (i, j) with i + j <= n inside one face
    lattice = [(i, j) for i in range(n + 1) for j in range(n + 1 - i)]
    lid = {ij: s for s, ij in enumerate(lattice)}
    tris = []
    for i in range(n):
        for j in range(n - i):
            tris.append((lid[i, j], lid[i + 1, j], lid[i, j + 1]))
            if i + j < n - 1:
                tris.append((lid[i + 1, j], lid[i + 1, j + 1], lid[i, j + 1]))
    lat = np.array(lattice, dtype=np.float64) / n
    tris = np.array(tris)
    verts, faces = [], []
    for fi, (a, b, c) in enumerate(base_f):
        pa, pb, pc = base_v[a], base_v[b], base_v[c]
        pts = pa + lat[:, :1] * (pb - pa) + lat[:, 1:] * (pc - pa)
        verts.append(pts)
        faces.append(tris + fi * len(lattice))
    verts = np.concatenate(verts)
    faces = np.concatenate(faces)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    _, first, inverse = np.unique(np.round(verts, 9), axis=0, return_index=True, return_inverse=True)
    # keep a deterministic order: by first appearance
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    faces = remap[inverse.ravel()][faces]
    verts = verts[first[order]]
    return SurfaceMesh(verts, faces)
