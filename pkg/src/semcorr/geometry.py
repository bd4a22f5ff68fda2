"""Mesh loading, normalization, surface sampling and graph geodesics.

Geodesic distances are shortest paths on a surface graph: the mesh edge
graph for meshes, a symmetrized k-nearest-neighbour graph for point clouds.
All shapes are expected to be normalized to the unit sphere first.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64
    model_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(v) == 0:
            raise MeshError("mesh has no vertices")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        if len(f) and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise MeshError("degenerate face (repeated vertex index)")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (i, j) pairs."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N, 3)
    model_id: str = ""
    source_face: np.ndarray | None = None  # (N,) int, -1 when unknown
    pinned: tuple[int, ...] = ()
    # index of each point in the cloud it was cropped from (identity when not cropped)
    origin_index: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", p)
        pinned = tuple(int(i) for i in self.pinned)
        if any(i < 0 or i >= len(p) for i in pinned):
            raise ValueError("pinned index out of range")
        object.__setattr__(self, "pinned", pinned)
        if self.source_face is not None:
            object.__setattr__(self, "source_face", np.asarray(self.source_face, dtype=np.int64))
        if self.origin_index is None:
            object.__setattr__(self, "origin_index", np.arange(len(p)))

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class SurfaceGraph:
    node_count: int
    adjacency: sparse.csr_matrix  # symmetric, weights = Euclidean edge lengths
    component_bridges: tuple[tuple[int, int, float], ...] = field(default=())

    @property
    def edge_count(self) -> int:
        return int(sparse.triu(self.adjacency).nnz)

    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)


@dataclass(frozen=True)
class DistanceMatrix:
    sources: np.ndarray  # (S,) node indices
    distances: np.ndarray  # (S, node_count)

    def row(self, source: int) -> np.ndarray:
        hit = np.flatnonzero(self.sources == source)
        if len(hit) == 0:
            raise KeyError(f"node {source} is not a source of this distance matrix")
        return self.distances[hit[0]]

    def __call__(self, source: int, node) -> float | np.ndarray:
        return self.row(source)[node]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source", "node", "distance"])
            for s, row in zip(self.sources, self.distances):
                for node, d in enumerate(row):
                    w.writerow([int(s), node, f"{d:.17g}"])


# ---------------------------------------------------------------------------
# I/O


def load_mesh(path, model_id: str | None = None) -> Mesh:
    """Read an OBJ file. Polygons are fan-triangulated, texture/normal indices dropped."""
    path = Path(path)
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                if len(tok) < 4:
                    raise MeshError(f"{path}:{lineno}: vertex needs 3 coordinates")
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                try:
                    idx = [int(t.split("/")[0]) for t in tok[1:]]
                except ValueError:
                    raise MeshError(f"{path}:{lineno}: malformed face line") from None
                if len(idx) < 3:
                    raise MeshError(f"{path}:{lineno}: face needs at least 3 vertices")
                # negative indices are relative to the current vertex count
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for j in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[j], idx[j + 1]])
    if not verts:
        raise MeshError(f"{path}: no vertices")
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3),
                model_id if model_id is not None else path.stem)


def write_obj(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def write_ply(path, points, colors) -> None:
    """ASCII PLY with per-vertex x y z red green blue."""
    points = np.asarray(points, dtype=np.float64)
    colors = np.clip(np.asarray(colors), 0, 255).astype(np.uint8)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for p, c in zip(points, colors):
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n")


# ---------------------------------------------------------------------------
# normalization and sampling


def unit_sphere_transform(vertices) -> tuple[np.ndarray, float]:
    """Centroid and scale that map `vertices` into the unit sphere."""
    v = np.asarray(vertices, dtype=np.float64)
    center = v.mean(axis=0)
    scale = float(np.linalg.norm(v - center, axis=1).max())
    if not scale > 0:
        raise MeshError("cannot normalize a mesh with zero extent")
    return center, scale


# Category data lives in a sphere of unit diameter, the scale of ShapeNet models.
DATASET_RADIUS = 0.5


def normalize_unit_sphere(mesh: Mesh, radius: float = 1.0) -> Mesh:
    """Center the vertex centroid at the origin and scale the farthest vertex to `radius`."""
    center, scale = unit_sphere_transform(mesh.vertices)
    return Mesh((mesh.vertices - center) * (radius / scale), mesh.faces, mesh.model_id)


def sample_cloud(mesh: Mesh, n: int, pinned_points=(), seed: int = 0, pinned_faces=None) -> PointCloud:
    """Area-weighted uniform surface sample with `pinned_points` prepended verbatim."""
    pinned_points = np.asarray(pinned_points, dtype=np.float64).reshape(-1, 3)
    n_pin = len(pinned_points)
    if n < n_pin:
        raise ValueError(f"n={n} is smaller than the {n_pin} pinned points")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise MeshError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    m = n - n_pin
    face = rng.choice(len(areas), size=m, p=areas / total)
    r1, r2 = rng.random(m), rng.random(m)
    s = np.sqrt(r1)
    bary = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
    tri = mesh.vertices[mesh.faces[face]]
    pts = np.einsum("ij,ijk->ik", bary, tri)

    if pinned_faces is None:
        pinned_faces = np.full(n_pin, -1)
    src = np.concatenate([np.asarray(pinned_faces, dtype=np.int64).reshape(-1), face])
    return PointCloud(np.concatenate([pinned_points, pts]), mesh.model_id, src, tuple(range(n_pin)))


def barycentric_residual(cloud: PointCloud, mesh: Mesh) -> np.ndarray:
    """Distance from each point to the plane-projected point on its source face, inside the triangle.

    Points without a source face get NaN.
    """
    out = np.full(len(cloud), np.nan)
    has = cloud.source_face >= 0
    if not has.any():
        return out
    tri = mesh.vertices[mesh.faces[cloud.source_face[has]]]
    p = cloud.points[has]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    v0, v1, v2 = b - a, c - a, p - a
    d00 = np.einsum("ij,ij->i", v0, v0)
    d01 = np.einsum("ij,ij->i", v0, v1)
    d11 = np.einsum("ij,ij->i", v1, v1)
    d20 = np.einsum("ij,ij->i", v2, v0)
    d21 = np.einsum("ij,ij->i", v2, v1)
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    u = 1.0 - v - w
    bary = np.clip(np.stack([u, v, w], axis=1), 0.0, None)
    bary /= bary.sum(axis=1, keepdims=True)
    recon = np.einsum("ij,ijk->ik", bary, tri)
    out[has] = np.linalg.norm(recon - p, axis=1)
    return out


def icosphere(subdivisions: int = 0, radius: float = 1.0) -> Mesh:
    """Icosahedron refined by midpoint subdivision and projected to the sphere."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
             [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
             [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    faces = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
             [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
             [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
             [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    return Mesh(np.array(verts) * radius, np.array(faces), "icosphere")


# ---------------------------------------------------------------------------
# surface graphs


def _bridge_components(points: np.ndarray, adj: sparse.csr_matrix):
    """Connect components greedily by the globally shortest inter-component pair."""
    bridges = []
    n_comp, labels = csgraph.connected_components(adj, directed=False)
    if n_comp == 1:
        return adj, bridges
    adj = adj.tolil()
    labels = labels.copy()
    while n_comp > 1:
        best = (np.inf, -1, -1)
        for c in np.unique(labels):
            inside = np.flatnonzero(labels == c)
            outside = np.flatnonzero(labels != c)
            d, j = cKDTree(points[outside]).query(points[inside])
            i = int(np.argmin(d))
            cand = (float(d[i]), int(inside[i]), int(outside[j[i]]))
            if cand < best:
                best = cand
        d, a, b = best
        d = max(d, np.finfo(float).tiny)
        adj[a, b] = d
        adj[b, a] = d
        bridges.append((min(a, b), max(a, b), d))
        la, lb = labels[a], labels[b]
        labels[labels == lb] = la
        n_comp -= 1
    return adj.tocsr(), bridges


def _graph_from_edges(points, i, j, node_count) -> SurfaceGraph:
    w = np.linalg.norm(points[i] - points[j], axis=1)
    # coincident points still need a positive edge to stay connected
    w = np.maximum(w, np.finfo(float).tiny)
    a = sparse.coo_matrix((w, (i, j)), shape=(node_count, node_count)).tocsr()
    a = a.maximum(a.T).tocsr()
    a, bridges = _bridge_components(points, a)
    a.sort_indices()
    return SurfaceGraph(node_count, a, tuple(bridges))


def build_graph(shape, k: int = 8) -> SurfaceGraph:
    """Surface graph of a PointCloud (k-NN, symmetrized) or a Mesh (edge graph)."""
    if isinstance(shape, Mesh):
        if len(shape.faces) == 0:
            raise ValueError("mesh has no edges")
        e = shape.edges()
        return _graph_from_edges(shape.vertices, e[:, 0], e[:, 1], len(shape.vertices))
    pts = shape.points if isinstance(shape, PointCloud) else np.asarray(shape, dtype=np.float64)
    n = len(pts)
    if n < 2:
        raise ValueError("need at least 2 points to build a graph")
    if k < 1:
        raise ValueError("k must be >= 1")
    kk = min(k, n - 1)
    _, nbr = cKDTree(pts).query(pts, k=kk + 1)
    nbr = np.asarray(nbr).reshape(n, kk + 1)
    rows = np.repeat(np.arange(n), kk + 1)
    cols = nbr.reshape(-1)
    keep = rows != cols
    # with duplicate points the query may not return self first; drop self loops and cap degree
    return _graph_from_edges(pts, rows[keep], cols[keep], n)


def geodesics_from(graph: SurfaceGraph, sources) -> DistanceMatrix:
    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    if len(sources) and (sources.min() < 0 or sources.max() >= graph.node_count):
        raise IndexError("source index out of range")
    d = csgraph.dijkstra(graph.adjacency, directed=False, indices=sources)
    d = np.atleast_2d(d)
    if not np.isfinite(d).all():
        raise RuntimeError("graph is not connected")
    return DistanceMatrix(sources, d)


ORACLE_MAX_NODES = 2000


def all_pairs_oracle(graph: SurfaceGraph) -> DistanceMatrix:
    """Floyd-Warshall all-pairs distances; reference for geodesics_from."""
    n = graph.node_count
    if n > ORACLE_MAX_NODES:
        raise ValueError(f"{n} nodes exceeds the oracle guard of {ORACLE_MAX_NODES}")
    d = np.full((n, n), np.inf)
    coo = graph.adjacency.tocoo()
    d[coo.row, coo.col] = coo.data
    np.fill_diagonal(d, 0.0)
    for k in range(n):
        np.minimum(d, d[:, k:k + 1] + d[k:k + 1, :], out=d)
    return DistanceMatrix(np.arange(n), d)
