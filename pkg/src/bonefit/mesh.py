"""Triangle-mesh core: types, metric queries, curvature, sampling, rigid transforms, PLY I/O.

Meshes are plain vertex/triangle arrays in millimetres. All operations are pure:
they never mutate their inputs, so callers may share meshes across threads.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12


class MeshError(ValueError):
    """Raised for structurally invalid meshes or unsupported queries."""


# ---------------------------------------------------------------------------
# rigid transforms


@dataclass(frozen=True, slots=True)
class RigidTransform:
    """Proper rigid motion x -> R @ x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if not np.isclose(np.linalg.det(r), 1.0, atol=1e-9):
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_axis_angle(axis, angle_rad: float, center=None) -> "RigidTransform":
        """Rotation about an axis through `center` (origin when None)."""
        r = rotation_from_axis_angle(axis, angle_rad)
        if center is None:
            return RigidTransform(r, np.zeros(3))
        c = np.asarray(center, dtype=np.float64)
        return RigidTransform(r, c - r @ c)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def apply_directions(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying `other` first, then self."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def invert(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def angle_deg(self) -> float:
        """Rotation angle of this transform in degrees."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))

    def to_flat(self) -> list[float]:
        """Twelve numbers: the 3x4 matrix [R | t] in row-major order."""
        m = np.hstack([self.rotation, self.translation[:, None]])
        return [float(v) for v in m.reshape(-1)]

    @staticmethod
    def from_flat(values) -> "RigidTransform":
        m = np.asarray(values, dtype=np.float64).reshape(3, 4)
        return RigidTransform(m[:, :3], m[:, 3])


def rotation_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    a = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(a)
    if n == 0:
        raise ValueError("zero rotation axis")
    a = a / n
    k = np.array(
        [[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]]
    )
    return np.eye(3) + np.sin(angle_rad) * k + (1.0 - np.cos(angle_rad)) * (k @ k)


@dataclass(frozen=True, slots=True)
class OrientedPoint:
    """Surface point with its unit outward normal."""

    position: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64).reshape(3)
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        if not np.isclose(np.linalg.norm(n), 1.0, atol=1e-6):
            raise ValueError("normal is not unit length")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "normal", n)


# ---------------------------------------------------------------------------
# mesh type


class TriangleMesh:
    """Immutable-by-convention triangle mesh with per-vertex outward normals."""

    __slots__ = ("vertices", "triangles", "vertex_normals")

    def __init__(self, vertices, triangles, vertex_normals=None, orient: bool = False):
        v = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle index out of range")
        if orient and len(t):
            if _signed_volume(v, t) < 0:
                t = t[:, [0, 2, 1]]
        self.vertices = v
        self.triangles = t
        if vertex_normals is None:
            self.vertex_normals = _area_weighted_normals(v, t)
        else:
            n = np.ascontiguousarray(vertex_normals, dtype=np.float64).reshape(-1, 3)
            if len(n) != len(v):
                raise MeshError("normal count does not match vertex count")
            self.vertex_normals = n

    def __repr__(self):
        return f"TriangleMesh({len(self.vertices)} vertices, {len(self.triangles)} triangles)"

    def oriented_point(self, vertex_id: int) -> OrientedPoint:
        return OrientedPoint(self.vertices[vertex_id], self.vertex_normals[vertex_id])


def _signed_volume(vertices, triangles) -> float:
    tri = vertices[triangles]
    return float(np.einsum("ij,ij->", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])) / 6.0)


def _area_weighted_normals(vertices, triangles) -> np.ndarray:
    normals = np.zeros_like(vertices)
    if len(triangles):
        tri = vertices[triangles]
        face = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        for c in range(3):
            np.add.at(normals, triangles[:, c], face)
    norms = np.linalg.norm(normals, axis=1)
    ok = norms > 0
    normals[ok] /= norms[ok, None]
    normals[~ok] = (0.0, 0.0, 1.0)
    return normals


# ---------------------------------------------------------------------------
# connectivity


def unique_edges(mesh: TriangleMesh) -> np.ndarray:
    """Sorted unique undirected edges as an (E, 2) array."""
    t = mesh.triangles
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def _edge_use_counts(mesh: TriangleMesh):
    t = mesh.triangles
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0, return_counts=True)


def boundary_edge_count(mesh: TriangleMesh) -> int:
    if not len(mesh.triangles):
        return 0
    _, counts = _edge_use_counts(mesh)
    return int((counts != 2).sum())


def is_watertight(mesh: TriangleMesh) -> bool:
    return len(mesh.triangles) > 0 and boundary_edge_count(mesh) == 0


def euler_characteristic(mesh: TriangleMesh) -> int:
    referenced = np.unique(mesh.triangles)
    e = len(unique_edges(mesh))
    return int(len(referenced) - e + len(mesh.triangles))


def boundary_vertex_mask(mesh: TriangleMesh) -> np.ndarray:
    """True for vertices on at least one edge not shared by two triangles."""
    mask = np.zeros(len(mesh.vertices), dtype=bool)
    if not len(mesh.triangles):
        return mask
    edges, counts = _edge_use_counts(mesh)
    open_edges = edges[counts != 2]
    mask[open_edges.reshape(-1)] = True
    return mask


def vertex_adjacency(mesh: TriangleMesh):
    """One-ring neighborhoods as CSR arrays (indptr, indices)."""
    edges = unique_edges(mesh)
    n = len(mesh.vertices)
    both = np.concatenate([edges, edges[:, ::-1]])
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, both[:, 0] + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, both[:, 1].copy()


# ---------------------------------------------------------------------------
# metrics


def mesh_resolution(mesh: TriangleMesh) -> float:
    """Mean unique-edge length; the pipeline's master length scale."""
    edges = unique_edges(mesh)
    if not len(edges):
        raise MeshError("mesh has no edges")
    d = mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]]
    return float(np.linalg.norm(d, axis=1).mean())


def triangle_areas(mesh: TriangleMesh) -> np.ndarray:
    tri = mesh.vertices[mesh.triangles]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1)


def surface_area(mesh: TriangleMesh, triangle_ids=None) -> float:
    areas = triangle_areas(mesh)
    if triangle_ids is not None:
        areas = areas[np.asarray(triangle_ids, dtype=np.int64)]
    return float(areas.sum())


def enclosed_volume(mesh: TriangleMesh) -> float:
    """Volume via signed tetrahedra; requires a closed mesh."""
    if boundary_edge_count(mesh) != 0:
        raise MeshError("volume of an open mesh is undefined")
    return abs(_signed_volume(mesh.vertices, mesh.triangles))


def area_centroid(mesh: TriangleMesh) -> np.ndarray:
    """Area-weighted centroid of the surface."""
    tri = mesh.vertices[mesh.triangles]
    areas = triangle_areas(mesh)
    centers = tri.mean(axis=1)
    total = areas.sum()
    if total <= 0:
        raise MeshError("mesh has no area")
    return (centers * areas[:, None]).sum(axis=0) / total


def principal_axis(mesh: TriangleMesh) -> np.ndarray:
    """Unit eigenvector of the largest vertex-covariance eigenvalue.

    Sign-normalized: the first component with magnitude above 1e-12 is positive.
    """
    v = mesh.vertices - mesh.vertices.mean(axis=0)
    cov = v.T @ v / max(len(v), 1)
    w, vecs = np.linalg.eigh(cov)
    axis = vecs[:, np.argmax(w)]
    for comp in axis:
        if abs(comp) > 1e-12:
            if comp < 0:
                axis = -axis
            break
    return axis


def principal_eigenvalue_ratio(mesh: TriangleMesh) -> float:
    """Largest over second-largest vertex-covariance eigenvalue."""
    v = mesh.vertices - mesh.vertices.mean(axis=0)
    cov = v.T @ v / max(len(v), 1)
    w = np.sort(np.linalg.eigvalsh(cov))
    if w[1] <= 0:
        return np.inf
    return float(w[2] / w[1])


# ---------------------------------------------------------------------------
# curvature


def vertex_mean_curvature(mesh: TriangleMesh, smoothing_rounds: int = 0) -> np.ndarray:
    """Cotangent-Laplacian mean curvature per vertex, in 1/mm.

    Positive on convex regions (sphere of radius r gives +1/r with outward
    normals). Values at boundary vertices of open meshes are incomplete-fan
    estimates; callers that care should mask them via boundary_vertex_mask().
    smoothing_rounds > 0 applies that many rounds of one-ring averaging, which
    tames voxelization staircase noise for partitioning and descriptor pairing.
    """
    v = mesh.vertices
    t = mesh.triangles
    n = len(v)
    if not len(t):
        return np.zeros(n)

    lap = np.zeros_like(v)
    tri = v[t]
    tri_area = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
    )

    cots = np.empty((len(t), 3))
    for c in range(3):
        e1 = v[t[:, (c + 1) % 3]] - v[t[:, c]]
        e2 = v[t[:, (c + 2) % 3]] - v[t[:, c]]
        cross = np.maximum(np.linalg.norm(np.cross(e1, e2), axis=1), 1e-300)
        cots[:, c] = np.einsum("ij,ij->i", e1, e2) / cross

    for c in range(3):
        a = t[:, (c + 1) % 3]
        b = t[:, (c + 2) % 3]
        w = cots[:, c]
        diff = v[a] - v[b]
        np.add.at(lap, a, w[:, None] * diff)
        np.add.at(lap, b, -w[:, None] * diff)

    # mixed Voronoi vertex areas: plain Voronoi cells inside non-obtuse
    # triangles, area/2 at the obtuse corner and area/4 elsewhere otherwise
    areas = np.zeros(n)
    obtuse_tri = (cots < 0).any(axis=1)
    edge_sq = np.empty((len(t), 3))
    for c in range(3):
        d = v[t[:, (c + 1) % 3]] - v[t[:, (c + 2) % 3]]
        edge_sq[:, c] = np.einsum("ij,ij->i", d, d)
    for c in range(3):
        j = (c + 1) % 3
        k = (c + 2) % 3
        voronoi = (edge_sq[:, k] * cots[:, k] + edge_sq[:, j] * cots[:, j]) / 8.0
        fallback = np.where(cots[:, c] < 0, tri_area / 2.0, tri_area / 4.0)
        np.add.at(areas, t[:, c], np.where(obtuse_tri, fallback, voronoi))

    safe = np.maximum(areas, 1e-300)
    k_vec = lap / (2.0 * safe[:, None])
    h = 0.5 * np.linalg.norm(k_vec, axis=1)
    sign = np.sign(np.einsum("ij,ij->i", k_vec, mesh.vertex_normals))
    sign[sign == 0] = 1.0
    h = h * sign
    h[areas <= 0] = 0.0

    if smoothing_rounds > 0:
        indptr, indices = vertex_adjacency(mesh)
        deg = np.diff(indptr)
        safe_deg = np.maximum(deg + 1, 1)
        for _ in range(smoothing_rounds):
            nb_sum = np.add.reduceat(
                h[indices], indptr[:-1], dtype=np.float64
            ) if len(indices) else np.zeros(n)
            nb_sum[deg == 0] = 0.0
            h = (h + nb_sum) / safe_deg
    return h


def mean_curvature(mesh: TriangleMesh, vertex_id: int) -> float:
    """Mean curvature at one vertex; raises for isolated vertices."""
    if vertex_id not in mesh.triangles:
        raise MeshError(f"vertex {vertex_id} belongs to no triangle")
    return float(vertex_mean_curvature(mesh)[vertex_id])


# ---------------------------------------------------------------------------
# sampling, mirroring, transforms


def uniform_subsample(mesh: TriangleMesh, spacing: float, seed: int = 0) -> np.ndarray:
    """Greedy Poisson-disk vertex subset: all pairwise distances > spacing.

    Vertices are visited in seeded shuffled order and kept when no previously
    kept vertex lies within `spacing`. Returns sorted vertex ids. Maximal: every
    rejected vertex is within spacing of some kept one.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    v = mesh.vertices
    n = len(v)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    cell = spacing
    grid: dict[tuple, list] = {}
    keys = np.floor(v / cell).astype(np.int64)
    kept = []
    sq = spacing * spacing
    for idx in order:
        kx, ky, kz = keys[idx]
        ok = True
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    bucket = grid.get((kx + dx, ky + dy, kz + dz))
                    if not bucket:
                        continue
                    d = v[bucket] - v[idx]
                    if (np.einsum("ij,ij->i", d, d) <= sq).any():
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            grid.setdefault((kx, ky, kz), []).append(idx)
            kept.append(idx)
    return np.sort(np.asarray(kept, dtype=np.int64))


def mirror(mesh: TriangleMesh, plane_point, plane_normal) -> TriangleMesh:
    """Reflect across a plane; winding flipped so orientation stays outward."""
    p = np.asarray(plane_point, dtype=np.float64)
    n = np.asarray(plane_normal, dtype=np.float64)
    norm = np.linalg.norm(n)
    if not np.isclose(norm, 1.0, atol=1e-6):
        raise ValueError("plane normal must be unit length")
    n = n / norm
    d = (mesh.vertices - p) @ n
    verts = mesh.vertices - 2.0 * d[:, None] * n
    nd = mesh.vertex_normals @ n
    normals = mesh.vertex_normals - 2.0 * nd[:, None] * n
    return TriangleMesh(verts, mesh.triangles[:, [0, 2, 1]], normals)


def apply_transform(t: RigidTransform, mesh: TriangleMesh) -> TriangleMesh:
    return TriangleMesh(
        t.apply_points(mesh.vertices),
        mesh.triangles,
        t.apply_directions(mesh.vertex_normals),
    )


def submesh(mesh: TriangleMesh, triangle_ids):
    """Compact sub-mesh of the given triangles.

    Returns (mesh, vertex_ids) where vertex_ids maps compact vertex index back
    to the parent mesh's vertex index.
    """
    tids = np.asarray(triangle_ids, dtype=np.int64)
    tris = mesh.triangles[tids]
    vertex_ids, inverse = np.unique(tris.reshape(-1), return_inverse=True)
    new_tris = inverse.reshape(-1, 3)
    sub = TriangleMesh(
        mesh.vertices[vertex_ids], new_tris, mesh.vertex_normals[vertex_ids]
    )
    return sub, vertex_ids


# ---------------------------------------------------------------------------
# point-to-surface distance


def _closest_on_segments(p, s0, s1):
    d = s1 - s0
    dd = np.einsum("...i,...i->...", d, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(dd > 0, np.einsum("...i,...i->...", p - s0, d) / dd, 0.0)
    return s0 + np.clip(t, 0.0, 1.0)[..., None] * d


def _closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p; all (..., 3) arrays.

    Candidate-minimum formulation: the in-plane projection (when it lands
    inside the triangle) competes against the three edge-segment projections.
    Order-independent and safe for degenerate triangles.
    """
    n = np.cross(b - a, c - a)
    nn = np.einsum("...i,...i->...", n, n)
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.where(nn > 0, np.einsum("...i,...i->...", p - a, n) / nn, 0.0)
    proj = p - off[..., None] * n
    # barycentric-sign test for the projection
    u = np.einsum("...i,...i->...", np.cross(b - proj, c - proj), n)
    v = np.einsum("...i,...i->...", np.cross(c - proj, a - proj), n)
    w = np.einsum("...i,...i->...", np.cross(a - proj, b - proj), n)
    inside = (nn > 0) & (u >= 0) & (v >= 0) & (w >= 0)

    candidates = np.stack(
        [
            np.where(inside[..., None], proj, np.inf),
            _closest_on_segments(p, a, b),
            _closest_on_segments(p, b, c),
            _closest_on_segments(p, a, c),
        ],
        axis=0,
    )
    diff = candidates - p[None]
    with np.errstate(invalid="ignore"):
        d2 = np.einsum("...i,...i->...", diff, diff)
    d2 = np.where(np.isnan(d2), np.inf, d2)
    pick = np.argmin(d2, axis=0)
    return np.take_along_axis(candidates, pick[None, ..., None], axis=0)[0]


class SurfaceDistanceField:
    """Reusable exact point-to-mesh distance queries against one target mesh."""

    def __init__(self, target: TriangleMesh, k_candidates: int = 16):
        if not len(target.triangles):
            raise MeshError("target mesh has no triangles")
        self.target = target
        self.tri = target.vertices[target.triangles]
        centers = self.tri.mean(axis=1)
        self.k = min(k_candidates, len(centers))
        self.tree = cKDTree(centers)

    def closest_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Exact closest surface point and distance for each query point."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        _, idx = self.tree.query(pts, k=self.k, workers=-1)
        if self.k == 1:
            idx = idx[:, None]
        cand = self.tri[idx]
        closest = _closest_point_on_triangles(
            pts[:, None, :], cand[:, :, 0], cand[:, :, 1], cand[:, :, 2]
        )
        d = np.linalg.norm(closest - pts[:, None, :], axis=2)
        pick = d.argmin(axis=1)
        rows = np.arange(len(pts))
        return closest[rows, pick], d[rows, pick]

    def distances(self, points: np.ndarray) -> np.ndarray:
        return self.closest_points(points)[1]


def point_to_plane_error(source, target: TriangleMesh, k_candidates: int = 16):
    """Exact distance from each source vertex/point to the target surface.

    The distance to the closest triangle's plane is clamped to the triangle's
    closest-point distance when the projection falls outside it. Returns
    (per-point distances, mean).
    """
    if isinstance(source, TriangleMesh):
        pts = source.vertices
    else:
        pts = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    if not len(pts):
        return np.zeros(0), 0.0
    field = SurfaceDistanceField(target, k_candidates)
    d = field.distances(pts)
    return d, float(d.mean())


# ---------------------------------------------------------------------------
# PLY I/O (ASCII)


def write_ply(path, mesh: TriangleMesh) -> None:
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property double x",
        "property double y",
        "property double z",
        "property double nx",
        "property double ny",
        "property double nz",
        f"element face {len(mesh.triangles)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    out = ["\n".join(lines)]
    for v, n in zip(mesh.vertices, mesh.vertex_normals):
        out.append(f"\n{v[0]:.17g} {v[1]:.17g} {v[2]:.17g} {n[0]:.17g} {n[1]:.17g} {n[2]:.17g}")
    for t in mesh.triangles:
        out.append(f"\n3 {t[0]} {t[1]} {t[2]}")
    out.append("\n")
    with open(path, "w") as fh:
        fh.write("".join(out))


def read_ply(path) -> TriangleMesh:
    """Read an ASCII PLY mesh; degenerate triangles are dropped with a warning."""
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise MeshError(f"{path}: not a PLY file")
        fmt = fh.readline().strip()
        if not fmt.startswith("format ascii"):
            raise MeshError(f"{path}: only ASCII PLY is supported")
        counts = {}
        props: dict[str, list[str]] = {}
        current = None
        while True:
            line = fh.readline()
            if not line:
                raise MeshError(f"{path}: truncated header")
            line = line.strip()
            if line == "end_header":
                break
            parts = line.split()
            if parts[0] == "comment":
                continue
            if parts[0] == "element":
                current = parts[1]
                counts[current] = int(parts[2])
                props[current] = []
            elif parts[0] == "property" and current is not None:
                props[current].append(parts[-1])

        nv = counts.get("vertex", 0)
        names = props.get("vertex", [])
        rows = np.loadtxt(
            (fh.readline() for _ in range(nv)), dtype=np.float64, ndmin=2
        ) if nv else np.zeros((0, 0))
        col = {name: i for i, name in enumerate(names)}
        for need in ("x", "y", "z"):
            if need not in col:
                raise MeshError(f"{path}: vertex property {need} missing")
        verts = rows[:, [col["x"], col["y"], col["z"]]] if nv else np.zeros((0, 3))
        normals = None
        if all(k in col for k in ("nx", "ny", "nz")) and nv:
            normals = rows[:, [col["nx"], col["ny"], col["nz"]]]

        nf = counts.get("face", 0)
        tris = []
        for _ in range(nf):
            parts = fh.readline().split()
            if int(parts[0]) != 3:
                raise MeshError(f"{path}: only triangle faces are supported")
            tris.append((int(parts[1]), int(parts[2]), int(parts[3])))
    triangles = np.asarray(tris, dtype=np.int64).reshape(-1, 3)

    if len(triangles):
        tri = verts[triangles]
        areas = 0.5 * np.linalg.norm(
            np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
        )
        bad = areas < DEGENERATE_AREA
        if bad.any():
            log.warning("%s: dropping %d degenerate triangles", path, int(bad.sum()))
            triangles = triangles[~bad]
    return TriangleMesh(verts, triangles, normals)
