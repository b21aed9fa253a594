"""Decomposition of a surface into patches bounded by curvature ridges.

Fracture edges and anatomical creases show up as lines of high mean
curvature.  Flooding triangle connectivity while refusing to cross any
edge that lies on such a line splits the mesh into patches, each either a
piece of the original outer surface or a fracture face.  Undersized
patches, usually slivers along a ridge, are absorbed into their largest
neighbor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import TriangleMesh, surface_area, triangle_areas, vertex_mean_curvature


class PartitionError(Exception):
    """Raised for invalid decompositions or serialization problems."""


@dataclass(frozen=True, slots=True, eq=False)
class SurfacePatch:
    """One connected patch: triangle ids, their vertices, and total area."""

    patch_id: int
    triangle_ids: np.ndarray
    vertex_ids: np.ndarray
    area: float


@dataclass(frozen=True, slots=True, eq=False)
class PatchDecomposition:
    """A complete, disjoint assignment of every triangle to one patch."""

    mesh: TriangleMesh
    patches: tuple[SurfacePatch, ...]
    triangle_patch: np.ndarray
    ridge_threshold: float

    def __len__(self) -> int:
        return len(self.patches)


def _edge_table(triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unique undirected edges plus, for each, the triangles that own it.

    Returns (unique_edges, owner_start, owner_triangles) where the owners
    of unique edge e are owner_triangles[owner_start[e]:owner_start[e + 1]].
    """
    count = len(triangles)
    edges = np.sort(
        triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1
    )
    unique, inverse = np.unique(edges, axis=0, return_inverse=True)
    owner = np.repeat(np.arange(count, dtype=np.int64), 3)
    order = np.argsort(inverse, kind="stable")
    counts = np.bincount(inverse, minlength=len(unique))
    start = np.zeros(len(unique) + 1, dtype=np.int64)
    np.cumsum(counts, out=start[1:])
    return unique, start, owner[order]


class _UnionFind:
    def __init__(self, count: int) -> None:
        self.parent = np.arange(count, dtype=np.int64)

    def find(self, node: int) -> int:
        root = node
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[node] != root:
            self.parent[node], node = root, self.parent[node]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # Lower root wins so labels stay stable under input order.
            if ra < rb:
                self.parent[rb] = ra
            else:
                self.parent[ra] = rb


def _compact_labels(raw: np.ndarray) -> np.ndarray:
    """Renumber labels to 0..k-1 in order of first appearance."""
    labels = np.full(raw.size, -1, dtype=np.int64)
    mapping: dict[int, int] = {}
    for index, value in enumerate(raw):
        key = int(value)
        if key not in mapping:
            mapping[key] = len(mapping)
        labels[index] = mapping[key]
    return labels


def _triangle_adjacency_pairs(start: np.ndarray, owners: np.ndarray) -> np.ndarray:
    """Pairs of triangle ids sharing an edge, one row per co-owned edge."""
    group_sizes = np.diff(start)
    rows = []
    paired = np.flatnonzero(group_sizes == 2)
    if len(paired):
        rows.append(np.column_stack((owners[start[paired]], owners[start[paired] + 1])))
    for e in np.flatnonzero(group_sizes > 2):
        group = owners[start[e] : start[e + 1]]
        for i in range(len(group)):
            for j in range(i + 1, len(group)):
                rows.append(np.array([[group[i], group[j]]], dtype=np.int64))
    if not rows:
        return np.empty((0, 2), dtype=np.int64)
    return np.vstack(rows)


def partition(
    mesh: TriangleMesh,
    ridge_threshold: float,
    *,
    curvature: np.ndarray | None = None,
    smoothing_rounds: int = 1,
    min_patch_triangles: int = 5,
    merge_small: bool = True,
) -> PatchDecomposition:
    """Split a mesh into ridge-bounded patches.

    Any vertex whose mean-curvature magnitude reaches ``ridge_threshold``
    is a ridge vertex.  Triangle connectivity crosses a shared edge unless
    both of the edge's endpoints are ridge vertices, so patch boundaries
    follow ridge lines.  With ``merge_small``, patches below
    ``min_patch_triangles`` are folded into a neighbor.  ``curvature``
    overrides the internally computed field, which is smoothed
    ``smoothing_rounds`` times to suppress voxelization noise.
    """
    if not ridge_threshold > 0.0:
        raise PartitionError("ridge threshold must be positive")
    if curvature is None:
        curvature = vertex_mean_curvature(mesh, smoothing_rounds=smoothing_rounds)
    curvature = np.asarray(curvature, dtype=np.float64)
    if curvature.shape != (len(mesh.vertices),):
        raise PartitionError("curvature must hold one value per mesh vertex")
    triangle_count = len(mesh.triangles)
    if triangle_count == 0:
        raise PartitionError("cannot partition a mesh with no triangles")

    ridge = np.abs(curvature) >= ridge_threshold
    unique_edges, start, owners = _edge_table(mesh.triangles)
    blocked = ridge[unique_edges[:, 0]] & ridge[unique_edges[:, 1]]

    components = _UnionFind(triangle_count)
    for e in np.flatnonzero(~blocked):
        group = owners[start[e] : start[e + 1]]
        for other in group[1:]:
            components.union(int(group[0]), int(other))
    labels = _compact_labels(
        np.array([components.find(t) for t in range(triangle_count)])
    )

    if merge_small:
        labels = _merge_small_patches(
            labels, mesh.vertices, mesh.triangles, start, owners, triangle_areas(mesh), min_patch_triangles
        )

    return _build_decomposition(mesh, labels, ridge_threshold)


def _merge_small_patches(
    labels: np.ndarray,
    vertices: np.ndarray,
    triangles: np.ndarray,
    start: np.ndarray,
    owners: np.ndarray,
    areas: np.ndarray,
    min_patch_triangles: int,
) -> np.ndarray:
    """Repeatedly fold undersized patches into an adjacent patch.

    The recipient shares the most plain mesh edges with the patch; ties
    go to the neighbor whose mean surface normal aligns best with the
    patch (a sliver wedged into a ridge corner faces the same way as the
    surface it belongs to, not the one across the ridge), then to the
    larger area, then the lower label.  A small patch forming its own
    connected component has no neighbor and is kept.

    Neighbor edge counts, areas, and normal sums are carried across
    merges incrementally; a ridge ring can shed hundreds of slivers and
    rebuilding the full adjacency for each one is quadratic in practice.
    """
    labels = labels.copy()
    # Unnormalized triangle normals; their sum over a patch points the way
    # the patch faces on average.
    corners = vertices[triangles]
    cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])

    patch_count = int(labels.max()) + 1
    sizes = np.bincount(labels, minlength=patch_count)
    patch_area = np.bincount(labels, weights=areas, minlength=patch_count)
    normal_sum = np.zeros((patch_count, 3))
    np.add.at(normal_sum, labels, cross)

    neighbor_counts: list[dict[int, int]] = [{} for _ in range(patch_count)]
    pair_labels = labels[_triangle_adjacency_pairs(start, owners)]
    pair_labels = pair_labels[pair_labels[:, 0] != pair_labels[:, 1]]
    unique_pairs, pair_counts = np.unique(np.sort(pair_labels, axis=1), axis=0, return_counts=True)
    for (a, b), count in zip(unique_pairs, pair_counts):
        neighbor_counts[a][int(b)] = int(count)
        neighbor_counts[b][int(a)] = int(count)

    def direction(patch_label):
        total = normal_sum[patch_label]
        norm = np.linalg.norm(total)
        return total / norm if norm > 0.0 else total

    while True:
        small = np.flatnonzero((sizes > 0) & (sizes < min_patch_triangles))
        merged = False
        for patch in sorted(small, key=lambda p: (sizes[p], p)):
            patch = int(patch)
            neighbors = neighbor_counts[patch]
            if not neighbors:
                continue
            facing = direction(patch)
            best = None
            for other, count in neighbors.items():
                alignment = float(facing @ direction(other))
                rank = (count, alignment, patch_area[other], -other)
                if best is None or rank > best[0]:
                    best = (rank, other)
            target = best[1]
            labels[labels == patch] = target
            sizes[target] += sizes[patch]
            sizes[patch] = 0
            patch_area[target] += patch_area[patch]
            patch_area[patch] = 0.0
            normal_sum[target] += normal_sum[patch]
            for other, count in neighbors.items():
                del neighbor_counts[other][patch]
                if other == target:
                    continue
                total = neighbor_counts[target].get(other, 0) + count
                neighbor_counts[target][other] = total
                neighbor_counts[other][target] = total
            neighbor_counts[patch] = {}
            merged = True
            break
        if not merged:
            break
    return _compact_labels(labels)


def _build_decomposition(
    mesh: TriangleMesh, labels: np.ndarray, ridge_threshold: float
) -> PatchDecomposition:
    patches = []
    for patch_id in range(int(labels.max()) + 1):
        triangle_ids = np.flatnonzero(labels == patch_id)
        if triangle_ids.size == 0:
            raise PartitionError("patch labels must be contiguous")
        vertex_ids = np.unique(mesh.triangles[triangle_ids])
        patches.append(
            SurfacePatch(
                patch_id=patch_id,
                triangle_ids=triangle_ids,
                vertex_ids=vertex_ids,
                area=surface_area(mesh, triangle_ids),
            )
        )
    return PatchDecomposition(
        mesh=mesh,
        patches=tuple(patches),
        triangle_patch=labels,
        ridge_threshold=float(ridge_threshold),
    )


def write_partition(path, decomposition: PatchDecomposition) -> None:
    """Store a decomposition as one patch label per triangle, in text."""
    lines = [
        f"patches {len(decomposition.patches)}",
        f"triangles {len(decomposition.triangle_patch)}",
        f"ridge_threshold {decomposition.ridge_threshold:.17g}",
    ]
    lines.extend(str(int(p)) for p in decomposition.triangle_patch)
    with open(path, "w", encoding="ascii") as handle:
        handle.write("\n".join(lines) + "\n")


def read_partition(path, mesh: TriangleMesh) -> PatchDecomposition:
    with open(path, "r", encoding="ascii") as handle:
        lines = handle.read().split()
    try:
        if lines[0] != "patches" or lines[2] != "triangles" or lines[4] != "ridge_threshold":
            raise PartitionError(f"{path} is not a patch decomposition")
        patch_count = int(lines[1])
        triangle_count = int(lines[3])
        threshold = float(lines[5])
        labels = np.array([int(v) for v in lines[6:]], dtype=np.int64)
    except (IndexError, ValueError) as error:
        raise PartitionError(f"malformed patch decomposition in {path}") from error
    if triangle_count != len(mesh.triangles) or labels.size != triangle_count:
        raise PartitionError(
            f"{path} describes {triangle_count} triangles, mesh has {len(mesh.triangles)}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= patch_count):
        raise PartitionError(f"patch labels in {path} out of range")
    decomposition = _build_decomposition(mesh, labels, threshold)
    if len(decomposition.patches) != patch_count:
        raise PartitionError(f"{path} header disagrees with its labels")
    return decomposition
