"""Independent reference computations the tests check library results against.

Everything here is written from first principles (brute force where affordable)
and deliberately avoids calling the library code paths under test.
"""

from __future__ import annotations

import numpy as np


def edge_lengths_brute(vertices, triangles) -> np.ndarray:
    """Unique undirected edge lengths via a python set."""
    seen = set()
    out = []
    for a, b, c in np.asarray(triangles):
        for i, j in ((a, b), (b, c), (c, a)):
            key = (min(i, j), max(i, j))
            if key not in seen:
                seen.add(key)
                d = np.asarray(vertices[i]) - np.asarray(vertices[j])
                out.append(float(np.sqrt((d * d).sum())))
    return np.asarray(out)


def signed_volume_brute(vertices, triangles) -> float:
    total = 0.0
    v = np.asarray(vertices)
    for a, b, c in np.asarray(triangles):
        total += float(np.dot(v[a], np.cross(v[b], v[c]))) / 6.0
    return total


def area_brute(vertices, triangles) -> float:
    v = np.asarray(vertices)
    total = 0.0
    for a, b, c in np.asarray(triangles):
        total += 0.5 * float(np.linalg.norm(np.cross(v[b] - v[a], v[c] - v[a])))
    return total


def pairwise_min_distance(points) -> float:
    p = np.asarray(points, dtype=np.float64)
    if len(p) < 2:
        return np.inf
    best = np.inf
    for i in range(len(p) - 1):
        d = np.linalg.norm(p[i + 1 :] - p[i], axis=1).min()
        best = min(best, float(d))
    return best


def point_triangle_distance_brute(p, a, b, c, samples: int = 60) -> float:
    """Dense barycentric sampling lower-bounds nothing but converges from above."""
    p = np.asarray(p, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    best = np.inf
    for i in range(samples + 1):
        for j in range(samples + 1 - i):
            u = i / samples
            v = j / samples
            q = a + u * (b - a) + v * (c - a)
            best = min(best, float(np.linalg.norm(p - q)))
    return best


def connected_components_triangles(triangles) -> list[set[int]]:
    """Triangle components under shared-edge connectivity, via union-find."""
    triangles = np.asarray(triangles)
    parent = list(range(len(triangles)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(x, y):
        parent[find(x)] = find(y)

    edge_owner: dict[tuple, int] = {}
    for t, (a, b, c) in enumerate(triangles):
        for i, j in ((a, b), (b, c), (c, a)):
            key = (min(i, j), max(i, j))
            if key in edge_owner:
                union(t, edge_owner[key])
            else:
                edge_owner[key] = t
    groups: dict[int, set] = {}
    for t in range(len(triangles)):
        groups.setdefault(find(t), set()).add(t)
    return list(groups.values())


def normal_clusters(vertices, triangles, cos_tol: float = 0.9) -> int:
    """Count clusters of triangles by face-normal direction (for prisms/cubes)."""
    v = np.asarray(vertices)
    normals = []
    for a, b, c in np.asarray(triangles):
        n = np.cross(v[b] - v[a], v[c] - v[a])
        normals.append(n / np.linalg.norm(n))
    clusters: list[np.ndarray] = []
    for n in normals:
        for c in clusters:
            if float(np.dot(n, c)) > cos_tol:
                break
        else:
            clusters.append(n)
    return len(clusters)


def grid_voxel_count_inside_sphere(radius, spacing, extent) -> int:
    ax = np.arange(-extent, extent + spacing / 2, spacing)
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    return int((x * x + y * y + z * z <= radius * radius).sum())


def polygon_area_3d(loop_points, normal) -> float:
    """Area of a planar polygon embedded in 3D via the shoelace flux formula."""
    pts = np.asarray(loop_points, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    total = np.zeros(3)
    for i in range(len(pts)):
        total += np.cross(pts[i], pts[(i + 1) % len(pts)])
    return abs(float(np.dot(total, n))) / 2.0


def rotation_angle_deg_brute(r) -> float:
    c = (np.trace(np.asarray(r)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def axis_angle_between_deg(a, b) -> float:
    """Angle between two directions, sign-insensitive, in degrees."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = abs(float(np.dot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return float(np.degrees(np.arccos(np.clip(c, 0.0, 1.0))))


def pearson_brute(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    pc = p - p.mean()
    qc = q - q.mean()
    return float((pc * qc).sum() / np.sqrt((pc * pc).sum() * (qc * qc).sum()))


def histogram_brute(values, width) -> list[int]:
    values = np.asarray(values, dtype=np.float64)
    if not len(values):
        return []
    nbins = int(np.floor(values.max() / width)) + 1
    counts = [0] * nbins
    for v in values:
        counts[int(np.floor(v / width))] += 1
    return counts

def plane_cross_section_area(vertices, triangles, point, normal) -> float:
    """Cross-section area of a closed mesh at a plane, by Stokes on the
    crossing segments; each segment is oriented from its triangle's winding
    so the sum equals the enclosed polygon area exactly."""
    vertices = np.asarray(vertices, dtype=np.float64)
    point = np.asarray(point, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    d = (vertices - point) @ n
    total = 0.0
    for tri in np.asarray(triangles):
        s = d[tri]
        if (s >= 0).all() or (s <= 0).all():
            continue
        cuts = []
        for k in range(3):
            a, b = tri[k], tri[(k + 1) % 3]
            if d[a] == 0.0 and not any(np.array_equal(vertices[a], c) for c in cuts):
                cuts.append(vertices[a])
            if d[a] * d[b] < 0.0:
                t = d[a] / (d[a] - d[b])
                cuts.append(vertices[a] + t * (vertices[b] - vertices[a]))
        if len(cuts) != 2:
            continue
        p, q = cuts
        tri_normal = np.cross(
            vertices[tri[1]] - vertices[tri[0]], vertices[tri[2]] - vertices[tri[0]]
        )
        direction = np.cross(tri_normal, n)
        if np.dot(q - p, direction) < 0.0:
            p, q = q, p
        total += float(np.dot(np.cross(p - point, q - point), n)) / 2.0
    return abs(total)
