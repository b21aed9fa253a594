"""Deterministic mesh builders used as test inputs."""

from __future__ import annotations

import numpy as np

from bonefit.mesh import TriangleMesh


def tetrahedron(edge: float = 1.0) -> TriangleMesh:
    """Regular tetrahedron with the given edge length, centered at the origin."""
    v = np.array(
        [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64
    )
    v *= edge / np.sqrt(8.0)
    t = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriangleMesh(v, t, orient=True)


def unit_cube(subdiv: int = 1) -> TriangleMesh:
    """Axis-aligned unit cube [0,1]^3, each face an n x n triangle grid."""
    verts: list[tuple] = []
    index: dict[tuple, int] = {}
    tris = []

    def vid(p):
        key = tuple(round(c, 9) for c in p)
        if key not in index:
            index[key] = len(verts)
            verts.append(key)
        return index[key]

    n = subdiv
    faces = [
        ((0, 0, 0), (1, 0, 0), (0, 1, 0)),  # z=0, outward -z
        ((0, 0, 1), (0, 1, 0), (1, 0, 0)),  # z=1, outward +z
        ((0, 0, 0), (0, 0, 1), (1, 0, 0)),  # y=0
        ((0, 1, 0), (1, 0, 0), (0, 0, 1)),  # y=1
        ((0, 0, 0), (0, 1, 0), (0, 0, 1)),  # x=0
        ((1, 0, 0), (0, 0, 1), (0, 1, 0)),  # x=1
    ]
    for origin, du, dv in faces:
        o = np.array(origin, dtype=np.float64)
        u = np.array(du, dtype=np.float64) / n
        v = np.array(dv, dtype=np.float64) / n
        for i in range(n):
            for j in range(n):
                p00 = vid(o + i * u + j * v)
                p10 = vid(o + (i + 1) * u + j * v)
                p01 = vid(o + i * u + (j + 1) * v)
                p11 = vid(o + (i + 1) * u + (j + 1) * v)
                tris.append((p00, p10, p11))
                tris.append((p00, p11, p01))
    return TriangleMesh(np.array(verts, dtype=np.float64), np.array(tris), orient=True)


def icosphere(radius: float = 1.0, subdiv: int = 3, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Geodesic sphere from a subdivided icosahedron."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    v /= np.linalg.norm(v, axis=1)[:, None]
    t = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    verts = [tuple(p) for p in v]
    index = {p: i for i, p in enumerate(verts)}

    def midpoint(i, j):
        m = (np.array(verts[i]) + np.array(verts[j]))
        m /= np.linalg.norm(m)
        key = tuple(m)
        if key not in index:
            index[key] = len(verts)
            verts.append(key)
        return index[key]

    tris = t.tolist()
    for _ in range(subdiv):
        nxt = []
        for a, b, c in tris:
            ab = midpoint(a, b)
            bc = midpoint(b, c)
            ca = midpoint(c, a)
            nxt += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        tris = nxt
    pts = np.array(verts, dtype=np.float64) * radius + np.asarray(center, dtype=np.float64)
    return TriangleMesh(pts, np.array(tris), orient=True)


def capped_cylinder(radius: float = 5.0, height: float = 20.0, n_theta: int = 48, n_z: int = 20) -> TriangleMesh:
    """Closed cylinder along +z, base at z=0."""
    verts = []
    for iz in range(n_z + 1):
        z = height * iz / n_z
        for it in range(n_theta):
            th = 2.0 * np.pi * it / n_theta
            verts.append((radius * np.cos(th), radius * np.sin(th), z))
    bottom_center = len(verts)
    verts.append((0.0, 0.0, 0.0))
    top_center = len(verts)
    verts.append((0.0, 0.0, height))

    tris = []
    for iz in range(n_z):
        for it in range(n_theta):
            a = iz * n_theta + it
            b = iz * n_theta + (it + 1) % n_theta
            c = a + n_theta
            d = b + n_theta
            tris.append((a, b, d))
            tris.append((a, d, c))
    for it in range(n_theta):
        a = it
        b = (it + 1) % n_theta
        tris.append((bottom_center, b, a))
        a = n_z * n_theta + it
        b = n_z * n_theta + (it + 1) % n_theta
        tris.append((top_center, a, b))
    return TriangleMesh(np.array(verts, dtype=np.float64), np.array(tris), orient=True)


def planar_grid(n: int = 10, spacing: float = 1.0, z: float = 0.0) -> TriangleMesh:
    """Open (n+1) x (n+1) vertex grid in the z-plane, normals +z."""
    xs = np.arange(n + 1) * spacing
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    verts = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)])
    tris = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            b = a + 1
            c = a + (n + 1)
            d = c + 1
            tris.append((a, b, d))
            tris.append((a, d, c))
    return TriangleMesh(verts, np.array(tris))
