"""Synthetic fracture cases with exact ground truth.

Planar cuts of a watertight mesh produce closed fragments whose cap
triangles are known fracture surface, and fragment displacements are
sampled inside stated caps, so recovered poses and labels can be scored
against exact truth. A volume-level path re-renders displaced fragments
into a fresh intensity grid to exercise the full pipeline end to end.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .classify import CLASS_NAMES, ARTICULAR, FRACTURE, PERIOSTEAL
from .mesh import (
    RigidTransform,
    TriangleMesh,
    apply_transform,
    area_centroid,
    boundary_edge_count,
    enclosed_volume,
)
from .partition import _UnionFind, _edge_table
from .volume import PhantomSpec, VoxelGrid

log = logging.getLogger(__name__)

LABEL_DTYPE = "<U10"


class SynthError(ValueError):
    """Raised for invalid plans, non-solid inputs, or impossible layouts."""


@dataclass(frozen=True, slots=True, eq=False)
class Plane:
    """Oriented plane; signed distance is positive on the normal side."""

    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.point, dtype=np.float64).reshape(3)
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        length = np.linalg.norm(n)
        if length == 0.0 or not np.isfinite(length):
            raise SynthError("plane normal must be a nonzero finite vector")
        object.__setattr__(self, "point", p)
        object.__setattr__(self, "normal", n / length)

    def signed_distance(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.point) @ self.normal


@dataclass(frozen=True, slots=True, eq=False)
class Fragment:
    """Closed fragment mesh with one ground-truth class label per triangle."""

    mesh: TriangleMesh
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=LABEL_DTYPE)
        if len(labels) != len(self.mesh.triangles):
            raise SynthError("one label per triangle required")
        bad = ~np.isin(labels, CLASS_NAMES)
        if bad.any():
            raise SynthError(f"unknown label {labels[bad][0]!r}")
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True, slots=True, eq=False)
class FracturePlan:
    """Cut planes plus one ground-truth transform per resulting fragment."""

    planes: tuple
    transforms: tuple
    seed: int
    displacement_cap: float
    rotation_cap_deg: float

    def __post_init__(self):
        object.__setattr__(self, "planes", tuple(self.planes))
        object.__setattr__(self, "transforms", tuple(self.transforms))
        if not all(isinstance(p, Plane) for p in self.planes):
            raise SynthError("planes must be Plane instances")
        if not self.transforms or not all(
            isinstance(t, RigidTransform) for t in self.transforms
        ):
            raise SynthError("transforms must be a nonempty tuple of RigidTransforms")
        if self.displacement_cap < 0.0 or self.rotation_cap_deg < 0.0:
            raise SynthError("caps must be non-negative")


# ---------------------------------------------------------------------------
# mesh-level cutting


def _cap_loops(triangle_rows: np.ndarray, vertex_count: int) -> list[list[int]]:
    """Chain the once-used directed edges of an open mesh into loops."""
    directed = triangle_rows[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    code = directed.min(axis=1) * vertex_count + directed.max(axis=1)
    unique, counts = np.unique(code, return_counts=True)
    on_boundary = np.isin(code, unique[counts == 1])
    outgoing: dict[int, int] = {}
    for u, w in directed[on_boundary].tolist():
        if u in outgoing:
            raise SynthError("cut boundary is not a set of simple loops")
        outgoing[u] = w
    loops = []
    while outgoing:
        start = min(outgoing)
        loop = [start]
        node = outgoing.pop(start)
        while node != start:
            loop.append(node)
            if node not in outgoing:
                raise SynthError("cut boundary does not close")
            node = outgoing.pop(node)
        loops.append(loop)
    return loops


def _cut_piece(vertices, triangles, labels, plane: Plane, snap_eps: float):
    """Split one closed piece by a plane into a positive and a negative side.

    Cut vertices are created once per crossed edge, so the two sides share
    exact cap boundary positions, and each side's cut loops are closed by a
    centroid fan labeled Fracture. Returns (vertices, pos_tris, pos_labels,
    neg_tris, neg_labels); the vertex array is shared and callers compact
    it per connected component afterwards.
    """
    d = plane.signed_distance(vertices)
    d = np.where(np.abs(d) <= snap_eps, 0.0, d)
    sgn = np.sign(d)
    tri_sgn = sgn[triangles]
    pos_keep = (tri_sgn >= 0).all(axis=1) & (tri_sgn > 0).any(axis=1)
    neg_keep = (tri_sgn <= 0).all(axis=1) & (tri_sgn < 0).any(axis=1)
    # fully coplanar slivers have no volume on either side; keep them positive
    pos_keep |= (tri_sgn == 0).all(axis=1)
    crossing = np.where(~(pos_keep | neg_keep))[0]

    grown = [vertices]
    total = len(vertices)
    cut_cache: dict[tuple[int, int], int] = {}

    def cut_point(a: int, b: int) -> int:
        nonlocal total
        key = (a, b) if a < b else (b, a)
        idx = cut_cache.get(key)
        if idx is None:
            da, db = d[key[0]], d[key[1]]
            t = da / (da - db)
            grown.append(vertices[key[0]] + t * (vertices[key[1]] - vertices[key[0]]))
            idx = cut_cache[key] = total
            total += 1
        return idx

    sides = {
        1: [list(triangles[pos_keep]), list(labels[pos_keep])],
        -1: [list(triangles[neg_keep]), list(labels[neg_keep])],
    }
    for row in crossing:
        s = tri_sgn[row]
        label = labels[row]
        if (s == 0).any():
            shift = int(np.where(s == 0)[0][0])
        elif (s > 0).sum() == 1:
            shift = int(np.where(s > 0)[0][0])
        else:
            shift = int(np.where(s < 0)[0][0])
        order = [shift, (shift + 1) % 3, (shift + 2) % 3]
        v0, v1, v2 = (int(triangles[row][k]) for k in order)
        s0, s1, s2 = (s[k] for k in order)
        if s0 == 0:
            # one vertex on the plane, the other two on opposite sides
            pc = cut_point(v1, v2)
            lone_side = int(s1)
            sides[lone_side][0].append(np.array([v0, v1, pc]))
            sides[lone_side][1].append(label)
            sides[-lone_side][0].append(np.array([v0, pc, v2]))
            sides[-lone_side][1].append(label)
        else:
            # v0 alone on its side; the far pair keeps a split quad
            pa = cut_point(v0, v1)
            pb = cut_point(v2, v0)
            lone_side = int(s0)
            sides[lone_side][0].append(np.array([v0, pa, pb]))
            sides[lone_side][1].append(label)
            sides[-lone_side][0].append(np.array([v1, v2, pb]))
            sides[-lone_side][0].append(np.array([v1, pb, pa]))
            sides[-lone_side][1].extend([label, label])

    results = {}
    for side in (1, -1):
        rows, labs = sides[side]
        if not rows:
            results[side] = (np.zeros((0, 3), np.int64), np.zeros(0, LABEL_DTYPE))
            continue
        tris = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
        for loop in _cap_loops(tris, total):
            vertex_stack = np.vstack(grown)
            # concentric shrunk copies of the loop keep cap triangles near
            # the resolution of the surrounding mesh, so crease curvature at
            # the cut ring is not diluted by oversized cap triangles
            pts = vertex_stack[loop]
            center = pts.mean(axis=0)
            spokes = pts - center
            radius = float(np.linalg.norm(spokes, axis=1).mean())
            spacing = float(
                np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1).mean()
            )
            rings = max(1, int(round(radius / max(spacing, 1e-12))))
            ring_ids = [np.asarray(loop, dtype=np.int64)]
            new_rows = []
            for k in range(1, rings):
                scale = 1.0 - k / rings
                new_rows.append(center + scale * spokes)
                ring_ids.append(np.arange(total, total + len(loop), dtype=np.int64))
                total += len(loop)
            center_id = total
            total += 1
            new_rows.append(center.reshape(1, 3))
            grown = [vertex_stack] + new_rows
            cap_rows = []
            for outer, inner in zip(ring_ids[:-1], ring_ids[1:]):
                outer_next = np.roll(outer, -1)
                inner_next = np.roll(inner, -1)
                for i in range(len(loop)):
                    cap_rows.append((outer_next[i], outer[i], inner[i]))
                    cap_rows.append((outer_next[i], inner[i], inner_next[i]))
            last = ring_ids[-1]
            last_next = np.roll(last, -1)
            for i in range(len(loop)):
                cap_rows.append((last_next[i], last[i], center_id))
            tris = np.vstack([tris, np.asarray(cap_rows, dtype=np.int64)])
            labs = labs + [FRACTURE] * len(cap_rows)
        results[side] = (tris, np.asarray(labs, dtype=LABEL_DTYPE))

    vertex_stack = np.vstack(grown)
    return (vertex_stack, *results[1], *results[-1])


def _components(vertices, triangles, labels):
    """Split a triangle soup into edge-connected closed components."""
    if not len(triangles):
        return []
    edges, start, owners = _edge_table(triangles)
    union = _UnionFind(len(triangles))
    for e in range(len(edges)):
        group = owners[start[e] : start[e + 1]]
        for k in range(1, len(group)):
            union.union(int(group[0]), int(group[k]))
    roots = np.array([union.find(k) for k in range(len(triangles))])
    pieces = []
    for root in np.unique(roots):
        tri_ids = np.where(roots == root)[0]
        tris = triangles[tri_ids]
        used = np.unique(tris)
        remap = np.zeros(len(vertices), dtype=np.int64)
        remap[used] = np.arange(len(used))
        pieces.append((vertices[used], remap[tris], labels[tri_ids]))
    return pieces


def fracture_mesh(mesh: TriangleMesh, planes, labels=None) -> list[Fragment]:
    """Cut a watertight mesh by planes into closed labeled fragments.

    Input surface triangles keep their labels (all Periosteal when none
    given); cap triangles are labeled Fracture. A plane that divides no
    current piece is ignored with a warning. Fragments are returned
    largest enclosed volume first.
    """
    if boundary_edge_count(mesh) != 0:
        raise SynthError("input mesh is not watertight")
    if labels is None:
        labels = np.full(len(mesh.triangles), PERIOSTEAL, dtype=LABEL_DTYPE)
    labels = np.asarray(labels, dtype=LABEL_DTYPE)
    if len(labels) != len(mesh.triangles):
        raise SynthError("one label per triangle required")
    bad = ~np.isin(labels, CLASS_NAMES)
    if bad.any():
        raise SynthError(f"unknown label {labels[bad][0]!r}")

    snap_eps = 1e-9 * float(
        np.linalg.norm(mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0))
    )
    pieces = [(mesh.vertices, mesh.triangles, labels)]
    for j, plane in enumerate(planes):
        if not isinstance(plane, Plane):
            raise SynthError("planes must be Plane instances")
        divided = False
        step = []
        for vertices, tris, labs in pieces:
            out = _cut_piece(vertices, tris, labs, plane, snap_eps)
            grown, pos_tris, pos_labs, neg_tris, neg_labs = out
            if len(pos_tris) and len(neg_tris):
                divided = True
            for side_tris, side_labs in ((pos_tris, pos_labs), (neg_tris, neg_labs)):
                if len(side_tris):
                    step.append((grown, side_tris, side_labs))
        if not divided:
            log.warning("plane %d misses the solid; ignored", j)
        pieces = step

    fragments = []
    for vertices, tris, labs in pieces:
        for piece_vertices, piece_tris, piece_labs in _components(vertices, tris, labs):
            fragments.append(
                Fragment(TriangleMesh(piece_vertices, piece_tris), piece_labs)
            )
    fragments.sort(key=lambda fragment: -enclosed_volume(fragment.mesh))
    return fragments


def phantom_surface_labels(mesh: TriangleMesh, spec: PhantomSpec) -> np.ndarray:
    """Ground-truth class per surface triangle of an intact tube phantom.

    The phantom assigns its articular shell by axial depth, so the surface
    above length - subchondral_depth (side wall included) is exactly the
    articular region; everything else on the intact surface is periosteal.
    """
    centroids = mesh.vertices[mesh.triangles].mean(axis=1)
    floor = spec.length - spec.subchondral_depth
    return np.where(centroids[:, 2] > floor, ARTICULAR, PERIOSTEAL).astype(LABEL_DTYPE)


# ---------------------------------------------------------------------------
# displacement and scoring


def displace(fragments, plan: FracturePlan) -> list[Fragment]:
    """Apply the plan's per-fragment ground-truth transforms."""
    if len(fragments) != len(plan.transforms):
        raise SynthError(
            f"plan has {len(plan.transforms)} transforms "
            f"for {len(fragments)} fragments"
        )
    return [
        Fragment(apply_transform(t, fragment.mesh), fragment.labels.copy())
        for fragment, t in zip(fragments, plan.transforms)
    ]


def pose_error(
    estimated: RigidTransform, truth: RigidTransform, centroid
) -> tuple[float, float]:
    """Rotation (deg) and centroid displacement (mm) between two poses.

    Translation error is measured at the fragment centroid so a pure
    rotation about the displaced fragment scores zero translation.
    """
    relative = estimated.compose(truth.invert())
    c = np.asarray(centroid, dtype=np.float64).reshape(3)
    shift = estimated.apply_points(c) - truth.apply_points(c)
    return relative.angle_deg(), float(np.linalg.norm(shift))


def _unit(vector: np.ndarray) -> np.ndarray:
    length = np.linalg.norm(vector)
    if length == 0.0:
        return np.array([0.0, 0.0, 1.0])
    return vector / length


def _aabb(points: np.ndarray) -> np.ndarray:
    return np.vstack([points.min(axis=0), points.max(axis=0)])


def _disjoint(a: np.ndarray, b: np.ndarray, pad: float) -> bool:
    return bool(((a[1] + pad < b[0]) | (b[1] + pad < a[0])).any())


def make_case(
    mesh: TriangleMesh,
    spec: PhantomSpec,
    fragment_count: int,
    seed: int,
    displacement_cap: float = 50.0,
    rotation_cap_deg: float = 30.0,
    separate: bool = False,
) -> tuple[FracturePlan, list[Fragment]]:
    """Cut a tube phantom into tilted transverse slabs and displace them.

    Fragment 0 (largest volume) is the base and keeps the identity
    transform; every other fragment gets a rotation about its centroid of
    at most rotation_cap_deg plus a centroid displacement of at most
    displacement_cap. With separate=True, transforms are re-drawn until
    displaced bounding boxes are pairwise disjoint, so the case can be
    re-rendered into one volume without fragments touching.
    """
    if fragment_count < 1:
        raise SynthError("fragment_count must be at least 1")
    rng = np.random.default_rng(seed)
    slab = spec.length / fragment_count
    planes = []
    for i in range(1, fragment_count):
        z0 = slab * i + rng.uniform(-0.05, 0.05) * slab
        tilt = np.radians(rng.uniform(4.0, 10.0))
        phi = rng.uniform(0.0, 2.0 * np.pi)
        normal = np.array(
            [np.sin(tilt) * np.cos(phi), np.sin(tilt) * np.sin(phi), np.cos(tilt)]
        )
        planes.append(Plane(np.array([0.0, 0.0, z0]), normal))

    fragments = fracture_mesh(mesh, planes, phantom_surface_labels(mesh, spec))
    if len(fragments) != fragment_count:
        raise SynthError(
            f"cutting produced {len(fragments)} fragments, "
            f"expected {fragment_count}"
        )

    transforms = [RigidTransform.identity()]
    boxes = [_aabb(fragments[0].mesh.vertices)]
    for k in range(1, fragment_count):
        centroid = area_centroid(fragments[k].mesh)
        chosen = None
        for _ in range(500):
            axis = _unit(rng.normal(size=3))
            angle = np.radians(rng.uniform(0.0, rotation_cap_deg))
            direction = _unit(rng.normal(size=3))
            low = 0.5 if separate else 0.0
            magnitude = rng.uniform(low, 1.0) * displacement_cap
            candidate = RigidTransform(np.eye(3), direction * magnitude).compose(
                RigidTransform.from_axis_angle(axis, angle, center=centroid)
            )
            if not separate:
                chosen = candidate
                break
            box = _aabb(candidate.apply_points(fragments[k].mesh.vertices))
            if all(_disjoint(box, other, pad=2.0) for other in boxes):
                chosen = candidate
                boxes.append(box)
                break
        if chosen is None:
            raise SynthError(f"could not separate fragment {k} within caps")
        transforms.append(chosen)

    plan = FracturePlan(
        tuple(planes), tuple(transforms), seed, displacement_cap, rotation_cap_deg
    )
    return plan, displace(fragments, plan)


# ---------------------------------------------------------------------------
# volume-level path


def fracture_volume(
    grid: VoxelGrid,
    plan: FracturePlan,
    solid_threshold: float = 0.0,
    background: float | None = None,
    margin: float = 3.0,
) -> VoxelGrid:
    """Re-render the displaced fragments of an intact grid into a new grid.

    Solid voxels are partitioned by the plan's planes (sign vector plus
    6-connectivity), regions are ranked by voxel count to match the
    largest-volume-first fragment order of fracture_mesh, and each region's
    intensities are resampled at the inverse-transformed voxel centers.
    """
    solid = grid.intensities > solid_threshold
    if not solid.any():
        raise SynthError("grid has no solid voxels above solid_threshold")
    if background is None:
        background = float(grid.intensities.min())

    dims = grid.dims
    axes = [grid.origin[i] + grid.spacing[i] * np.arange(dims[i]) for i in range(3)]
    key = np.zeros(dims, dtype=np.int64)
    for j, plane in enumerate(plan.planes):
        n = plane.normal
        d = (
            (n[0] * axes[0])[:, None, None]
            + (n[1] * axes[1])[None, :, None]
            + (n[2] * axes[2])[None, None, :]
            - n @ plane.point
        )
        key += (d > 0.0).astype(np.int64) << j

    regions = np.zeros(dims, dtype=np.int32)
    count = 0
    for value in np.unique(key[solid]):
        component, n_comp = ndimage.label(solid & (key == value))
        for c in range(1, n_comp + 1):
            count += 1
            regions[component == c] = count
    if count != len(plan.transforms):
        raise SynthError(
            f"volume cut produced {count} fragments, "
            f"plan has {len(plan.transforms)}"
        )
    sizes = np.bincount(regions.reshape(-1), minlength=count + 1)[1:]
    order = np.argsort(-sizes, kind="stable") + 1

    spans = ndimage.find_objects(regions)

    def moved_corners(region_id: int, transform: RigidTransform) -> np.ndarray:
        span = spans[region_id - 1]
        lo = [span[i].start for i in range(3)]
        hi = [span[i].stop - 1 for i in range(3)]
        corners = np.array(
            [
                [x, y, z]
                for x in (lo[0], hi[0])
                for y in (lo[1], hi[1])
                for z in (lo[2], hi[2])
            ],
            dtype=np.float64,
        )
        return transform.apply_points(grid.world_coordinates(corners))

    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for rank, region_id in enumerate(order):
        moved = moved_corners(int(region_id), plan.transforms[rank])
        lo = np.minimum(lo, moved.min(axis=0))
        hi = np.maximum(hi, moved.max(axis=0))
    lo -= margin
    hi += margin
    out_dims = tuple(np.ceil((hi - lo) / grid.spacing).astype(int) + 1)
    out = np.full(out_dims, background, dtype=np.float32)

    overlap = 0
    for rank, region_id in enumerate(order):
        transform = plan.transforms[rank]
        moved = moved_corners(int(region_id), transform)
        idx_lo = np.floor((moved.min(axis=0) - lo) / grid.spacing).astype(int) - 1
        idx_hi = np.ceil((moved.max(axis=0) - lo) / grid.spacing).astype(int) + 2
        idx_lo = np.clip(idx_lo, 0, np.array(out_dims))
        idx_hi = np.clip(idx_hi, 0, np.array(out_dims))
        grids = np.meshgrid(
            *[np.arange(idx_lo[i], idx_hi[i]) for i in range(3)], indexing="ij"
        )
        positions = lo + np.stack(grids, axis=-1) * grid.spacing
        back = transform.invert().apply_points(positions.reshape(-1, 3))
        coords = ((back - grid.origin) / grid.spacing).T.reshape(3, *grids[0].shape)
        mask = ndimage.map_coordinates(
            (regions == region_id).astype(np.float32), coords, order=1, cval=0.0
        )
        values = ndimage.map_coordinates(
            grid.intensities, coords, order=1, cval=background
        )
        selected = mask >= 0.5
        block = out[
            idx_lo[0] : idx_hi[0], idx_lo[1] : idx_hi[1], idx_lo[2] : idx_hi[2]
        ]
        overlap += int(np.count_nonzero(block[selected] > background + 1e-3))
        block[selected] = values[selected]
    if overlap:
        log.warning("displaced fragments overlap in %d voxels", overlap)
    return VoxelGrid(grid.spacing, lo, out)


# ---------------------------------------------------------------------------
# plan files


def write_plan(path, plan: FracturePlan) -> None:
    """Write a plan as JSON; keys sorted so output bytes are deterministic."""
    payload = {
        "displacement_cap": plan.displacement_cap,
        "planes": [
            {
                "normal": [float(v) for v in p.normal],
                "point": [float(v) for v in p.point],
            }
            for p in plan.planes
        ],
        "rotation_cap_deg": plan.rotation_cap_deg,
        "seed": plan.seed,
        "transforms": [t.to_flat() for t in plan.transforms],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def read_plan(path) -> FracturePlan:
    try:
        payload = json.loads(Path(path).read_text())
        planes = tuple(
            Plane(np.asarray(e["point"], np.float64), np.asarray(e["normal"], np.float64))
            for e in payload["planes"]
        )
        transforms = tuple(
            RigidTransform.from_flat(e) for e in payload["transforms"]
        )
        return FracturePlan(
            planes,
            transforms,
            int(payload["seed"]),
            float(payload["displacement_cap"]),
            float(payload["rotation_cap_deg"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SynthError(f"invalid plan file {path}: {exc}") from exc
