"""Fragment-to-template puzzle solver.

Surface descriptors from each fragment's outer surface are paired with
curvature-compatible descriptors on the intact template, a pairwise
distance consistency test prunes the hypothesis list, and each surviving
hypothesis is tried through a coarse point-and-normal alignment followed
by a three-step ICP cascade with tightening acceptance thresholds.
Template regions claimed by placed fragments are marked occupied so later
fragments search only the remaining surface.  A final joint refinement
perturbs the assembled poses and keeps rounds that do not worsen the
global alignment error.

Match lists are plain Python lists of MatchHypothesis sorted by
descending score.  All thresholds scale with the template mesh
resolution, so decisions are invariant under uniform rescaling of the
geometry.
"""

from __future__ import annotations

import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import (
    OrientedPoint,
    RigidTransform,
    SurfaceDistanceField,
    TriangleMesh,
    apply_transform,
    boundary_vertex_mask,
    enclosed_volume,
    mesh_resolution,
    rotation_from_axis_angle,
    area_centroid,
    principal_axis,
    submesh,
    surface_area,
    uniform_subsample,
    vertex_mean_curvature,
)
from .spin import SpinImage, auto_flatness_penalty, compute_descriptors, score_pairs

log = logging.getLogger(__name__)

# Curvature fields are smoothed once before tagging descriptors, matching
# the ridge detection in the partition stage.
_CURVATURE_SMOOTHING_ROUNDS = 1


class SolveError(Exception):
    """Raised for invalid solver inputs or configurations."""


@dataclass(frozen=True, slots=True)
class SolveConfig:
    """Solver parameters.  Scale-bearing fields are in units of the
    template mesh resolution unless the name says otherwise."""

    cascade_multipliers: tuple[float, float, float] = (4.0, 2.0, 1.0)
    consistency_gap_scale: float = 2.0
    sample_spacing_scale: float = 1.5
    occupancy_radius_scale: float = 2.0
    descriptor_bin_scale: float = 1.0
    descriptor_support_scale: float = 15.0
    curvature_bins: int = 16
    bin_quota: int = 0
    curvature_tolerance: float = 0.0
    max_candidates: int = 250
    confirm_candidates: int = 25
    confirm_error_scale: float = 0.15
    icp_max_iterations: int = 1500
    icp_epsilon: float = 1e-3
    short_icp_iterations: int = 5
    rotation_restarts: int = 4
    refine_rounds: int = 3
    refine_inner_iterations: int = 5
    refine_rotation_deg: float = 1.0
    refine_translation_scale: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        m = tuple(float(v) for v in self.cascade_multipliers)
        if len(m) != 3 or any(v <= 0.0 for v in m):
            raise SolveError("cascade needs three positive multipliers")
        if not (m[0] > m[1] > m[2]):
            raise SolveError("cascade multipliers must strictly decrease")
        object.__setattr__(self, "cascade_multipliers", m)
        for name in (
            "consistency_gap_scale",
            "sample_spacing_scale",
            "occupancy_radius_scale",
            "descriptor_bin_scale",
            "descriptor_support_scale",
            "icp_epsilon",
        ):
            if not getattr(self, name) > 0.0:
                raise SolveError(f"{name} must be positive")
        if self.curvature_bins < 1:
            raise SolveError("curvature_bins must be at least 1")
        if self.bin_quota < 0 or self.curvature_tolerance < 0.0:
            raise SolveError("bin_quota and curvature_tolerance cannot be negative")
        if self.max_candidates < 1:
            raise SolveError("max_candidates must be at least 1")
        if self.confirm_candidates < 0:
            raise SolveError("confirm_candidates cannot be negative")
        if not self.confirm_error_scale > 0.0:
            raise SolveError("confirm_error_scale must be positive")
        if self.icp_max_iterations < 1 or self.short_icp_iterations < 1:
            raise SolveError("iteration counts must be at least 1")
        if self.rotation_restarts < 1:
            raise SolveError("rotation_restarts must be at least 1")
        if self.refine_rounds < 0 or self.refine_inner_iterations < 1:
            raise SolveError("invalid refinement round configuration")
        if self.refine_rotation_deg < 0.0 or self.refine_translation_scale < 0.0:
            raise SolveError("refinement perturbations cannot be negative")


@dataclass(frozen=True, slots=True)
class MatchHypothesis:
    """One template-to-fragment correspondence candidate.

    Vertex fields are mesh vertex ids; index fields locate the source
    descriptors inside the lists the hypothesis was generated from.
    """

    template_vertex: int
    fragment_vertex: int
    score: float
    template_index: int
    fragment_index: int


class PhaseTimer:
    """Accumulates wall-clock seconds per named solver phase."""

    def __init__(self) -> None:
        self.seconds: dict[str, float] = {}

    @contextmanager
    def phase(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.seconds[name] = self.seconds.get(name, 0.0) + elapsed

    def total(self) -> float:
        return float(sum(self.seconds.values()))


@dataclass(frozen=True, slots=True, eq=False)
class TemplateIndex:
    """Reusable search structures for one intact template mesh."""

    mesh: TriangleMesh
    resolution: float
    bin_size: float
    support_radius: float
    sample_ids: np.ndarray
    descriptors: list[SpinImage]
    biased_ids: np.ndarray
    curvature_tolerance: float
    distance_field: SurfaceDistanceField


@dataclass(frozen=True, slots=True, eq=False)
class FragmentInput:
    """One fragment to place: its mesh plus outer-surface triangle ids."""

    mesh: TriangleMesh
    outer_triangle_ids: np.ndarray

    def __post_init__(self) -> None:
        ids = np.asarray(self.outer_triangle_ids, dtype=np.int64).reshape(-1)
        if len(ids) and (ids.min() < 0 or ids.max() >= len(self.mesh.triangles)):
            raise SolveError("outer triangle ids out of range")
        object.__setattr__(self, "outer_triangle_ids", ids)

    @property
    def outer_vertex_ids(self) -> np.ndarray:
        return np.unique(self.mesh.triangles[self.outer_triangle_ids])


@dataclass(frozen=True, slots=True, eq=False)
class FragmentSurface:
    """A fragment's outer surface prepared for matching: the periosteal
    sub-mesh, sample vertices away from cut boundaries, and their
    descriptors."""

    submesh: TriangleMesh
    parent_vertex_ids: np.ndarray
    sample_ids: np.ndarray
    interior_vertex_ids: np.ndarray
    descriptors: list[SpinImage]

    @property
    def sample_points(self) -> np.ndarray:
        return self.submesh.vertices[self.sample_ids]

    @property
    def icp_points(self) -> np.ndarray:
        """Dense registration set: every outer vertex off the cut boundary."""
        return self.submesh.vertices[self.interior_vertex_ids]


@dataclass(frozen=True, slots=True, eq=False)
class FragmentSolution:
    """Outcome for one fragment, in the caller's fragment order."""

    fragment_index: int
    solved: bool
    is_base: bool
    transform: RigidTransform | None
    mean_error: float
    match: tuple[int, int] | None
    cascade_attempts: int
    descriptor_count: int
    outer_area: float
    volume: float


@dataclass(frozen=True, slots=True, eq=False)
class CaseSolution:
    """Per-fragment poses plus the instrumentation needed for reporting."""

    template_transform: RigidTransform
    fragments: tuple[FragmentSolution, ...]
    occupancy: np.ndarray
    resolution: float
    template_descriptor_count: int
    timings: dict[str, float]
    wall_seconds: float

    @property
    def solved_count(self) -> int:
        return sum(1 for f in self.fragments if f.solved)


@dataclass(frozen=True, slots=True, eq=False)
class RefineResult:
    """Adjusted poses and the global error after each accepted round."""

    transforms: tuple[RigidTransform | None, ...]
    error_history: tuple[float, ...]


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise SolveError("zero-length direction")
    return v / n


def biased_select(
    descriptors: list[SpinImage], bins: int, quota: int, seed: int
) -> np.ndarray:
    """Curvature-stratified descriptor subset: indices into the list.

    The observed curvature range is split into `bins` equal-width bins and
    up to `quota` descriptors are drawn from each nonempty bin with a
    seeded RNG, so flat shaft regions cannot crowd out rarer curvatures.
    """
    if bins < 1:
        raise SolveError("bins must be at least 1")
    if quota < 1:
        raise SolveError("quota must be at least 1")
    if not descriptors:
        return np.zeros(0, dtype=np.int64)
    curvatures = np.array([d.curvature for d in descriptors], dtype=np.float64)
    if np.isnan(curvatures).any():
        raise SolveError("descriptors must carry curvature tags")
    lo, hi = float(curvatures.min()), float(curvatures.max())
    if hi > lo:
        which = np.clip(((curvatures - lo) / (hi - lo) * bins).astype(np.int64), 0, bins - 1)
    else:
        which = np.zeros(len(curvatures), dtype=np.int64)
    rng = np.random.default_rng(seed)
    chosen = []
    for b in range(bins):
        members = np.flatnonzero(which == b)
        if len(members) == 0:
            continue
        if len(members) <= quota:
            chosen.append(members)
        else:
            chosen.append(rng.choice(members, size=quota, replace=False))
    return np.sort(np.concatenate(chosen))


def auto_bin_quota(descriptor_count: int) -> int:
    """Default per-bin draw: 2% of the pool, floored at 8."""
    return max(8, math.ceil(0.02 * descriptor_count))


def auto_curvature_tolerance(descriptors: list[SpinImage]) -> float:
    """Default pairing tolerance: a quarter of the robust curvature spread."""
    if not descriptors:
        raise SolveError("cannot derive a curvature tolerance from zero descriptors")
    curvatures = np.array([d.curvature for d in descriptors], dtype=np.float64)
    finite = curvatures[np.isfinite(curvatures)]
    if len(finite) == 0:
        raise SolveError("descriptors must carry curvature tags")
    lo, hi = np.percentile(finite, [2.5, 97.5])
    return float(0.25 * (hi - lo))


def build_template_index(
    mesh: TriangleMesh, config: SolveConfig, *, timer: PhaseTimer | None = None
) -> TemplateIndex:
    """Sample the template, compute its descriptors, and pick the biased
    search subset.  The result is pose-free and reusable across cases."""
    timer = timer or PhaseTimer()
    with timer.phase("overhead"):
        resolution = mesh_resolution(mesh)
        bin_size = config.descriptor_bin_scale * resolution
        support = config.descriptor_support_scale * resolution
        curvatures = vertex_mean_curvature(
            mesh, smoothing_rounds=_CURVATURE_SMOOTHING_ROUNDS
        )
        sample_ids = uniform_subsample(
            mesh, config.sample_spacing_scale * resolution, seed=config.seed
        )
        if len(sample_ids) == 0:
            raise SolveError("template subsample is empty")
    with timer.phase("template_descriptors"):
        descriptors = compute_descriptors(
            mesh, sample_ids, bin_size, support, curvatures=curvatures
        )
    with timer.phase("overhead"):
        quota = config.bin_quota or auto_bin_quota(len(descriptors))
        biased = biased_select(descriptors, config.curvature_bins, quota, config.seed)
        tolerance = config.curvature_tolerance or auto_curvature_tolerance(descriptors)
        distance_field = SurfaceDistanceField(mesh)
    return TemplateIndex(
        mesh=mesh,
        resolution=resolution,
        bin_size=bin_size,
        support_radius=support,
        sample_ids=sample_ids,
        descriptors=descriptors,
        biased_ids=biased,
        curvature_tolerance=tolerance,
        distance_field=distance_field,
    )


def _outer_subsample(
    fragment: FragmentInput, spacing: float, seed: int
) -> tuple[TriangleMesh, np.ndarray, np.ndarray, np.ndarray]:
    """Periosteal sub-mesh plus sample and interior vertices.

    Sample vertices are spaced at `spacing`; both sets exclude vertices on
    the sub-mesh boundary, whose positions and normals belong to the cut.
    """
    if len(fragment.outer_triangle_ids) == 0:
        raise SolveError("fragment has no outer surface")
    outer, parent_ids = submesh(fragment.mesh, fragment.outer_triangle_ids)
    sample_ids = uniform_subsample(outer, spacing, seed=seed)
    interior = ~boundary_vertex_mask(outer)
    return outer, parent_ids, sample_ids[interior[sample_ids]], np.flatnonzero(interior)


def fragment_surface(
    fragment: FragmentInput,
    bin_size: float,
    support_radius: float,
    spacing: float,
    seed: int,
) -> FragmentSurface:
    """Prepare one fragment's outer surface for matching.

    Descriptors are computed on the periosteal sub-mesh alone so cut
    surfaces never contaminate the support region, and sample vertices on
    the sub-mesh boundary are dropped: their truncated neighborhoods and
    open-boundary curvatures match nothing on a closed template.
    """
    outer, parent_ids, sample_ids, interior_ids = _outer_subsample(
        fragment, spacing, seed
    )
    curvatures = vertex_mean_curvature(
        outer, smoothing_rounds=_CURVATURE_SMOOTHING_ROUNDS
    )
    descriptors = compute_descriptors(
        outer, sample_ids, bin_size, support_radius, curvatures=curvatures
    )
    return FragmentSurface(
        submesh=outer,
        parent_vertex_ids=parent_ids,
        sample_ids=sample_ids,
        interior_vertex_ids=interior_ids,
        descriptors=descriptors,
    )


def generate_hypotheses(
    template_descriptors: list[SpinImage],
    fragment_descriptors: list[SpinImage],
    config: SolveConfig,
    *,
    occupancy: np.ndarray | None = None,
    curvature_tolerance: float | None = None,
    flatness_penalty: float | None = None,
) -> list[MatchHypothesis]:
    """Score curvature-compatible descriptor pairs into a sorted list.

    Template descriptors whose source vertex is occupied are skipped, as
    are pairs whose mean curvatures differ by more than the tolerance.
    Pairs with an uninformative overlap (sentinel score) never appear.
    """
    if not template_descriptors or not fragment_descriptors:
        raise SolveError("descriptor sets must be nonempty")
    if flatness_penalty is None:
        flatness_penalty = auto_flatness_penalty(fragment_descriptors)
    if curvature_tolerance is None:
        curvature_tolerance = auto_curvature_tolerance(template_descriptors)

    keep = np.arange(len(template_descriptors), dtype=np.int64)
    if occupancy is not None:
        occupancy = np.asarray(occupancy, dtype=bool)
        free = [
            k for k in keep if not occupancy[template_descriptors[k].source_id]
        ]
        keep = np.asarray(free, dtype=np.int64)
    if len(keep) == 0:
        return []
    rows = [template_descriptors[k] for k in keep]

    kt = np.array([d.curvature for d in rows], dtype=np.float64)
    kf = np.array([d.curvature for d in fragment_descriptors], dtype=np.float64)
    gap = np.abs(kt[:, None] - kf[None, :])
    # NaN tags disable the gate for that descriptor rather than veto it.
    compatible = (gap <= curvature_tolerance) | np.isnan(gap)

    scores, _, _ = score_pairs(rows, fragment_descriptors, flatness_penalty)
    valid = compatible & np.isfinite(scores)
    ti, fi = np.nonzero(valid)
    if len(ti) == 0:
        return []
    order = np.lexsort((fi, ti, -scores[ti, fi]))
    hypotheses = []
    for k in order:
        row, col = int(ti[k]), int(fi[k])
        hypotheses.append(
            MatchHypothesis(
                template_vertex=int(rows[row].source_id),
                fragment_vertex=int(fragment_descriptors[col].source_id),
                score=float(scores[row, col]),
                template_index=int(keep[row]),
                fragment_index=col,
            )
        )
    return hypotheses


def filter_matches(
    matches: list[MatchHypothesis],
    template_points: np.ndarray,
    fragment_points: np.ndarray,
    max_distance_gap: float,
) -> list[MatchHypothesis]:
    """Geometric consistency filter over a sorted hypothesis list.

    The list is split at its midpoint and rank r of the top half is tested
    against rank r of the bottom half: a rigid motion preserves pairwise
    distances, so the template-side and fragment-side separations must
    agree within `max_distance_gap`.  Consistent pairs keep both members,
    inconsistent ones keep only the higher-scored member.
    """
    if max_distance_gap <= 0.0:
        raise SolveError("max_distance_gap must be positive")
    if len(matches) <= 1:
        return list(matches)
    template_points = np.asarray(template_points, dtype=np.float64)
    fragment_points = np.asarray(fragment_points, dtype=np.float64)
    mid = len(matches) // 2
    ti = np.array([m.template_index for m in matches], dtype=np.int64)
    fi = np.array([m.fragment_index for m in matches], dtype=np.int64)
    top, bottom = np.arange(mid), np.arange(mid, 2 * mid)
    dt = np.linalg.norm(
        template_points[ti[top]] - template_points[ti[bottom]], axis=1
    )
    df = np.linalg.norm(
        fragment_points[fi[top]] - fragment_points[fi[bottom]], axis=1
    )
    consistent = np.abs(dt - df) < max_distance_gap
    kept = list(matches[:mid])  # the higher-scored member always survives
    kept.extend(matches[mid + r] for r in np.flatnonzero(consistent))
    kept.extend(matches[2 * mid :])  # odd-length leftover has no partner
    kept.sort(key=lambda m: (-m.score, m.template_index, m.fragment_index))
    return kept


def coarse_align(
    template_point: OrientedPoint, fragment_point: OrientedPoint, theta: float = 0.0
) -> RigidTransform:
    """Rigid motion taking the fragment point and normal exactly onto the
    template point and normal, with `theta` fixing the residual rotation
    about the shared normal."""
    nf = _unit(np.asarray(fragment_point.normal, dtype=np.float64))
    nt = _unit(np.asarray(template_point.normal, dtype=np.float64))
    c = float(np.clip(nf @ nt, -1.0, 1.0))
    axis = np.cross(nf, nt)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        if c > 0.0:
            swing = np.eye(3)
        else:
            # Antiparallel normals: rotate half a turn about any axis
            # perpendicular to the normal.  Tie-break: cross the normal
            # with the basis vector of its largest component, falling back
            # to the next axis when the normal is that basis vector.
            j = int(np.argmax(np.abs(nt)))
            axis = np.cross(nt, np.eye(3)[j])
            if np.linalg.norm(axis) < 1e-12:
                axis = np.eye(3)[(j + 1) % 3]
            swing = rotation_from_axis_angle(axis, math.pi)
    else:
        swing = rotation_from_axis_angle(axis, math.atan2(s, c))
    rotation = rotation_from_axis_angle(nt, theta) @ swing
    pf = np.asarray(fragment_point.position, dtype=np.float64)
    pt = np.asarray(template_point.position, dtype=np.float64)
    return RigidTransform(rotation, pt - rotation @ pf)


def _kabsch(source: np.ndarray, targets: np.ndarray) -> RigidTransform | None:
    """Least-squares rigid motion source -> targets; None when degenerate."""
    cs = source.mean(axis=0)
    ct = targets.mean(axis=0)
    h = (source - cs).T @ (targets - ct)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-12 * max(s[0], 1.0):
        return None
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rotation, ct - rotation @ cs)


def free_surface_field(
    target: TriangleMesh,
    occupancy: np.ndarray | None,
    *,
    fallback: SurfaceDistanceField | None = None,
) -> SurfaceDistanceField | None:
    """Distance field over the unoccupied part of the target surface.

    Triangles with any occupied corner are excluded; returns None when
    nothing remains.  Without an occupancy mask the full-target field is
    returned, reusing `fallback` when given.
    """
    if occupancy is None:
        return fallback if fallback is not None else SurfaceDistanceField(target)
    occupancy = np.asarray(occupancy, dtype=bool)
    if occupancy.shape != (len(target.vertices),):
        raise SolveError("occupancy must mark every target vertex")
    keep = ~occupancy[target.triangles].any(axis=1)
    if not keep.any():
        return None
    free = TriangleMesh(target.vertices, target.triangles[keep], target.vertex_normals)
    return SurfaceDistanceField(free)


def icp(
    points: np.ndarray,
    target: TriangleMesh,
    initial: RigidTransform,
    config: SolveConfig,
    resolution: float,
    *,
    occupancy: np.ndarray | None = None,
    distance_field: SurfaceDistanceField | None = None,
    correspondence_field: SurfaceDistanceField | None = None,
    max_iterations: int | None = None,
    objective_trace: list | None = None,
) -> tuple[RigidTransform | None, float]:
    """Iterative closest point from sample points onto a target mesh.

    Correspondences are exact closest points on the unoccupied part of
    the target surface (never snapped to vertices, so the mesh lattice
    cannot trap a slightly slid pose), and the rigid update is the
    closed-form least-squares fit from the original points, so the
    point-to-point objective never increases.  When the unoccupied
    surface differs from the full surface, points whose unoccupied
    projection detours measurably past their true nearest surface (as
    seen from the starting pose) belong to claimed territory; they are
    dropped from the fit and the error so they cannot drag the pose
    toward distant free surface.  Returns the final transform and the
    mean distance of the fitted points to the full target surface, or
    (None, inf) when the unoccupied region is empty or the
    correspondences degenerate to a line.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) < 3:
        return None, float("inf")
    if correspondence_field is None:
        correspondence_field = free_surface_field(
            target, occupancy, fallback=distance_field
        )
        if correspondence_field is None:
            return None, float("inf")
    if correspondence_field is not distance_field and distance_field is not None:
        start = initial.apply_points(points)
        detour = correspondence_field.distances(start) - distance_field.distances(start)
        contested = detour > 0.25 * resolution
        if contested.any():
            points = points[~contested]
            if len(points) < 3:
                return None, float("inf")

    transform = initial
    epsilon = config.icp_epsilon * resolution
    rounds = max_iterations if max_iterations is not None else config.icp_max_iterations
    for _ in range(rounds):
        moved = transform.apply_points(points)
        closest, dist = correspondence_field.closest_points(moved)
        if objective_trace is not None:
            objective_trace.append(float(np.mean(dist * dist)))
        update = _kabsch(points, closest)
        if update is None:
            return None, float("inf")
        moved_update = update.apply_points(points)
        shift = np.linalg.norm(moved_update - moved, axis=1).max()
        if shift <= epsilon:
            transform = update
            break
        # A long shallow valley advances by many near-identical small
        # steps, so try doubling the incremental motion while the freshly
        # projected objective keeps beating the plain step's bound.  The
        # bound never exceeds the pre-update objective, so the objective
        # trace stays non-increasing whether or not a doubling is kept.
        bound = float(np.mean(np.sum((moved_update - closest) ** 2, axis=1)))
        delta = update.compose(transform.invert())
        accepted = update
        power = delta
        for _ in range(12):
            # Square the motion by hand and re-project the rotation onto
            # SO(3): repeated squaring alone drifts past orthonormality.
            rot = power.rotation @ power.rotation
            shift_vec = power.rotation @ power.translation + power.translation
            u, _, vt = np.linalg.svd(rot)
            rot = u @ vt
            if np.linalg.det(rot) < 0.0:
                rot = u @ np.diag([1.0, 1.0, -1.0]) @ vt
            power = RigidTransform(rot, shift_vec)
            candidate = power.compose(transform)
            extended = correspondence_field.closest_points(
                candidate.apply_points(points)
            )[1]
            objective = float(np.mean(extended * extended))
            if objective <= bound:
                accepted, bound = candidate, objective
            else:
                break
        transform = accepted
    moved = transform.apply_points(points)
    if distance_field is None:
        distance_field = SurfaceDistanceField(target)
    error = float(distance_field.distances(moved).mean())
    return transform, error


def cascade_evaluate(
    match_template: OrientedPoint,
    match_fragment: OrientedPoint,
    points: np.ndarray,
    target: TriangleMesh,
    config: SolveConfig,
    resolution: float,
    *,
    occupancy: np.ndarray | None = None,
    distance_field: SurfaceDistanceField | None = None,
    correspondence_field: SurfaceDistanceField | None = None,
    icp_points: np.ndarray | None = None,
) -> tuple[RigidTransform, float] | None:
    """Try one match through the three-step alignment cascade.

    Step one checks the coarse point-and-normal alignment over `points`
    (the sparse gate set), step two a few ICP iterations, step three a
    full ICP, against mean-error thresholds of 4, 2, and 1 times the mesh
    resolution by default.  The ICP steps register `icp_points` (the full
    outer surface when given, `points` otherwise).  The residual rotation
    about the matched normal is searched with evenly spaced restarts;
    every restart that survives all three steps is a valid pose for this
    match, and the lowest-error one is returned so a shallow false basin
    reached from one restart cannot shadow the true fit from another.
    Returns the accepted pose and its error, or None.
    """
    if distance_field is None:
        distance_field = SurfaceDistanceField(target)
    if correspondence_field is None:
        correspondence_field = free_surface_field(
            target, occupancy, fallback=distance_field
        )
        if correspondence_field is None:
            return None
    thresholds = [m * resolution for m in config.cascade_multipliers]
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dense = points if icp_points is None else np.asarray(
        icp_points, dtype=np.float64
    ).reshape(-1, 3)
    best: tuple[RigidTransform, float] | None = None
    for restart in range(config.rotation_restarts):
        theta = 2.0 * math.pi * restart / config.rotation_restarts
        start = coarse_align(match_template, match_fragment, theta)
        coarse_error = float(distance_field.distances(start.apply_points(points)).mean())
        if not coarse_error < thresholds[0]:
            continue
        short, short_error = icp(
            dense,
            target,
            start,
            config,
            resolution,
            distance_field=distance_field,
            correspondence_field=correspondence_field,
            max_iterations=config.short_icp_iterations,
        )
        if short is None or not short_error < thresholds[1]:
            continue
        final, final_error = icp(
            dense,
            target,
            short,
            config,
            resolution,
            distance_field=distance_field,
            correspondence_field=correspondence_field,
        )
        if final is None or not final_error < thresholds[2]:
            continue
        if best is None or final_error < best[1]:
            best = (final, final_error)
    return best


def mark_occupied(
    occupancy: np.ndarray,
    template: TriangleMesh,
    placed_mesh: TriangleMesh,
    radius: float,
) -> np.ndarray:
    """Mark template vertices within `radius` of a placed fragment surface.

    Returns a new mask; marking is monotone, bits never clear.
    """
    if radius <= 0.0:
        raise SolveError("occupancy radius must be positive")
    occupancy = np.asarray(occupancy, dtype=bool)
    if occupancy.shape != (len(template.vertices),):
        raise SolveError("occupancy must mark every template vertex")
    updated = occupancy.copy()
    unknown = np.flatnonzero(~occupancy)
    if len(unknown) == 0 or len(placed_mesh.triangles) == 0:
        return updated
    distances = SurfaceDistanceField(placed_mesh).distances(template.vertices[unknown])
    updated[unknown[distances < radius]] = True
    return updated


def _oriented(position: np.ndarray, normal: np.ndarray) -> OrientedPoint:
    return OrientedPoint(position=position.copy(), normal=_unit(normal.copy()))


def _base_pose_guesses(
    template: TriangleMesh, base_points: np.ndarray
) -> list[RigidTransform]:
    """Coarse seeds for fitting the base fragment onto the template.

    Identity covers the common same-frame case; the others move the base
    outer-surface centroid onto the template centroid and swing the base
    principal axis onto the template axis, in both signs.
    """
    guesses = [RigidTransform.identity()]
    t_axis = principal_axis(template)
    t_center = area_centroid(template)
    centered = base_points - base_points.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    b_center = base_points.mean(axis=0)
    for sign in (1.0, -1.0):
        b_axis = sign * vt[0]
        c = float(np.clip(b_axis @ t_axis, -1.0, 1.0))
        cross = np.cross(b_axis, t_axis)
        s = np.linalg.norm(cross)
        if s < 1e-12:
            rotation = np.eye(3) if c > 0.0 else rotation_from_axis_angle(
                np.eye(3)[int(np.argmin(np.abs(t_axis)))], math.pi
            )
        else:
            rotation = rotation_from_axis_angle(cross, math.atan2(s, c))
        guesses.append(RigidTransform(rotation, t_center - rotation @ b_center))
    return guesses


def solve_case(
    template: TriangleMesh,
    fragments: list[FragmentInput],
    config: SolveConfig,
    *,
    index: TemplateIndex | None = None,
    base_index: int | None = None,
) -> CaseSolution:
    """Place every fragment of one case against the intact template.

    The template is fitted onto the base fragment (largest enclosed
    volume unless overridden), so all fragment poses stay in the fracture
    CT frame and the base keeps the identity.  Remaining fragments are
    solved in descending outer-surface-area order, each marking its
    template region occupied.  Fragments without an outer surface or
    without an accepted cascade match are reported unsolved.
    """
    if not fragments:
        raise SolveError("cannot solve a case with no fragments")
    timer = PhaseTimer()
    wall_start = time.perf_counter()
    if index is None:
        index = build_template_index(template, config, timer=timer)
    elif index.mesh is not template:
        raise SolveError("template index was built for a different mesh")
    resolution = index.resolution
    spacing = config.sample_spacing_scale * resolution
    occupancy_radius = config.occupancy_radius_scale * resolution

    with timer.phase("overhead"):
        volumes = np.array([enclosed_volume(f.mesh) for f in fragments])
        outer_areas = np.array(
            [
                surface_area(f.mesh, f.outer_triangle_ids)
                if len(f.outer_triangle_ids)
                else 0.0
                for f in fragments
            ]
        )
        usable = [k for k in range(len(fragments)) if outer_areas[k] > 0.0]
        if base_index is None:
            if not usable:
                raise SolveError("no fragment has an outer surface")
            base = max(usable, key=lambda k: (volumes[k], -k))
        else:
            if not 0 <= base_index < len(fragments):
                raise SolveError("base fragment index out of range")
            if outer_areas[base_index] <= 0.0:
                raise SolveError("base fragment has no outer surface")
            base = base_index

    surfaces: dict[int, FragmentSurface] = {}
    with timer.phase("fragment_descriptors"):
        for k in usable:
            surfaces[k] = fragment_surface(
                fragments[k],
                index.bin_size,
                index.support_radius,
                spacing,
                config.seed,
            )

    # Fit the template onto the base fragment; fragments never leave the
    # CT frame.  The ICP runs in the well-posed direction (base outer
    # samples onto the full template, where every point has a true
    # counterpart) and the result is inverted.
    with timer.phase("overhead"):
        base_points = surfaces[base].icp_points
        best: tuple[RigidTransform, float] | None = None
        for guess in _base_pose_guesses(index.mesh, base_points):
            posed, error = icp(
                base_points,
                index.mesh,
                guess,
                config,
                resolution,
                distance_field=index.distance_field,
                correspondence_field=index.distance_field,
            )
            if posed is not None and (best is None or error < best[1]):
                best = (posed, error)
        if best is None:
            raise SolveError("template alignment onto the base fragment failed")
        template_transform = best[0].invert()
        base_error = best[1]

        posed_template = apply_transform(template_transform, index.mesh)
        posed_field = SurfaceDistanceField(posed_template)
        posed_positions = template_transform.apply_points(
            np.array([d.position for d in index.descriptors])
        )
        posed_normals = template_transform.apply_directions(
            np.array([d.normal for d in index.descriptors])
        )

    occupancy = np.zeros(len(posed_template.vertices), dtype=bool)
    with timer.phase("occupancy"):
        occupancy = mark_occupied(
            occupancy, posed_template, fragments[base].mesh, occupancy_radius
        )

    solutions: dict[int, FragmentSolution] = {
        base: FragmentSolution(
            fragment_index=base,
            solved=True,
            is_base=True,
            transform=RigidTransform.identity(),
            mean_error=base_error,
            match=None,
            cascade_attempts=0,
            descriptor_count=len(surfaces[base].descriptors),
            outer_area=float(outer_areas[base]),
            volume=float(volumes[base]),
        )
    }

    biased_descriptors = [index.descriptors[k] for k in index.biased_ids]
    order = sorted(
        (k for k in range(len(fragments)) if k != base),
        key=lambda k: (-outer_areas[k], k),
    )
    for k in order:
        if k not in surfaces or not surfaces[k].descriptors:
            solutions[k] = FragmentSolution(
                fragment_index=k,
                solved=False,
                is_base=False,
                transform=None,
                mean_error=float("inf"),
                match=None,
                cascade_attempts=0,
                descriptor_count=len(surfaces[k].descriptors) if k in surfaces else 0,
                outer_area=float(outer_areas[k]),
                volume=float(volumes[k]),
            )
            log.warning("fragment %d has no usable outer descriptors", k)
            continue
        surface = surfaces[k]
        with timer.phase("matching"):
            initial = generate_hypotheses(
                biased_descriptors,
                surface.descriptors,
                config,
                occupancy=occupancy,
                curvature_tolerance=index.curvature_tolerance,
            )
        with timer.phase("filtering"):
            biased_posed = posed_positions[index.biased_ids]
            fragment_positions = np.array([d.position for d in surface.descriptors])
            candidates = filter_matches(
                initial,
                biased_posed,
                fragment_positions,
                config.consistency_gap_scale * resolution,
            )[: config.max_candidates]
        accepted: tuple[RigidTransform, float] | None = None
        accepted_match: tuple[int, int] | None = None
        attempts = 0
        confirm_left: int | None = None
        with timer.phase("alignment"):
            free_field = free_surface_field(posed_template, occupancy)
            if free_field is not None:
                for match in candidates:
                    attempts += 1
                    row = index.biased_ids[match.template_index]
                    outcome = cascade_evaluate(
                        _oriented(posed_positions[row], posed_normals[row]),
                        _oriented(
                            np.asarray(
                                surface.descriptors[match.fragment_index].position
                            ),
                            np.asarray(
                                surface.descriptors[match.fragment_index].normal
                            ),
                        ),
                        surface.sample_points,
                        posed_template,
                        config,
                        resolution,
                        distance_field=posed_field,
                        correspondence_field=free_field,
                        icp_points=surface.icp_points,
                    )
                    if outcome is not None and (
                        accepted is None or outcome[1] < accepted[1]
                    ):
                        accepted = outcome
                        accepted_match = (match.template_vertex, match.fragment_vertex)
                    if accepted is not None:
                        # A marginal accept can be a near-symmetric false
                        # fit, so keep scanning a bounded window for a
                        # strictly better pose; a truly converged error
                        # ends the search at once.
                        if accepted[1] < config.confirm_error_scale * resolution:
                            break
                        if confirm_left is None:
                            confirm_left = config.confirm_candidates
                        else:
                            confirm_left -= 1
                        if confirm_left <= 0:
                            break
        if accepted is None:
            solutions[k] = FragmentSolution(
                fragment_index=k,
                solved=False,
                is_base=False,
                transform=None,
                mean_error=float("inf"),
                match=None,
                cascade_attempts=attempts,
                descriptor_count=len(surface.descriptors),
                outer_area=float(outer_areas[k]),
                volume=float(volumes[k]),
            )
            log.warning("fragment %d rejected by all %d candidates", k, attempts)
            continue
        transform, error = accepted
        solutions[k] = FragmentSolution(
            fragment_index=k,
            solved=True,
            is_base=False,
            transform=transform,
            mean_error=error,
            match=accepted_match,
            cascade_attempts=attempts,
            descriptor_count=len(surface.descriptors),
            outer_area=float(outer_areas[k]),
            volume=float(volumes[k]),
        )
        with timer.phase("occupancy"):
            occupancy = mark_occupied(
                occupancy,
                posed_template,
                apply_transform(transform, fragments[k].mesh),
                occupancy_radius,
            )

    for k in range(len(fragments)):
        if k not in solutions:
            solutions[k] = FragmentSolution(
                fragment_index=k,
                solved=False,
                is_base=False,
                transform=None,
                mean_error=float("inf"),
                match=None,
                cascade_attempts=0,
                descriptor_count=0,
                outer_area=float(outer_areas[k]),
                volume=float(volumes[k]),
            )

    return CaseSolution(
        template_transform=template_transform,
        fragments=tuple(solutions[k] for k in range(len(fragments))),
        occupancy=occupancy,
        resolution=resolution,
        template_descriptor_count=len(index.descriptors),
        timings=dict(timer.seconds),
        wall_seconds=time.perf_counter() - wall_start,
    )


def _global_error(
    field: SurfaceDistanceField,
    sample_sets: list[np.ndarray],
    transforms: list[RigidTransform],
) -> float:
    """Sample-count-weighted mean of per-fragment mean surface errors."""
    total = 0.0
    count = 0
    for points, transform in zip(sample_sets, transforms):
        distances = field.distances(transform.apply_points(points))
        total += float(distances.sum())
        count += len(points)
    return total / count if count else float("inf")


def global_refine(
    template: TriangleMesh,
    fragments: list[FragmentInput],
    transforms: list[RigidTransform | None],
    config: SolveConfig,
    *,
    resolution: float | None = None,
    locked: tuple[int, ...] = (),
) -> RefineResult:
    """Joint polish of an assembled case by perturb-and-retest rounds.

    Each round perturbs every unlocked placed fragment slightly, runs a
    few joint ICP iterations in which each template vertex is claimed by
    its nearest fragment only (correspondences project onto the claimed
    region's surface, so neighbors cannot occupy the same template area),
    and keeps the result only when the global mean error does not
    increase, so the error history is non-increasing.  Unsolved fragments
    (None transforms) pass through untouched; `template` must already sit
    in the fracture frame.
    """
    if len(transforms) != len(fragments):
        raise SolveError("one transform slot per fragment required")
    if resolution is None:
        resolution = mesh_resolution(template)
    placed = [k for k, t in enumerate(transforms) if t is not None]
    current: list[RigidTransform | None] = list(transforms)
    if not placed:
        return RefineResult(transforms=tuple(current), error_history=())

    spacing = config.sample_spacing_scale * resolution
    samples = {}
    for k in placed:
        if len(fragments[k].outer_triangle_ids) == 0:
            samples[k] = np.zeros((0, 3))
            continue
        outer, _, _, interior_ids = _outer_subsample(fragments[k], spacing, config.seed)
        samples[k] = outer.vertices[interior_ids]
    placed = [k for k in placed if len(samples[k]) >= 3]
    if not placed:
        return RefineResult(transforms=tuple(current), error_history=())

    field = SurfaceDistanceField(template)
    rng = np.random.default_rng(config.seed)
    adjustable = [k for k in placed if k not in locked]

    def score(poses: dict[int, RigidTransform]) -> float:
        return _global_error(
            field, [samples[k] for k in placed], [poses[k] for k in placed]
        )

    poses = {k: current[k] for k in placed}
    history = [score(poses)]
    for _ in range(config.refine_rounds):
        trial = dict(poses)
        for k in adjustable:
            angle = math.radians(config.refine_rotation_deg) * rng.uniform()
            axis = _unit(rng.normal(size=3))
            center = trial[k].apply_points(samples[k]).mean(axis=0)
            shift = rng.normal(size=3)
            shift = (
                _unit(shift)
                * config.refine_translation_scale
                * resolution
                * rng.uniform()
            )
            nudge = RigidTransform(
                rotation_from_axis_angle(axis, angle),
                shift + center - rotation_from_axis_angle(axis, angle) @ center,
            )
            trial[k] = nudge.compose(trial[k])
        for _ in range(config.refine_inner_iterations):
            moved = {k: trial[k].apply_points(samples[k]) for k in placed}
            # Claim every template vertex for the fragment whose moved
            # surface lies nearest to it.
            vertex_distance = np.column_stack(
                [
                    cKDTree(moved[k]).query(template.vertices, workers=-1)[0]
                    for k in placed
                ]
            )
            owner = np.asarray(placed)[vertex_distance.argmin(axis=1)]
            for k in adjustable:
                keep = (owner[template.triangles] == k).all(axis=1)
                if not keep.any():
                    continue
                region = TriangleMesh(
                    template.vertices,
                    template.triangles[keep],
                    template.vertex_normals,
                )
                closest, _ = SurfaceDistanceField(region).closest_points(moved[k])
                update = _kabsch(samples[k], closest)
                if update is not None:
                    trial[k] = update
        candidate = score(trial)
        if candidate <= history[-1]:
            poses = trial
            history.append(candidate)
        else:
            history.append(history[-1])
    for k in placed:
        current[k] = poses[k]
    return RefineResult(transforms=tuple(current), error_history=tuple(history))


def write_poses(path, transforms: dict[int, RigidTransform]) -> None:
    """One line per fragment: its id then the 12 row-major pose numbers."""
    lines = []
    for fragment_id in sorted(transforms):
        values = transforms[fragment_id].to_flat()
        lines.append(
            " ".join([str(int(fragment_id))] + [f"{v:.17g}" for v in values])
        )
    with open(path, "w", encoding="ascii") as handle:
        handle.write("\n".join(lines) + ("\n" if lines else ""))


def read_poses(path) -> dict[int, RigidTransform]:
    """Parse a pose override file written by write_poses."""
    transforms: dict[int, RigidTransform] = {}
    with open(path, "r", encoding="ascii") as handle:
        for line_number, line in enumerate(handle, start=1):
            text = line.strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 13:
                raise SolveError(
                    f"pose line {line_number} needs an id and 12 numbers"
                )
            try:
                fragment_id = int(parts[0])
                values = [float(p) for p in parts[1:]]
                transform = RigidTransform.from_flat(values)
            except ValueError as exc:
                raise SolveError(f"bad pose line {line_number}: {exc}") from exc
            if fragment_id in transforms:
                raise SolveError(f"duplicate fragment id {fragment_id}")
            transforms[fragment_id] = transform
    return transforms
