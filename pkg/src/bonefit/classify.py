"""Anatomic labeling of surface patches from subsurface intensity profiles.

Bone presents a characteristic intensity sequence along the inward surface
normal: a dense cortical shell over cancellous interior on the periosteal
(outer) surface, a thicker subchondral plate under articular cartilage,
and near-uniform cancellous intensity behind a fracture face.  Sampling a
short profile behind each vertex and correlating it against per-class mean
profiles separates the three cases.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .mesh import OrientedPoint, TriangleMesh
from .partition import PatchDecomposition, SurfacePatch
from .volume import VoxelGrid

PERIOSTEAL = "Periosteal"
FRACTURE = "Fracture"
ARTICULAR = "Articular"
CLASS_NAMES = (PERIOSTEAL, FRACTURE, ARTICULAR)


class ClassifyError(Exception):
    """Raised for invalid profiles, models, or label files."""


@dataclass(frozen=True, slots=True, eq=False)
class IntensityProfile:
    """Intensities sampled at fixed steps along an inward surface normal."""

    samples: np.ndarray
    depth: float
    step: float
    clamped: bool = False

    def __post_init__(self) -> None:
        if not self.step > 0.0:
            raise ClassifyError("profile step must be positive")
        if self.depth < 0.0:
            raise ClassifyError("profile depth must be nonnegative")
        expected = int(np.floor(self.depth / self.step)) + 1
        if self.samples.shape != (expected,):
            raise ClassifyError(
                f"profile of depth {self.depth} at step {self.step} needs "
                f"{expected} samples, got {self.samples.shape}"
            )


@dataclass(frozen=True, slots=True, eq=False)
class ClassModel:
    """Per-class mean and variance profiles, in CLASS_NAMES order."""

    means: np.ndarray
    variances: np.ndarray
    depth: float
    step: float

    def __post_init__(self) -> None:
        if self.means.ndim != 2 or self.means.shape[0] != len(CLASS_NAMES):
            raise ClassifyError("model needs one mean profile per class")
        if self.variances.shape != self.means.shape:
            raise ClassifyError("model variance shape must match means")
        expected = int(np.floor(self.depth / self.step)) + 1
        if self.means.shape[1] != expected:
            raise ClassifyError("model profile length disagrees with depth/step")


def extract_profile(
    grid: VoxelGrid, point: OrientedPoint, depth: float, step: float
) -> IntensityProfile:
    """Trilinear intensity samples at point - t*normal for t = 0..depth.

    The surface normal points outward, so marching against it probes the
    material behind the surface.  Samples falling outside the grid clamp
    to the boundary value and set the ``clamped`` flag.
    """
    if not step > 0.0:
        raise ClassifyError("profile step must be positive")
    if depth < 0.0:
        raise ClassifyError("profile depth must be nonnegative")
    count = int(np.floor(depth / step)) + 1
    offsets = np.arange(count) * step
    positions = point.position[None, :] - offsets[:, None] * point.normal[None, :]
    coords = grid.voxel_coordinates(positions)
    upper = np.asarray(grid.dims, dtype=np.float64) - 1.0
    clamped = bool(np.any((coords < 0.0) | (coords > upper[None, :])))
    samples = ndimage.map_coordinates(
        grid.intensities.astype(np.float64), coords.T, order=1, mode="nearest"
    )
    return IntensityProfile(
        samples=samples, depth=float(depth), step=float(step), clamped=clamped
    )


def train(labeled_profiles: dict[str, list[IntensityProfile]]) -> ClassModel:
    """Per-class mean and population variance over training profiles.

    Every class in CLASS_NAMES needs at least one profile, and all
    profiles must share one depth and step.
    """
    for name in CLASS_NAMES:
        if not labeled_profiles.get(name):
            raise ClassifyError(f"training data has no {name} profiles")
    unknown = set(labeled_profiles) - set(CLASS_NAMES)
    if unknown:
        raise ClassifyError(f"unknown training classes: {sorted(unknown)}")
    reference = labeled_profiles[CLASS_NAMES[0]][0]
    means = []
    variances = []
    for name in CLASS_NAMES:
        stack = []
        for profile in labeled_profiles[name]:
            if (profile.depth, profile.step) != (reference.depth, reference.step):
                raise ClassifyError("training profiles must share depth and step")
            stack.append(profile.samples)
        stack = np.array(stack, dtype=np.float64)
        means.append(stack.mean(axis=0))
        variances.append(stack.var(axis=0))
    return ClassModel(
        means=np.array(means),
        variances=np.array(variances),
        depth=reference.depth,
        step=reference.step,
    )


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da = a - a.mean()
    db = b - b.mean()
    # Trilinear interpolation of a physically constant region leaves ripple
    # near 1e-13 of the value scale; correlating that noise is meaningless,
    # so constancy is judged relative to the profile's magnitude.
    if np.all(np.abs(da) <= 1e-9 * (1.0 + np.abs(a).max())) or np.all(
        np.abs(db) <= 1e-9 * (1.0 + np.abs(b).max())
    ):
        return 0.0
    return float((da @ db) / np.sqrt((da @ da) * (db @ db)))


def class_correlations(model: ClassModel, profile: IntensityProfile) -> np.ndarray:
    """Correlation of one profile against each class mean, in class order."""
    if profile.samples.shape != (model.means.shape[1],):
        raise ClassifyError("profile length does not match the model")
    return np.array(
        [_pearson(profile.samples, mean) for mean in model.means]
    )


def _sampled_vertex_ids(
    mesh: TriangleMesh, patch: SurfacePatch, sample_spacing: float
) -> np.ndarray:
    """Greedy spatial thinning of patch vertices, lowest ids first."""
    ids = patch.vertex_ids
    if sample_spacing <= 0.0 or ids.size <= 1:
        return ids
    kept: list[int] = []
    kept_positions = np.zeros((0, 3))
    for vid in ids:
        position = mesh.vertices[vid]
        if kept and np.min(
            np.linalg.norm(kept_positions - position, axis=1)
        ) < sample_spacing:
            continue
        kept.append(int(vid))
        kept_positions = np.vstack([kept_positions, position])
    return np.array(kept, dtype=np.int64)


def classify_patch(
    model: ClassModel,
    patch: SurfacePatch,
    mesh: TriangleMesh,
    grid: VoxelGrid,
    *,
    sample_spacing: float = 0.0,
) -> str:
    """Majority label over profiles at the patch's subsampled vertices.

    Each sampled vertex votes for the class its profile correlates best
    with; a vertex whose best correlation is not positive votes Fracture,
    since a featureless or contradictory profile is what a fracture face
    through uniform interior bone produces.  A vote tie falls to the class
    with the highest mean correlation over all sampled vertices; an exact
    tie there falls to Fracture, the conservative choice for the solver
    (fracture faces are never matched against the template).
    """
    vertex_ids = _sampled_vertex_ids(mesh, patch, sample_spacing)
    correlations = np.zeros((vertex_ids.size, len(CLASS_NAMES)))
    for row, vid in enumerate(vertex_ids):
        profile = extract_profile(
            grid, mesh.oriented_point(int(vid)), model.depth, model.step
        )
        correlations[row] = class_correlations(model, profile)
    winners = np.argmax(correlations, axis=1)
    best = correlations[np.arange(len(winners)), winners]
    winners[best <= 0.0] = CLASS_NAMES.index(FRACTURE)
    votes = np.bincount(winners, minlength=len(CLASS_NAMES))
    leaders = np.flatnonzero(votes == votes.max())
    if leaders.size == 1:
        return CLASS_NAMES[leaders[0]]
    mean_correlation = correlations.mean(axis=0)[leaders]
    strongest = leaders[np.flatnonzero(mean_correlation == mean_correlation.max())]
    if strongest.size == 1:
        return CLASS_NAMES[strongest[0]]
    return FRACTURE


def classify_decomposition(
    model: ClassModel,
    decomposition: PatchDecomposition,
    grid: VoxelGrid,
    *,
    sample_spacing: float = 0.0,
) -> tuple[str, ...]:
    return tuple(
        classify_patch(
            model, patch, decomposition.mesh, grid, sample_spacing=sample_spacing
        )
        for patch in decomposition.patches
    )


@dataclass(frozen=True, slots=True, eq=False)
class OuterSurface:
    """The union of a fragment's periosteal patches, in parent-mesh ids."""

    mesh: TriangleMesh
    triangle_ids: np.ndarray
    vertex_ids: np.ndarray


def merge_outer(
    decomposition: PatchDecomposition, labels: tuple[str, ...] | list[str]
) -> OuterSurface:
    """Union of all Periosteal patches, keeping original mesh ids."""
    if len(labels) != len(decomposition.patches):
        raise ClassifyError("one label per patch required")
    for label in labels:
        if label not in CLASS_NAMES:
            raise ClassifyError(f"unknown patch label {label!r}")
    chosen = [
        patch.triangle_ids
        for patch, label in zip(decomposition.patches, labels)
        if label == PERIOSTEAL
    ]
    if not chosen:
        raise ClassifyError("fragment has no outer surface")
    triangle_ids = np.sort(np.concatenate(chosen))
    vertex_ids = np.unique(decomposition.mesh.triangles[triangle_ids])
    return OuterSurface(
        mesh=decomposition.mesh, triangle_ids=triangle_ids, vertex_ids=vertex_ids
    )


def write_model(path, model: ClassModel) -> None:
    payload = {
        "classes": list(CLASS_NAMES),
        "depth": model.depth,
        "step": model.step,
        "means": {name: model.means[k].tolist() for k, name in enumerate(CLASS_NAMES)},
        "variances": {
            name: model.variances[k].tolist() for k, name in enumerate(CLASS_NAMES)
        },
    }
    with open(path, "w", encoding="ascii") as handle:
        json.dump(payload, handle, sort_keys=True, indent=1)
        handle.write("\n")


def read_model(path) -> ClassModel:
    try:
        with open(path, "r", encoding="ascii") as handle:
            payload = json.load(handle)
        if tuple(payload["classes"]) != CLASS_NAMES:
            raise ClassifyError(f"{path} does not list the expected classes")
        means = np.array([payload["means"][name] for name in CLASS_NAMES], dtype=np.float64)
        variances = np.array(
            [payload["variances"][name] for name in CLASS_NAMES], dtype=np.float64
        )
        return ClassModel(
            means=means,
            variances=variances,
            depth=float(payload["depth"]),
            step=float(payload["step"]),
        )
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as error:
        raise ClassifyError(f"malformed class model in {path}") from error


def write_label_overrides(path, overrides: dict[tuple[int, int], str]) -> None:
    """Store manual labels as lines of "fragment_id patch_id label"."""
    lines = []
    for (fragment_id, patch_id) in sorted(overrides):
        label = overrides[(fragment_id, patch_id)]
        if label not in CLASS_NAMES:
            raise ClassifyError(f"unknown patch label {label!r}")
        lines.append(f"{fragment_id} {patch_id} {label}")
    with open(path, "w", encoding="ascii") as handle:
        handle.write("\n".join(lines) + ("\n" if lines else ""))


def read_label_overrides(path) -> dict[tuple[int, int], str]:
    overrides: dict[tuple[int, int], str] = {}
    with open(path, "r", encoding="ascii") as handle:
        for number, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ClassifyError(f"{path}:{number}: expected 'fragment patch label'")
            try:
                fragment_id = int(parts[0])
                patch_id = int(parts[1])
            except ValueError as error:
                raise ClassifyError(f"{path}:{number}: bad ids") from error
            if parts[2] not in CLASS_NAMES:
                raise ClassifyError(f"{path}:{number}: unknown label {parts[2]!r}")
            overrides[(fragment_id, patch_id)] = parts[2]
    return overrides
