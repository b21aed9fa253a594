"""Spin-image surface descriptors and their correlation-based match scoring.

A spin image summarizes the surface geometry around an oriented point as a
2-D histogram over cylindrical coordinates: radial distance ``alpha`` from
the point's normal axis and signed height ``beta`` along the normal.  The
histogram depends only on distances and dot products with the normal, so it
is invariant to rigid motion.  Coordinates are quantized to a fixed grid
before binning, which makes the invariance exact at the byte level instead
of merely approximate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import OrientedPoint, TriangleMesh

# Spatial quantum for (alpha, beta) coordinates, in mm.  Rigid transforms
# perturb coordinates by ~1e-13 mm; snapping to this much coarser grid
# removes the perturbation so descriptors are bitwise pose-invariant.
COORDINATE_QUANTUM = 1e-6

_CACHE_MAGIC = b"SPIN"
_CACHE_VERSION = 1


class SpinError(Exception):
    """Raised for invalid descriptor construction, scoring, or serialization."""


@dataclass(frozen=True, slots=True)
class SpinImage:
    """One spin-image descriptor.

    ``bins`` has shape (rows, cols) with rows spanning alpha in
    [0, rows_minus_one * bin_size] and cols spanning beta in
    [-half * bin_size, +half * bin_size].  Counts are bilinearly
    accumulated and normalized by the maximum bin, so values lie in [0, 1].
    """

    bins: np.ndarray
    bin_size: float
    support_radius: float
    source_id: int
    position: np.ndarray
    normal: np.ndarray
    curvature: float
    nonzero_count: int

    def __post_init__(self) -> None:
        if self.bins.ndim != 2:
            raise SpinError("spin image bins must be a 2-D array")
        if not (self.bin_size > 0.0 and self.support_radius > 0.0):
            raise SpinError("bin size and support radius must be positive")
        if self.position.shape != (3,) or self.normal.shape != (3,):
            raise SpinError("source position and normal must be 3-vectors")


def _grid_extents(bin_size: float, support_radius: float) -> tuple[int, int, int, float]:
    """Histogram layout for a given bin size and support radius.

    Returns (half, rows, cols, grid_support) where grid_support is the
    largest coordinate the grid represents.  The support radius is expected
    to be close to a whole number of bins; it is rounded to one.
    """
    if not (bin_size > 0.0 and support_radius > 0.0):
        raise SpinError("bin size and support radius must be positive")
    half = int(round(support_radius / bin_size))
    if half < 1:
        raise SpinError("support radius must cover at least one bin")
    rows = half + 1
    cols = 2 * half + 1
    return half, rows, cols, half * bin_size


def spin_coordinates(
    source: OrientedPoint, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Cylindrical coordinates of ``points`` about an oriented source point.

    ``beta`` is the signed distance along the source normal and ``alpha``
    the nonnegative distance from the normal axis, so that
    alpha**2 + beta**2 equals the squared Euclidean distance.
    """
    delta = np.asarray(points, dtype=np.float64).reshape(-1, 3) - source.position
    beta = delta @ source.normal
    alpha_sq = np.einsum("ij,ij->i", delta, delta) - beta * beta
    alpha = np.sqrt(np.maximum(alpha_sq, 0.0))
    return alpha, beta


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.round(values / COORDINATE_QUANTUM) * COORDINATE_QUANTUM


def _accumulate(
    alpha: np.ndarray,
    beta: np.ndarray,
    image_index: np.ndarray,
    image_count: int,
    bin_size: float,
    support_radius: float,
) -> np.ndarray:
    """Bilinearly bin quantized coordinates into one histogram per image.

    Contributions are spread over the four surrounding bins.  Fractions
    that fall past the outer alpha row or beta column are dropped, which
    only happens for points within one bin of the support boundary.
    """
    half, rows, cols, grid_support = _grid_extents(bin_size, support_radius)
    # Membership in the support window is decided on quantized coordinates
    # only, so the contributor set is identical in every rigid pose.
    alpha_q = _quantize(alpha)
    beta_q = _quantize(beta)
    keep = (alpha_q <= grid_support) & (np.abs(beta_q) <= grid_support)
    alpha_q = alpha_q[keep]
    beta_q = beta_q[keep]
    image_index = image_index[keep]

    # Cancellation at the window edges can leave a position a hair below
    # zero; clamp before flooring so no index escapes the grid.
    row_pos = np.maximum(alpha_q / bin_size, 0.0)
    col_pos = np.maximum((beta_q + grid_support) / bin_size, 0.0)
    row_lo = np.floor(row_pos).astype(np.int64)
    col_lo = np.floor(col_pos).astype(np.int64)
    row_frac = row_pos - row_lo
    col_frac = col_pos - col_lo

    # One spill row and column catch the upper bilinear neighbors of points
    # in the outermost bins; they are cropped after accumulation.
    scratch_shape = (image_count, rows + 1, cols + 1)
    flat = np.zeros(scratch_shape[0] * scratch_shape[1] * scratch_shape[2])
    base = (image_index * scratch_shape[1] + row_lo) * scratch_shape[2] + col_lo
    for row_step, col_step, weight in (
        (0, 0, (1.0 - row_frac) * (1.0 - col_frac)),
        (0, 1, (1.0 - row_frac) * col_frac),
        (1, 0, row_frac * (1.0 - col_frac)),
        (1, 1, row_frac * col_frac),
    ):
        index = base + row_step * scratch_shape[2] + col_step
        flat += np.bincount(index, weights=weight, minlength=flat.size)
    scratch = flat.reshape(scratch_shape)
    return scratch[:, :rows, :cols]


def _finalize(counts: np.ndarray) -> tuple[np.ndarray, int]:
    peak = counts.max()
    if peak > 0.0:
        counts = counts / peak
    return counts, int(np.count_nonzero(counts))


def compute_spin_image(
    source: OrientedPoint,
    points: np.ndarray,
    bin_size: float,
    support_radius: float,
    *,
    source_id: int = -1,
    curvature: float = float("nan"),
) -> SpinImage:
    """Descriptor of ``source`` built from an explicit contributor set.

    Points outside the support window (alpha or |beta| past the support
    radius) are ignored, so callers may pass more than the neighborhood.
    The source point itself should be among ``points`` when it lies on the
    surface being described.
    """
    alpha, beta = spin_coordinates(source, points)
    counts = _accumulate(
        alpha, beta, np.zeros(alpha.size, dtype=np.int64), 1, bin_size, support_radius
    )[0]
    bins, nonzero = _finalize(counts)
    return SpinImage(
        bins=bins,
        bin_size=float(bin_size),
        support_radius=float(support_radius),
        source_id=int(source_id),
        position=np.array(source.position, dtype=np.float64),
        normal=np.array(source.normal, dtype=np.float64),
        curvature=float(curvature),
        nonzero_count=nonzero,
    )


def compute_descriptors(
    mesh: TriangleMesh,
    source_ids: np.ndarray,
    bin_size: float,
    support_radius: float,
    *,
    curvatures: np.ndarray | None = None,
) -> list[SpinImage]:
    """Spin images at the given mesh vertices, one per source id.

    All mesh vertices within the support radius contribute to each image,
    including the source vertex itself.  ``curvatures``, when given, must
    hold one value per mesh vertex and is used to tag each descriptor.
    """
    source_ids = np.asarray(source_ids, dtype=np.int64).reshape(-1)
    if source_ids.size == 0:
        return []
    if np.any(source_ids < 0) or np.any(source_ids >= len(mesh.vertices)):
        raise SpinError("descriptor source ids out of range")
    if curvatures is not None:
        curvatures = np.asarray(curvatures, dtype=np.float64)
        if curvatures.shape != (len(mesh.vertices),):
            raise SpinError("curvature array must hold one value per vertex")

    half, rows, cols, grid_support = _grid_extents(bin_size, support_radius)
    positions = mesh.vertices[source_ids]
    normals = mesh.vertex_normals[source_ids]

    tree = cKDTree(mesh.vertices)
    # The support window is |beta| <= support and alpha <= support, whose
    # farthest corner sits at sqrt(2) * support; gathering that ball with a
    # little slack guarantees the quantized window test sees every point it
    # could accept, regardless of pose jitter.
    neighborhoods = tree.query_ball_point(positions, r=grid_support * np.sqrt(2.0) * (1.0 + 1e-9))
    counts = np.array([len(n) for n in neighborhoods], dtype=np.int64)
    contributor_ids = (
        np.concatenate([np.sort(np.asarray(n, dtype=np.int64)) for n in neighborhoods])
        if counts.sum() > 0
        else np.zeros(0, dtype=np.int64)
    )
    image_index = np.repeat(np.arange(source_ids.size, dtype=np.int64), counts)

    delta = mesh.vertices[contributor_ids] - positions[image_index]
    beta = np.einsum("ij,ij->i", delta, normals[image_index])
    alpha_sq = np.einsum("ij,ij->i", delta, delta) - beta * beta
    alpha = np.sqrt(np.maximum(alpha_sq, 0.0))

    stacks = _accumulate(
        alpha, beta, image_index, source_ids.size, bin_size, support_radius
    )

    images = []
    for k, vid in enumerate(source_ids):
        bins, nonzero = _finalize(stacks[k])
        images.append(
            SpinImage(
                bins=bins,
                bin_size=float(bin_size),
                support_radius=float(support_radius),
                source_id=int(vid),
                position=positions[k].copy(),
                normal=normals[k].copy(),
                curvature=float(curvatures[vid]) if curvatures is not None else float("nan"),
                nonzero_count=nonzero,
            )
        )
    return images


def _as_bins(image) -> np.ndarray:
    if isinstance(image, SpinImage):
        return image.bins
    return np.asarray(image, dtype=np.float64)


def overlap_correlation(first, second) -> tuple[float, int]:
    """Pearson correlation over bins that are nonzero in both images.

    Accepts SpinImage instances or raw arrays of equal shape.  Returns
    (correlation, overlap_size).  An empty overlap or a constant side
    yields a correlation of 0.0.
    """
    bins_p = _as_bins(first)
    bins_q = _as_bins(second)
    if bins_p.shape != bins_q.shape:
        raise SpinError("spin images must share a grid to be compared")
    overlap = (bins_p != 0.0) & (bins_q != 0.0)
    size = int(np.count_nonzero(overlap))
    if size == 0:
        return 0.0, 0
    p = bins_p[overlap]
    q = bins_q[overlap]
    dp = p - p.mean()
    dq = q - q.mean()
    var_p = dp @ dp
    var_q = dq @ dq
    if var_p == 0.0 or var_q == 0.0:
        return 0.0, size
    return float((dp @ dq) / np.sqrt(var_p * var_q)), size


def match_score_from_correlation(
    correlation: float, overlap_size: int, flatness_penalty: float
) -> float:
    """Similarity score from a correlation and the size of its overlap.

    The correlation is variance-stabilized with atanh and squared, then a
    penalty inversely proportional to the overlap support is subtracted.
    Overlaps of three or fewer bins carry no information and score -inf.
    """
    if overlap_size <= 3:
        return float("-inf")
    limit = 1.0 - 1e-9
    clamped = min(max(correlation, -limit), limit)
    stabilized = np.arctanh(clamped)
    return float(stabilized * stabilized - flatness_penalty / (overlap_size - 3))


def match_score(first, second, flatness_penalty: float) -> float:
    correlation, size = overlap_correlation(first, second)
    return match_score_from_correlation(correlation, size, flatness_penalty)


def auto_flatness_penalty(images: list[SpinImage]) -> float:
    """Default overlap penalty: half the mean occupied-bin count."""
    if not images:
        raise SpinError("cannot derive a flatness penalty from zero descriptors")
    return float(np.mean([image.nonzero_count for image in images]) / 2.0)


def _stack(images: list[SpinImage]) -> np.ndarray:
    if not images:
        raise SpinError("descriptor list is empty")
    shape = images[0].bins.shape
    params = (images[0].bin_size, images[0].support_radius)
    for image in images:
        if image.bins.shape != shape or (image.bin_size, image.support_radius) != params:
            raise SpinError("descriptors must share one grid to be scored together")
    return np.stack([image.bins.reshape(-1) for image in images])


def score_pairs(
    rows: list[SpinImage], cols: list[SpinImage], flatness_penalty: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All-pairs match scores between two descriptor lists.

    Returns (scores, correlations, overlap_sizes) with shape
    (len(rows), len(cols)).  Equivalent to looping match_score over pairs
    but computed with masked matrix products: because a spin image is zero
    outside its own occupancy mask, sums of p, p**2, q, q**2, and p*q over
    the joint overlap are all expressible as products against the other
    side's mask.
    """
    p = _stack(rows)
    q = _stack(cols)
    if rows[0].bins.shape != cols[0].bins.shape:
        raise SpinError("descriptors must share one grid to be scored together")
    mask_p = (p != 0.0).astype(np.float64)
    mask_q = (q != 0.0).astype(np.float64)

    overlap = mask_p @ mask_q.T
    sum_p = p @ mask_q.T
    sum_pp = (p * p) @ mask_q.T
    sum_q = mask_p @ q.T
    sum_qq = mask_p @ (q * q).T
    sum_pq = p @ q.T

    safe_n = np.maximum(overlap, 1.0)
    cov = sum_pq - sum_p * sum_q / safe_n
    var_p = np.maximum(sum_pp - sum_p * sum_p / safe_n, 0.0)
    var_q = np.maximum(sum_qq - sum_q * sum_q / safe_n, 0.0)
    denom = np.sqrt(var_p * var_q)
    with np.errstate(invalid="ignore", divide="ignore"):
        correlations = np.where(denom > 0.0, cov / np.maximum(denom, 1e-300), 0.0)
    correlations = np.clip(correlations, -1.0, 1.0)

    limit = 1.0 - 1e-9
    stabilized = np.arctanh(np.clip(correlations, -limit, limit))
    sizes = overlap.astype(np.int64)
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = np.where(
            sizes > 3,
            stabilized * stabilized - flatness_penalty / np.maximum(sizes - 3, 1),
            -np.inf,
        )
    return scores, correlations, sizes


def write_descriptors(path, images: list[SpinImage]) -> None:
    """Serialize descriptors to a deterministic little-endian binary file."""
    if images:
        reference = _stack(images)  # validates a shared grid
        rows, cols = images[0].bins.shape
        bin_size = images[0].bin_size
        support = images[0].support_radius
    else:
        reference = np.zeros((0, 0))
        rows = cols = 0
        bin_size = support = 0.0
    header = struct.pack(
        "<4sIIIIdd", _CACHE_MAGIC, _CACHE_VERSION, len(images), rows, cols, bin_size, support
    )
    ids = np.array([image.source_id for image in images], dtype="<i8")
    positions = np.array([image.position for image in images], dtype="<f8").reshape(-1, 3)
    normals = np.array([image.normal for image in images], dtype="<f8").reshape(-1, 3)
    curvatures = np.array([image.curvature for image in images], dtype="<f8")
    counts = np.array([image.nonzero_count for image in images], dtype="<i8")
    bins = reference.astype("<f8").reshape(len(images), rows * cols)
    with open(path, "wb") as handle:
        handle.write(header)
        handle.write(ids.tobytes())
        handle.write(positions.tobytes())
        handle.write(normals.tobytes())
        handle.write(curvatures.tobytes())
        handle.write(counts.tobytes())
        handle.write(bins.tobytes())


def read_descriptors(path) -> list[SpinImage]:
    with open(path, "rb") as handle:
        data = handle.read()
    header_size = struct.calcsize("<4sIIIIdd")
    if len(data) < header_size:
        raise SpinError(f"descriptor file {path} is truncated")
    magic, version, count, rows, cols, bin_size, support = struct.unpack(
        "<4sIIIIdd", data[:header_size]
    )
    if magic != _CACHE_MAGIC:
        raise SpinError(f"{path} is not a descriptor cache")
    if version != _CACHE_VERSION:
        raise SpinError(f"unsupported descriptor cache version {version}")
    expected = header_size + count * (8 + 24 + 24 + 8 + 8 + rows * cols * 8)
    if len(data) != expected:
        raise SpinError(f"descriptor file {path} is truncated")

    offset = header_size

    def take(dtype, shape):
        nonlocal offset
        array = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=offset)
        offset += array.nbytes
        return array.reshape(shape)

    ids = take("<i8", (count,))
    positions = take("<f8", (count, 3))
    normals = take("<f8", (count, 3))
    curvatures = take("<f8", (count,))
    counts = take("<i8", (count,))
    bins = take("<f8", (count, rows, cols))
    images = []
    for k in range(count):
        images.append(
            SpinImage(
                bins=np.array(bins[k], dtype=np.float64),
                bin_size=float(bin_size),
                support_radius=float(support),
                source_id=int(ids[k]),
                position=np.array(positions[k], dtype=np.float64),
                normal=np.array(normals[k], dtype=np.float64),
                curvature=float(curvatures[k]),
                nonzero_count=int(counts[k]),
            )
        )
    return images
