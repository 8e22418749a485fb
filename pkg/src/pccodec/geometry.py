"""Voxel grids, occupancy-code pyramids, and Morton (z-order) indexing.

Conventions fixed here and relied on by every other module:

* Coordinates are non-negative int32 triples inside ``[0, 2**depth)``.
* The canonical ordering of any voxel set is ascending Morton key with the
  x axis occupying the highest bit of each interleaved triplet.
* A parent voxel's 8-bit occupancy code has bit ``b = 4*dx + 2*dy + dz`` set
  iff the child at offset ``(dx, dy, dz)`` is occupied.  The low nibble of a
  code therefore describes the ``dx = 0`` half of the block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DepthTooSmall, EmptyCloud, InvariantViolation

# Child offsets indexed by bit position b = 4*dx + 2*dy + dz.
CHILD_OFFSETS = np.array(
    [[(b >> 2) & 1, (b >> 1) & 1, b & 1] for b in range(8)], dtype=np.int32
)

MAX_DEPTH = 16


def _spread3(v: np.ndarray) -> np.ndarray:
    """Spread the low 21 bits of each value so they occupy every third bit."""
    v = v.astype(np.uint64)
    v &= np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def morton_keys(coords: np.ndarray) -> np.ndarray:
    """Vectorized Morton keys for an (N, 3) array of non-negative ints."""
    c = np.asarray(coords)
    x = _spread3(c[:, 0])
    y = _spread3(c[:, 1])
    z = _spread3(c[:, 2])
    return (x << np.uint64(2)) | (y << np.uint64(1)) | z


def morton_key(coord, depth: int) -> int:
    """Morton key of a single coordinate; total order is strict on distinct coords."""
    key = 0
    x, y, z = int(coord[0]), int(coord[1]), int(coord[2])
    for b in range(depth):
        key |= ((x >> b) & 1) << (3 * b + 2)
        key |= ((y >> b) & 1) << (3 * b + 1)
        key |= ((z >> b) & 1) << (3 * b)
    return key


def morton_sort(coords: np.ndarray) -> np.ndarray:
    """Return coords sorted by Morton key (no dedup)."""
    keys = morton_keys(coords)
    return coords[np.argsort(keys, kind="stable")]


def _sorted_unique_by_key(coords: np.ndarray) -> np.ndarray:
    keys = morton_keys(coords)
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    coords = coords[order]
    if len(keys) > 1:
        keep = np.empty(len(keys), dtype=bool)
        keep[0] = True
        np.not_equal(keys[1:], keys[:-1], out=keep[1:])
        coords = coords[keep]
    return coords


def _require_canonical(coords: np.ndarray, what: str) -> np.ndarray:
    keys = morton_keys(coords)
    if len(keys) > 1 and not np.all(keys[1:] > keys[:-1]):
        raise InvariantViolation(f"{what} must be Morton-sorted without duplicates")
    return keys


@dataclass(frozen=True)
class PointCloud:
    """Deduplicated integer voxel set, Morton-sorted, inside [0, 2**depth)^3."""

    points: np.ndarray  # (N, 3) int32
    depth: int

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PointCloud)
            and self.depth == other.depth
            and self.points.shape == other.points.shape
            and bool(np.array_equal(self.points, other.points))
        )


@dataclass(frozen=True, eq=False)
class OccupancyLevel:
    """One pyramid scale: sorted occupied coords plus an 8-bit code per voxel."""

    scale: int
    coords: np.ndarray  # (N, 3) int32, Morton-sorted
    codes: np.ndarray  # (N,) uint8, values in [1, 255]

    def __len__(self) -> int:
        return len(self.coords)


@dataclass(frozen=True, eq=False)
class VoxelPyramid:
    """Levels 0..depth-1; expanding level l reproduces level l+1 (or the points)."""

    levels: list
    depth: int

    def total_codes(self) -> int:
        return sum(len(lv) for lv in self.levels)


def from_voxels(points: np.ndarray, depth: int) -> PointCloud:
    """Wrap already-quantized integer coordinates (dedups and sorts)."""
    if not 1 <= depth <= MAX_DEPTH:
        raise DepthTooSmall(f"depth must be in [1, {MAX_DEPTH}], got {depth}")
    pts = np.asarray(points)
    if pts.size == 0:
        raise EmptyCloud("no input points")
    pts = np.atleast_2d(pts).astype(np.int64)
    if pts.shape[1] != 3:
        raise InvariantViolation("points must be (N, 3)")
    if pts.min() < 0 or pts.max() >= (1 << depth):
        raise DepthTooSmall(f"coordinates outside [0, 2^{depth})")
    return PointCloud(_sorted_unique_by_key(pts.astype(np.int32)), depth)


def voxelize(points, depth: int, bounds=None) -> PointCloud:
    """Quantize raw float/int points onto a 2**depth cubic grid.

    Scaling uses factor (2**depth - 1) / extent after shifting by the
    per-axis minimum; round-to-nearest, then dedup and Morton-sort.

    Args:
        points: (N, 3) array-like of float or int positions.
        depth: bit depth D, coordinates land in [0, 2**D).
        bounds: optional (origin, extent) pair defining the cube to
            normalize against; defaults to the data's own bounding box.
            Points outside the given bounds raise DepthTooSmall.
    """
    if not 1 <= depth <= MAX_DEPTH:
        raise DepthTooSmall(f"depth must be in [1, {MAX_DEPTH}], got {depth}")
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise EmptyCloud("no input points")
    pts = np.atleast_2d(pts)
    if pts.shape[1] != 3:
        raise InvariantViolation("points must be (N, 3)")
    if bounds is None:
        origin = pts.min(axis=0)
        extent = float((pts - origin).max()) if len(pts) else 0.0
    else:
        origin = np.asarray(bounds[0], dtype=np.float64)
        extent = float(bounds[1])
    if extent <= 0.0:
        # Degenerate cloud (single point / all identical): everything at origin.
        scaled = np.zeros_like(pts)
    else:
        scaled = (pts - origin) * (((1 << depth) - 1) / extent)
    q = np.rint(scaled).astype(np.int64)
    if q.min() < 0 or q.max() >= (1 << depth):
        raise DepthTooSmall(
            f"scaled coordinates overflow [0, 2^{depth}); increase depth or fix bounds"
        )
    return PointCloud(_sorted_unique_by_key(q.astype(np.int32)), depth)


def v2o(child_coords: np.ndarray):
    """Collapse sorted child voxels into (parent_coords, codes).

    Children sharing a parent are contiguous in Morton order, so parents are
    found by run boundaries; the returned parents stay Morton-sorted.
    """
    children = np.asarray(child_coords, dtype=np.int32)
    keys = _require_canonical(children, "child coords")
    parents = children >> 1
    bits = (
        ((children[:, 0] & 1) << 2) | ((children[:, 1] & 1) << 1) | (children[:, 2] & 1)
    ).astype(np.uint8)
    parent_keys = keys >> np.uint64(3)
    starts = np.empty(len(children), dtype=bool)
    starts[0] = True
    np.not_equal(parent_keys[1:], parent_keys[:-1], out=starts[1:])
    start_idx = np.flatnonzero(starts)
    codes = np.bitwise_or.reduceat(np.left_shift(np.uint8(1), bits), start_idx)
    return parents[start_idx], codes


def o2v(parent_coords: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Expand (parent, code) pairs into the Morton-sorted child voxel set."""
    parents = np.asarray(parent_coords, dtype=np.int32)
    codes = np.asarray(codes)
    if len(parents) != len(codes):
        raise InvariantViolation("coords/codes length mismatch")
    if len(codes) and (codes.min() < 1 or codes.max() > 255):
        raise InvariantViolation("occupancy codes must be in [1, 255]")
    chunks = []
    for b in range(8):
        mask = (codes & (1 << b)) != 0
        if mask.any():
            chunks.append((parents[mask] << 1) + CHILD_OFFSETS[b])
    children = np.concatenate(chunks, axis=0)
    return morton_sort(children)


def build_pyramid(pc: PointCloud) -> VoxelPyramid:
    """Build all scales 0..depth-1 bottom-up from the leaf voxel set."""
    levels = []
    coords = pc.points
    for scale in range(pc.depth - 1, -1, -1):
        parents, codes = v2o(coords)
        levels.append(OccupancyLevel(scale, parents, codes))
        coords = parents
    levels.reverse()
    root = levels[0]
    if len(root) != 1 or root.coords[0].any():
        raise InvariantViolation("pyramid root must be the single voxel (0,0,0)")
    return VoxelPyramid(levels, pc.depth)


def expand_pyramid(pyramid: VoxelPyramid) -> PointCloud:
    """Inverse of build_pyramid: expand the final level back to the points."""
    leaf = pyramid.levels[-1]
    return PointCloud(o2v(leaf.coords, leaf.codes), pyramid.depth)
