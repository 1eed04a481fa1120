"""Mapping between metric 3D space and the discrete BEV grid."""

from __future__ import annotations

import logging

import numpy as np

from .errors import BoundsError, DimensionError, OutOfExtentError, ValidationError
from .models import AnchorBev, BevGridSpec, Box3D, DepthDistribution, PinholeCamera
from .tensor import conv2d

logger = logging.getLogger(__name__)


def box_to_anchor(box: Box3D, grid: BevGridSpec) -> AnchorBev:
    """Axis-aligned cell hull of the yaw-rotated box footprint, clamped to the grid."""
    corners = box.footprint_corners()
    u, v = grid.cell_indices(corners[:, 0], corners[:, 1])
    min_u, max_u = int(u.min()), int(u.max())
    min_v, max_v = int(v.min()), int(v.max())
    if max_u < 0 or max_v < 0 or min_u >= grid.width or min_v >= grid.height:
        raise OutOfExtentError(
            f"box at ({box.cx:.2f}, {box.cy:.2f}) lies outside the "
            f"[{grid.origin_x}, {grid.x_max}) x [{grid.origin_y}, {grid.y_max}) grid"
        )
    return AnchorBev(
        min_u=max(min_u, 0),
        min_v=max(min_v, 0),
        max_u=min(max_u, grid.width - 1),
        max_v=min(max_v, grid.height - 1),
    )


def valid_anchors(boxes: list[Box3D], grid: BevGridSpec) -> list[AnchorBev]:
    """Anchors for every box that touches the grid; boxes fully outside are skipped."""
    anchors = []
    for box in boxes:
        try:
            anchors.append(box_to_anchor(box, grid))
        except OutOfExtentError as e:
            logger.warning("Skipping box: %s", e)
    return anchors


def crop_instance(bev: np.ndarray, anchor: AnchorBev) -> np.ndarray:
    """Copy of the anchor window, shape [max_v-min_v+1, max_u-min_u+1, C]."""
    height, width = bev.shape[:2]
    if not (0 <= anchor.min_u <= anchor.max_u < width and 0 <= anchor.min_v <= anchor.max_v < height):
        raise BoundsError(f"anchor {anchor} outside {height}x{width} grid")
    return bev[anchor.min_v : anchor.max_v + 1, anchor.min_u : anchor.max_u + 1].copy()


def box_columns(box: Box3D, camera: PinholeCamera) -> tuple[int, int] | None:
    """Half-open image column span covered by the box footprint, or None if not in view."""
    columns = []
    for x, y in box.footprint_corners():
        if camera.forward_depth(x, y) <= 0:
            return None
        columns.append(camera.column_of(x, y))
    left = max(int(np.floor(min(columns))), 0)
    right = min(int(np.ceil(max(columns))), camera.width)
    return (left, right) if left < right else None


def _splat_targets(
    depth: DepthDistribution, camera: PinholeCamera, grid: BevGridSpec, columns: int
) -> tuple[np.ndarray, np.ndarray]:
    """Flat cell index per (column, bin) and the in-grid mask, both [W, D]."""
    if camera.width != columns:
        raise DimensionError(f"camera has {camera.width} columns, features have {columns}")
    xs, ys = camera.ray_points(depth.bin_centers)
    u, v = grid.cell_indices(xs, ys)
    inside = grid.in_grid(u, v)
    return np.where(inside, v * grid.width + u, 0), inside


def lift_splat(
    features: np.ndarray, depth: DepthDistribution, camera: PinholeCamera, grid: BevGridSpec
) -> np.ndarray:
    """Scatter feature x depth-probability frustum points into the BEV grid.

    ``features`` is H x W x C; every image row shares the column's ray. Bins
    landing outside the grid are dropped.
    """
    if features.ndim != 3 or features.shape[:2] != depth.probs.shape[:2]:
        raise DimensionError(f"features {features.shape} do not match depth {depth.probs.shape}")
    depth.validate()
    rows, columns, channels = features.shape
    cells, inside = _splat_targets(depth, camera, grid, columns)
    bev = np.zeros((grid.num_cells, channels), dtype=features.dtype)
    for r in range(rows):
        weights = depth.probs[r] * inside  # [W, D]
        frustum = features[r][:, None, :] * weights[:, :, None].astype(features.dtype)
        np.add.at(bev, cells.ravel(), frustum.reshape(-1, channels))
    return bev.reshape(grid.height, grid.width, channels)


def lift_splat_backward(
    grad_bev: np.ndarray, depth: DepthDistribution, camera: PinholeCamera, grid: BevGridSpec
) -> np.ndarray:
    """Gradient of :func:`lift_splat` with respect to the image features."""
    rows = depth.probs.shape[0]
    columns = depth.probs.shape[1]
    cells, inside = _splat_targets(depth, camera, grid, columns)
    flat = grad_bev.reshape(grid.num_cells, -1)
    gathered = flat[cells]  # [W, D, C]
    grad = np.empty((rows, columns, flat.shape[1]), dtype=grad_bev.dtype)
    for r in range(rows):
        weights = (depth.probs[r] * inside).astype(grad_bev.dtype)
        grad[r] = np.einsum("wd,wdc->wc", weights, gathered)
    return grad


def bev_pool_points(
    xyz: np.ndarray, features: np.ndarray, grid: BevGridSpec, mode: str = "mean"
) -> np.ndarray:
    """Reduce point features per BEV cell (``mean`` or ``max``); empty cells are zero."""
    if mode not in ("mean", "max"):
        raise ValidationError(f"unknown pooling mode {mode!r}")
    if features.ndim != 2 or features.shape[0] != xyz.shape[0]:
        raise DimensionError(f"{xyz.shape[0]} points but features {features.shape}")
    channels = features.shape[1]
    u, v = grid.cell_indices(xyz[:, 0], xyz[:, 1])
    inside = grid.in_grid(u, v)
    dropped = int((~inside).sum())
    if dropped:
        logger.debug("Dropped %d of %d points outside the grid", dropped, len(inside))
    cells = (v * grid.width + u)[inside]
    feats = features[inside]
    if mode == "mean":
        out = np.zeros((grid.num_cells, channels), dtype=features.dtype)
        np.add.at(out, cells, feats)
        counts = np.bincount(cells, minlength=grid.num_cells)
        occupied = counts > 0
        out[occupied] /= counts[occupied, None].astype(features.dtype)
    else:
        out = np.full((grid.num_cells, channels), -np.inf, dtype=features.dtype)
        np.maximum.at(out, cells, feats)
        out[np.isneginf(out)] = 0
    return out.reshape(grid.height, grid.width, channels)


def height_compress(voxels: np.ndarray, proj: np.ndarray) -> np.ndarray:
    """Max over the Z axis of an X x Y x Z x C volume, then a 1x1 conv to ``proj``'s channels."""
    if voxels.ndim != 4 or voxels.shape[2] < 1:
        raise DimensionError(f"voxels must be XxYxZxC with Z >= 1, got {voxels.shape}")
    if proj.ndim != 2 or proj.shape[0] != voxels.shape[3]:
        raise DimensionError(f"projection {proj.shape} does not accept {voxels.shape[3]} channels")
    return conv2d(voxels.max(axis=2), proj[None, None])


def voxelize_points(
    xyz: np.ndarray,
    features: np.ndarray,
    grid: BevGridSpec,
    z_range: tuple[float, float],
    z_bins: int,
) -> np.ndarray:
    """Mean point feature per (v, u, z) voxel, shape [H, W, z_bins, C]; points outside are dropped."""
    z_min, z_max = z_range
    if z_bins < 1 or not z_min < z_max:
        raise DimensionError(f"need z_bins >= 1 and a non-empty z range, got {z_bins}, {z_range}")
    z_index = np.floor((xyz[:, 2] - z_min) / (z_max - z_min) * z_bins).astype(np.int64)
    slices = [
        bev_pool_points(xyz[z_index == k], features[z_index == k], grid, "mean") for k in range(z_bins)
    ]
    return np.stack(slices, axis=2)
