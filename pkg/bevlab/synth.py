"""Procedural toy scenes and the frozen-teacher / trainable-student toy encoders.

Every object carries a latent appearance code. The teacher sees it through
point features scattered on the box surfaces; the student sees it through a
narrower image-strip feature lifted along camera rays. Each object column
spreads its depth mass evenly over the BEV cells its own points occupy, so a
linear student projection can align the two BEV maps, but only after training.
"""

from __future__ import annotations

import asyncio
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .augment import cutmix_composite
from .config import SynthConfig
from .errors import EncoderKindError, OutOfExtentError, PlacementError
from .geometry import bev_pool_points, box_to_anchor, height_compress, lift_splat, voxelize_points
from .models import (
    AnchorBev,
    BevGridSpec,
    Box3D,
    DepthDistribution,
    DepthPatch,
    PointCloud,
    SceneSample,
)
from .tensor import DEFAULT_DTYPE, init_normal, linear, make_rng

logger = logging.getLogger(__name__)

EncoderKind = Literal["teacher_frozen", "student_trainable"]

# (length, width, height) in metres per class id: car, pedestrian, cyclist
CLASS_DIMS = ((4.0, 1.8, 1.5), (0.8, 0.8, 1.7), (1.8, 0.6, 1.7))
LATENT_DIM = 4
SIGNATURE_SCALE = 0.3
APPEARANCE_SEED = 20240917
NEAR_FRACTION = 0.25
LATERAL_FRACTION = 0.7
MAX_PLACEMENT_TRIES = 100
SURFACE_JITTER = 0.05
DIM_JITTER = 0.05


def _orthonormal_rows(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """A [rows, cols] matrix with orthonormal rows (or columns when rows > cols)."""
    q, r = np.linalg.qr(rng.standard_normal((max(rows, cols), min(rows, cols))))
    q = q * np.sign(np.diag(r))
    return q.T if rows <= cols else q


@dataclass(frozen=True)
class AppearanceModel:
    """Fixed class signatures and the latent-to-feature mixing matrices of both modalities.

    Both mixing matrices have orthonormal rows, so the image features keep the
    whole latent and an exact, well-conditioned student map exists.
    """

    signatures: np.ndarray  # [classes, LATENT_DIM]
    to_points: np.ndarray  # [LATENT_DIM, teacher_channels]
    to_image: np.ndarray  # [LATENT_DIM, student_channels]

    @classmethod
    def for_config(cls, cfg: SynthConfig) -> AppearanceModel:
        rng = make_rng(APPEARANCE_SEED)
        return cls(
            signatures=rng.standard_normal((len(CLASS_DIMS), LATENT_DIM)) * SIGNATURE_SCALE,
            to_points=_orthonormal_rows(rng, LATENT_DIM, cfg.teacher_channels),
            to_image=_orthonormal_rows(rng, LATENT_DIM, cfg.student_channels),
        )


@dataclass(frozen=True)
class RaySamples:
    """Bin-centre samples of every camera ray: world position and flat BEV cell id (-1 off-grid)."""

    xs: np.ndarray  # [W, D]
    ys: np.ndarray  # [W, D]
    cells: np.ndarray  # [W, D] int64

    @classmethod
    def for_config(cls, cfg: SynthConfig, centers: np.ndarray) -> RaySamples:
        grid = cfg.grid
        xs, ys = cfg.camera.ray_points(centers)
        u, v = grid.cell_indices(xs, ys)
        cells = np.where(grid.in_grid(u, v), v * grid.width + u, -1)
        return cls(xs, ys, cells)

    def footprint_hits(self, box: Box3D) -> np.ndarray:
        """[W, D] mask of samples inside the box footprint (at the box's mid height)."""
        samples = np.stack([self.xs.ravel(), self.ys.ravel(), np.full(self.xs.size, box.cz)], axis=1)
        return box.contains(samples).reshape(self.xs.shape)


@dataclass(frozen=True)
class Placement:
    """One placed object: its box, anchor, image columns, kept points and per-sample depth weights."""

    box: Box3D
    anchor: AnchorBev
    columns: np.ndarray  # [W] bool, contiguous
    xyz: np.ndarray  # [N, 3]
    weights: np.ndarray  # [W, D], largest column sum is 1


def _anchor_cells(anchor: AnchorBev, grid: BevGridSpec) -> np.ndarray:
    u, v = np.meshgrid(np.arange(anchor.min_u, anchor.max_u + 1), np.arange(anchor.min_v, anchor.max_v + 1))
    return (v * grid.width + u).ravel()


def _placement_ranges(cfg: SynthConfig, margin: float) -> tuple[float, float]:
    """Forward range where a footprint of half-diagonal ``margin`` stays in the grid and the depth bins."""
    grid = cfg.grid
    far = min(grid.x_max, cfg.depth_max) - margin
    near = max(grid.origin_x, cfg.depth_min, 0.0) + margin
    return max(near, NEAR_FRACTION * far), far


def _sample_box(rng: np.random.Generator, class_id: int, cfg: SynthConfig) -> Box3D | None:
    """A random box inside the grid and the camera's view, or None when this draw has no room."""
    grid, camera = cfg.grid, cfg.camera
    jitter = 1.0 + rng.uniform(-DIM_JITTER, DIM_JITTER, size=3)
    length, width, height = (float(d) for d in np.asarray(CLASS_DIMS[class_id]) * jitter)
    margin = math.hypot(length, width) / 2.0
    near, far = _placement_ranges(cfg, margin)
    if near > far:
        return None
    x = float(rng.uniform(near, far))
    half_view = LATERAL_FRACTION * x * min(camera.cx, camera.width - camera.cx) / camera.fx
    lo = max(-half_view, grid.origin_y + margin)
    hi = min(half_view, grid.y_max - margin)
    if lo > hi:
        return None
    return Box3D(
        cx=x,
        cy=float(rng.uniform(lo, hi)),
        cz=height / 2.0,
        l=length,
        w=width,
        h=height,
        yaw=float(rng.uniform(-math.pi, math.pi)),
        class_id=class_id,
    )


def _surface_points(rng: np.random.Generator, box: Box3D, count: int) -> np.ndarray:
    """Points scattered over the six faces (area-weighted) with Gaussian jitter."""
    half = np.array([box.l, box.w, box.h]) / 2.0
    areas = np.array([box.w * box.h, box.l * box.h, box.l * box.w])
    axis = rng.choice(3, size=count, p=areas / areas.sum())
    local = rng.uniform(-1.0, 1.0, size=(count, 3)) * half
    sign = np.where(rng.integers(2, size=count) == 1, 1.0, -1.0)
    local[np.arange(count), axis] = sign * half[axis]
    local += rng.normal(0.0, SURFACE_JITTER, size=local.shape)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = box.cx + c * local[:, 0] - s * local[:, 1]
    world[:, 1] = box.cy + s * local[:, 0] + c * local[:, 1]
    world[:, 2] = box.cz + local[:, 2]
    return world


def shared_cell_weights(
    xyz: np.ndarray, anchor: AnchorBev, columns: np.ndarray, samples: RaySamples, grid: BevGridSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Cells both modalities see, as (kept-point mask, per-sample depth weights).

    A cell is shared when it lies in the anchor, holds at least one point and
    is sampled by one of the object's columns. Points outside shared cells are
    dropped. Weights give every shared cell the same total and are scaled so
    the heaviest column sums to one; they are all zero when no cell is shared.
    """
    u, v = grid.cell_indices(xyz[:, 0], xyz[:, 1])
    point_cells = v * grid.width + u
    in_anchor = (u >= anchor.min_u) & (u <= anchor.max_u) & (v >= anchor.min_v) & (v <= anchor.max_v)
    candidate = columns[:, None] & np.isin(samples.cells, point_cells[in_anchor])
    shared, counts = np.unique(samples.cells[candidate], return_counts=True)
    keep = in_anchor & np.isin(point_cells, shared)
    weights = np.zeros(samples.cells.shape)
    if shared.size:
        weights[candidate] = 1.0 / counts[np.searchsorted(shared, samples.cells[candidate])]
        weights /= weights.sum(axis=1).max()
    return keep, weights


def _place_objects(
    rng: np.random.Generator, count: int, cfg: SynthConfig, samples: RaySamples
) -> list[Placement]:
    """Objects with disjoint BEV anchors, disjoint image column spans and at least one shared cell."""
    grid = cfg.grid
    placed: list[Placement] = []
    taken = np.zeros(samples.cells.shape[0], dtype=bool)
    for i in range(count):
        for _ in range(MAX_PLACEMENT_TRIES):
            box = _sample_box(rng, int(rng.integers(cfg.num_classes)), cfg)
            if box is None:
                continue
            try:
                anchor = box_to_anchor(box, grid)
            except OutOfExtentError:
                continue
            if any(anchor.overlaps(p.anchor) for p in placed):
                continue
            columns = samples.footprint_hits(box).any(axis=1)
            if not columns.any() or (columns & taken).any():
                continue
            xyz = _surface_points(rng, box, cfg.points_per_object)
            keep, weights = shared_cell_weights(xyz, anchor, columns, samples, grid)
            if not keep.any():
                continue
            placed.append(Placement(box, anchor, columns, xyz[keep], weights))
            taken |= columns
            break
        else:
            raise PlacementError(
                f"could not place object {i + 1} of {count} in {MAX_PLACEMENT_TRIES} tries"
            )
    return placed


def _object_depth(weights: np.ndarray, free: np.ndarray, floor: float) -> np.ndarray:
    """A floor, the shared-cell weights, and whatever mass remains spread over ``free`` bins."""
    bins = weights.size
    spare = np.where(free, 1.0, 0.0) if free.any() else np.ones(bins)
    remainder = (1.0 - floor) * max(1.0 - float(weights.sum()), 0.0)
    return floor / bins + (1.0 - floor) * weights + remainder * spare / spare.sum()


def generate_scene(cfg: SynthConfig, index: int, seed: int = 0) -> SceneSample:
    """A deterministic toy scene; a pure function of ``(cfg, index, seed)``."""
    rng = make_rng([seed, index])
    appearance = AppearanceModel.for_config(cfg)
    camera = cfg.camera
    edges = cfg.bin_edges
    centers = 0.5 * (edges[:-1] + edges[1:])
    samples = RaySamples.for_config(cfg, centers)

    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    placed = _place_objects(rng, count, cfg, samples)

    clouds = [PointCloud.empty(cfg.teacher_channels)]
    patches = []
    for instance_id, obj in enumerate(placed):
        latent = appearance.signatures[obj.box.class_id] + rng.standard_normal(LATENT_DIM)
        point_features = latent @ appearance.to_points + rng.normal(
            0.0, cfg.noise, (len(obj.xyz), cfg.teacher_channels)
        )
        clouds.append(PointCloud(obj.xyz, point_features.astype(DEFAULT_DTYPE)))

        columns = np.flatnonzero(obj.columns)
        left, right = int(columns[0]), int(columns[-1]) + 1
        pixels = latent @ appearance.to_image + rng.normal(
            0.0, cfg.noise, (cfg.image_height, right - left, cfg.student_channels)
        )
        patches.append(
            DepthPatch(
                top=0,
                left=left,
                pixels=pixels.astype(DEFAULT_DTYPE),
                depth=camera.forward_depth(obj.box.cx, obj.box.cy),
                instance_id=instance_id,
            )
        )

    background = rng.normal(0.0, cfg.noise, (cfg.image_height, cfg.image_width, cfg.student_channels))
    image, visible = cutmix_composite(background.astype(DEFAULT_DTYPE), patches)

    in_anchors = np.isin(samples.cells, [c for p in placed for c in _anchor_cells(p.anchor, cfg.grid)])
    probs = np.full((cfg.image_height, cfg.image_width, centers.size), 1.0 / centers.size)
    for row in range(cfg.image_height):
        for col in range(cfg.image_width):
            owner = int(visible[row, col])
            if owner >= 0:
                probs[row, col] = _object_depth(placed[owner].weights[col], ~in_anchors[col], cfg.depth_floor)

    points = clouds[0]
    for cloud in clouds[1:]:
        points = points.concat(cloud)
    logger.debug("Scene %d: %d objects, %d points", index, len(placed), len(points))
    return SceneSample(
        points=points,
        image_features=image,
        depth=DepthDistribution(probs.astype(DEFAULT_DTYPE), edges),
        boxes=[p.box for p in placed],
        camera=camera,
        patches=patches,
    )


async def generate_scenes(
    cfg: SynthConfig, indices: Sequence[int], seed: int = 0, threads: int = 4
) -> list[SceneSample]:
    """Generate scenes concurrently, at most ``threads`` at a time, in index order."""
    semaphore = asyncio.Semaphore(max(threads, 1))

    async def one(index: int) -> SceneSample:
        async with semaphore:
            return await asyncio.to_thread(generate_scene, cfg, index, seed)

    scenes = await asyncio.gather(*[one(i) for i in indices])
    logger.info("Generated %d scenes", len(scenes))
    return list(scenes)


# ── Toy encoders ──────────────────────────────────────────────────────


@dataclass
class ToyEncoder:
    """A bias-free linear projection from input features to BEV channels.

    Teacher weights are made read-only at construction.
    """

    kind: EncoderKind
    weights: np.ndarray  # [C_in, C]

    def __post_init__(self) -> None:
        if self.kind not in ("teacher_frozen", "student_trainable"):
            raise EncoderKindError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "teacher_frozen":
            self.weights = self.weights.copy()
            self.weights.setflags(write=False)

    @property
    def in_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def teacher(cls, cfg: SynthConfig, seed: int = 0) -> ToyEncoder:
        rng = make_rng([seed, 1])
        std = 1.0 / math.sqrt(cfg.teacher_channels)
        return cls("teacher_frozen", init_normal((cfg.teacher_channels, cfg.channels), rng, std=std))

    @classmethod
    def student(cls, cfg: SynthConfig, seed: int = 0) -> ToyEncoder:
        rng = make_rng([seed, 2])
        return cls("student_trainable", init_normal((cfg.student_channels, cfg.channels), rng))

    def project(self, features: np.ndarray) -> np.ndarray:
        return linear(features, self.weights.astype(features.dtype, copy=False))


def _require_kind(enc: ToyEncoder, kind: EncoderKind) -> None:
    if enc.kind != kind:
        raise EncoderKindError(f"expected a {kind} encoder, got {enc.kind}")


def teacher_encode(scene: SceneSample, enc: ToyEncoder, grid: BevGridSpec) -> np.ndarray:
    """Frozen point projection followed by mean pooling into BEV cells."""
    _require_kind(enc, "teacher_frozen")
    return bev_pool_points(scene.points.xyz, enc.project(scene.points.features), grid, "mean")


def student_encode(scene: SceneSample, enc: ToyEncoder, grid: BevGridSpec) -> np.ndarray:
    """Trainable image projection lifted along the camera rays."""
    _require_kind(enc, "student_trainable")
    return lift_splat(enc.project(scene.image_features), scene.depth, scene.camera, grid)


def lidar_encode(
    scene: SceneSample,
    enc: ToyEncoder,
    grid: BevGridSpec,
    z_range: tuple[float, float] = (0.0, 2.0),
    z_bins: int = 4,
) -> np.ndarray:
    """Voxelize raw point features, compress the height axis and project with the teacher weights."""
    _require_kind(enc, "teacher_frozen")
    voxels = voxelize_points(scene.points.xyz, scene.points.features, grid, z_range, z_bins)
    return height_compress(voxels, np.asarray(enc.weights, dtype=voxels.dtype))
