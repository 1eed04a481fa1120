"""Multimodal augmentation: GT sampling, depth-ordered CutMix, global and per-instance transforms.

Point-side transforms move points and boxes together and leave the image
untouched; image-side instance patches are composited far-to-near so nearer
instances occlude farther ones.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import BoundsError, EmptyBankError, OutOfExtentError, ValidationError
from .geometry import box_columns, box_to_anchor, valid_anchors
from .models import BankInstance, BevGridSpec, Box3D, DepthPatch, PointCloud, SceneSample
from .tensor import make_rng

logger = logging.getLogger(__name__)

MAX_INSERT_ATTEMPTS = 10
SCALE_RANGE = (0.95, 1.05)
ROTATION_RANGE = (-math.pi / 4, math.pi / 4)
NO_INSTANCE = -1


# ── GT sampling ───────────────────────────────────────────────────────


def gt_sample(
    scene: SceneSample,
    bank: list[BankInstance],
    k: int,
    seed: int,
    grid: BevGridSpec,
) -> SceneSample:
    """Paste ``k`` bank instances into the scene at their stored poses.

    A candidate whose BEV anchor overlaps an existing box is redrawn; after
    ``MAX_INSERT_ATTEMPTS`` misses the slot is abandoned.
    """
    if k < 0:
        raise ValidationError(f"sample count must be >= 0, got {k}")
    if k == 0:
        return scene
    if not bank:
        raise EmptyBankError(f"cannot draw {k} instances from an empty bank")
    rng = make_rng(seed)
    occupied = valid_anchors(scene.boxes, grid)
    points, boxes, patches = scene.points, list(scene.boxes), list(scene.patches)

    for slot in range(k):
        for attempt in range(MAX_INSERT_ATTEMPTS):
            candidate = bank[int(rng.integers(len(bank)))]
            try:
                anchor = box_to_anchor(candidate.box, grid)
            except OutOfExtentError:
                continue
            if any(anchor.overlaps(other) for other in occupied):
                logger.debug("Slot %d attempt %d collides, redrawing", slot, attempt)
                continue
            occupied.append(anchor)
            points = points.concat(candidate.points)
            boxes.append(candidate.box)
            patches.append(candidate.patch)
            break
        else:
            logger.warning("Abandoned GT sample slot %d after %d attempts", slot, MAX_INSERT_ATTEMPTS)

    return replace(scene, points=points, boxes=boxes, patches=patches)


def extract_bank(scene: SceneSample) -> list[BankInstance]:
    """One bank entry per box that is visible in the image strip."""
    bank = []
    for instance_id, box in enumerate(scene.boxes):
        span = box_columns(box, scene.camera)
        if span is None:
            logger.debug("Box %d is out of view, not banked", instance_id)
            continue
        left, right = span
        inside = box.contains(scene.points.xyz)
        patch = DepthPatch(
            top=0,
            left=left,
            pixels=scene.image_features[:, left:right].copy(),
            depth=scene.camera.forward_depth(box.cx, box.cy),
            instance_id=instance_id,
        )
        points = PointCloud(scene.points.xyz[inside], scene.points.features[inside])
        bank.append(BankInstance(points=points, box=box, patch=patch))
    return bank


# ── Depth-ordered CutMix ──────────────────────────────────────────────


def cutmix_composite(canvas: np.ndarray, patches: list[DepthPatch]) -> tuple[np.ndarray, np.ndarray]:
    """Paint patches far-to-near; returns the composite and the per-pixel visible instance id.

    Depth ties go to the higher instance id. Pixels no patch covers keep the
    canvas value and visibility ``NO_INSTANCE``.
    """
    for patch in patches:
        if not patch.depth > 0:
            raise ValidationError(f"patch {patch.instance_id} has non-positive depth {patch.depth}")
    height, width = canvas.shape[:2]
    out = canvas.copy()
    visible = np.full((height, width), NO_INSTANCE, dtype=np.int64)
    for patch in sorted(patches, key=lambda p: (-p.depth, p.instance_id)):
        clipped = patch.clipped(height, width)
        if clipped is None:
            continue
        if clipped.pixels.shape[2:] != canvas.shape[2:]:
            raise ValidationError(
                f"patch {patch.instance_id} channels {clipped.pixels.shape[2:]} != {canvas.shape[2:]}"
            )
        out[clipped.top : clipped.bottom, clipped.left : clipped.right] = clipped.pixels
        visible[clipped.top : clipped.bottom, clipped.left : clipped.right] = clipped.instance_id
    return out, visible


# ── Geometric transforms ──────────────────────────────────────────────


@dataclass(frozen=True)
class GlobalAugmentation:
    """Flip across the x axis, then scale, then rotate about +Z through the origin."""

    flip_x: bool = False
    scale: float = 1.0
    rotation: float = 0.0

    def validate(self) -> None:
        lo, hi = SCALE_RANGE
        if not lo <= self.scale <= hi:
            raise ValidationError(f"scale {self.scale} outside [{lo}, {hi}]")
        lo, hi = ROTATION_RANGE
        if not lo <= self.rotation <= hi:
            raise ValidationError(f"rotation {self.rotation} outside [{lo:.4f}, {hi:.4f}]")

    @classmethod
    def sample(cls, rng: np.random.Generator) -> GlobalAugmentation:
        return cls(
            flip_x=bool(rng.integers(2)),
            scale=float(rng.uniform(*SCALE_RANGE)),
            rotation=float(rng.uniform(*ROTATION_RANGE)),
        )


def _rotate_xy(xy: np.ndarray, theta: float, center: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    offset = np.asarray(center)
    return (xy - offset) @ rot.T + offset


def _transform_box(box: Box3D, ops: GlobalAugmentation) -> Box3D:
    cx, cy, yaw = box.cx, box.cy, box.yaw
    if ops.flip_x:
        cy, yaw = -cy, -yaw
    cx, cy = _rotate_xy(np.array([[cx * ops.scale, cy * ops.scale]]), ops.rotation)[0]
    return replace(
        box,
        cx=float(cx),
        cy=float(cy),
        cz=box.cz * ops.scale,
        l=box.l * ops.scale,
        w=box.w * ops.scale,
        h=box.h * ops.scale,
        yaw=yaw + ops.rotation,
    )


def global_augment(
    scene: SceneSample, ops: GlobalAugmentation | None = None, seed: int | None = None
) -> SceneSample:
    """Apply one similarity transform to points and boxes; draws ``ops`` from ``seed`` if omitted."""
    if ops is None:
        if seed is None:
            raise ValidationError("global_augment needs explicit ops or a seed")
        ops = GlobalAugmentation.sample(make_rng(seed))
    ops.validate()
    xyz = scene.points.xyz.astype(np.float64, copy=True)
    if ops.flip_x:
        xyz[:, 1] = -xyz[:, 1]
    xyz *= ops.scale
    xyz[:, :2] = _rotate_xy(xyz[:, :2], ops.rotation)
    points = PointCloud(xyz.astype(scene.points.xyz.dtype), scene.points.features)
    return replace(scene, points=points, boxes=[_transform_box(b, ops) for b in scene.boxes])


def instance_rotation(scene: SceneSample, box_index: int, delta: float) -> SceneSample:
    """Rotate the points inside one box about its centre and turn the box with them."""
    if not 0 <= box_index < len(scene.boxes):
        raise BoundsError(f"box index {box_index} out of range for {len(scene.boxes)} boxes")
    box = scene.boxes[box_index]
    inside = box.contains(scene.points.xyz)
    xyz = scene.points.xyz.copy()
    rotated = _rotate_xy(xyz[inside, :2].astype(np.float64), delta, (box.cx, box.cy))
    xyz[inside, :2] = rotated.astype(xyz.dtype)
    boxes = list(scene.boxes)
    boxes[box_index] = replace(box, yaw=box.yaw + delta)
    return replace(scene, points=PointCloud(xyz, scene.points.features), boxes=boxes)
