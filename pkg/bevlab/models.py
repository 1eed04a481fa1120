"""Data models shared across the lab: grids, boxes, anchors, scenes and reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DimensionError,
    InsufficientNegativesError,
    TensorFormatError,
    ValidationError,
)

Tensor = np.ndarray

# Snap tolerance (in cell units) applied before flooring world coordinates, so a
# corner sitting exactly on a cell edge is not pushed across it by rounding.
CELL_SNAP = 1e-9


def wrap_angle(theta: float) -> float:
    """Wrap an angle in radians to (-pi, pi]."""
    wrapped = math.remainder(theta, math.tau)
    return math.pi if wrapped <= -math.pi else wrapped


@dataclass(frozen=True)
class BevGridSpec:
    """Metric extent and resolution of a BEV feature map.

    Cell (u, v) covers x in [origin_x + u*cell, origin_x + (u+1)*cell) and
    y in [origin_y + v*cell, ...). Feature maps are stored as [v, u, channel],
    i.e. ``height`` cells along y and ``width`` cells along x.
    """

    origin_x: float = 0.0
    origin_y: float = -16.0
    cell_size: float = 1.0
    height: int = 32
    width: int = 32
    channels: int = 8

    def __post_init__(self) -> None:
        if self.cell_size <= 0:
            raise ValidationError(f"cell_size must be positive, got {self.cell_size}")
        if min(self.height, self.width, self.channels) < 1:
            raise ValidationError(
                f"grid extents must be >= 1, got {self.height}x{self.width}x{self.channels}"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    @property
    def num_cells(self) -> int:
        return self.height * self.width

    @property
    def x_max(self) -> float:
        return self.origin_x + self.width * self.cell_size

    @property
    def y_max(self) -> float:
        return self.origin_y + self.height * self.cell_size

    def cell_indices(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map world coordinates to integer (u, v) cell indices (may fall outside the grid)."""
        u = np.floor((np.asarray(x, dtype=np.float64) - self.origin_x) / self.cell_size + CELL_SNAP)
        v = np.floor((np.asarray(y, dtype=np.float64) - self.origin_y) / self.cell_size + CELL_SNAP)
        return u.astype(np.int64), v.astype(np.int64)

    def in_grid(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)

    def with_channels(self, channels: int) -> BevGridSpec:
        return replace(self, channels=channels)


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D ground-truth box; yaw is about +Z, length runs along the heading."""

    cx: float
    cy: float
    cz: float
    l: float  # noqa: E741
    w: float
    h: float
    yaw: float = 0.0
    class_id: int = 0

    def __post_init__(self) -> None:
        if min(self.l, self.w, self.h) <= 0:
            raise ValidationError(f"box dimensions must be positive, got {self.l}x{self.w}x{self.h}")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz], dtype=np.float64)

    def footprint_corners(self) -> np.ndarray:
        """The four yaw-rotated footprint corners as a 4x2 array of world (x, y)."""
        half = np.array(
            [[1.0, 1.0], [1.0, -1.0], [-1.0, -1.0], [-1.0, 1.0]]
        ) * np.array([self.l / 2.0, self.w / 2.0])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return half @ rot.T + np.array([self.cx, self.cy])

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        """Boolean mask of points (N x 3) inside the oriented box, boundary inclusive."""
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        dx = xyz[:, 0] - self.cx
        dy = xyz[:, 1] - self.cy
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local_x = c * dx + s * dy
        local_y = -s * dx + c * dy
        return (
            (np.abs(local_x) <= self.l / 2.0)
            & (np.abs(local_y) <= self.w / 2.0)
            & (np.abs(xyz[:, 2] - self.cz) <= self.h / 2.0)
        )

    def to_line(self) -> str:
        return (
            f"{self.cx!r} {self.cy!r} {self.cz!r} {self.l!r} {self.w!r} {self.h!r} "
            f"{self.yaw!r} {self.class_id}"
        )

    @classmethod
    def from_line(cls, line: str) -> Box3D:
        """Parse ``cx cy cz l w h yaw class_id``."""
        parts = line.split()
        if len(parts) != 8:
            raise TensorFormatError(f"box line needs 8 fields, got {len(parts)}: {line!r}")
        try:
            values = [float(p) for p in parts[:7]]
            class_id = int(parts[7])
        except ValueError as e:
            raise TensorFormatError(f"unparseable box line {line!r}: {e}") from e
        return cls(*values, class_id=class_id)


@dataclass(frozen=True)
class AnchorBev:
    """Axis-aligned, inclusive cell rectangle covering a box footprint."""

    min_u: int
    min_v: int
    max_u: int
    max_v: int

    @property
    def width(self) -> int:
        return self.max_u - self.min_u + 1

    @property
    def height(self) -> int:
        return self.max_v - self.min_v + 1

    def overlaps(self, other: AnchorBev) -> bool:
        return not (
            self.max_u < other.min_u
            or other.max_u < self.min_u
            or self.max_v < other.min_v
            or other.max_v < self.min_v
        )


@dataclass(frozen=True)
class PinholeCamera:
    """Single-row pinhole camera in the ground plane.

    Column ``u`` (pixel centre ``u + 0.5``) looks along the ray with forward
    depth ``d`` and lateral offset ``-d * (u + 0.5 - cx) / fx`` (left positive),
    rotated by ``heading`` and translated to ``(x, y)``.
    """

    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    fx: float = 64.0
    cx: float = 64.0
    width: int = 128

    def ray_points(self, depths: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World (x, y) for every (column, depth) pair, each of shape [width, len(depths)]."""
        depths = np.asarray(depths, dtype=np.float64)
        columns = np.arange(self.width, dtype=np.float64) + 0.5
        forward = np.broadcast_to(depths[None, :], (self.width, depths.size))
        lateral = -forward * ((columns[:, None] - self.cx) / self.fx)
        c, s = math.cos(self.heading), math.sin(self.heading)
        return self.x + c * forward - s * lateral, self.y + s * forward + c * lateral

    def column_of(self, x: float, y: float) -> float:
        """Fractional column at which a world point projects (forward depth must be > 0)."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        dx, dy = x - self.x, y - self.y
        forward = c * dx + s * dy
        lateral = -s * dx + c * dy
        return self.cx - self.fx * lateral / forward

    def forward_depth(self, x: float, y: float) -> float:
        c, s = math.cos(self.heading), math.sin(self.heading)
        return c * (x - self.x) + s * (y - self.y)


@dataclass
class DepthDistribution:
    """Per-pixel categorical distribution over ``D`` depth bins."""

    probs: Tensor  # [H, W, D]
    bin_edges: Tensor  # [D + 1], metres, increasing

    def __post_init__(self) -> None:
        if self.probs.ndim != 3:
            raise DimensionError(f"depth probs must be HxWxD, got shape {self.probs.shape}")
        if self.bin_edges.shape != (self.probs.shape[2] + 1,):
            raise DimensionError(
                f"need {self.probs.shape[2] + 1} bin edges, got {self.bin_edges.shape}"
            )

    @property
    def num_bins(self) -> int:
        return self.probs.shape[2]

    @property
    def bin_centers(self) -> np.ndarray:
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        return 0.5 * (edges[:-1] + edges[1:])

    def validate(self, tol: float = 1e-5) -> None:
        if np.any(self.probs < 0):
            raise ValidationError("depth distribution has negative probabilities")
        sums = self.probs.sum(axis=2, dtype=np.float64)
        worst = float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0
        if worst > tol:
            raise ValidationError(f"depth rows must sum to 1 (max deviation {worst:.3g})")


@dataclass
class PointCloud:
    """Points with per-point feature vectors."""

    xyz: Tensor  # [N, 3]
    features: Tensor  # [N, C]

    def __post_init__(self) -> None:
        if self.xyz.ndim != 2 or self.xyz.shape[1] != 3:
            raise DimensionError(f"xyz must be Nx3, got {self.xyz.shape}")
        if self.features.ndim != 2 or self.features.shape[0] != self.xyz.shape[0]:
            raise DimensionError(
                f"features {self.features.shape} do not match {self.xyz.shape[0]} points"
            )

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @classmethod
    def empty(cls, channels: int, dtype=np.float32) -> PointCloud:
        return cls(np.zeros((0, 3), dtype=np.float64), np.zeros((0, channels), dtype=dtype))

    def concat(self, other: PointCloud) -> PointCloud:
        if other.channels != self.channels:
            raise DimensionError(f"cannot join {self.channels}- and {other.channels}-channel clouds")
        return PointCloud(
            np.concatenate([self.xyz, other.xyz]),
            np.concatenate([self.features, other.features.astype(self.features.dtype)]),
        )


@dataclass
class InstancePairBatch:
    """Index-aligned teacher (``a``) and student (``b``) instance embeddings."""

    a: Tensor  # [N, E]
    b: Tensor  # [N, E]

    def __post_init__(self) -> None:
        if self.a.ndim != 2 or self.a.shape != self.b.shape:
            raise DimensionError(f"embeddings must share an NxE shape, got {self.a.shape} and {self.b.shape}")
        if self.a.shape[0] < 2:
            raise InsufficientNegativesError(
                f"contrastive distillation needs at least 2 instances, got {self.a.shape[0]}"
            )

    @property
    def size(self) -> int:
        return self.a.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.a.shape[1]


@dataclass
class Temperature:
    """Learnable temperature, tau = exp(rho) clamped to [MIN_TAU, MAX_TAU]."""

    rho: float = 0.0

    MIN_TAU = 0.01
    MAX_TAU = 100.0

    @classmethod
    def from_tau(cls, tau: float) -> Temperature:
        if tau <= 0:
            raise ValidationError(f"temperature must be positive, got {tau}")
        return cls(rho=math.log(tau))

    @property
    def tau(self) -> float:
        return min(max(math.exp(self.rho), self.MIN_TAU), self.MAX_TAU)

    @property
    def dtau_drho(self) -> float:
        """Derivative of the clamped tau; zero while the clamp is active."""
        raw = math.exp(self.rho)
        return raw if self.MIN_TAU < raw < self.MAX_TAU else 0.0


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.gamma < 0:
            raise ValidationError(f"gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class BoxResiduals:
    """Prediction-minus-target box offsets; sizes are raw metre differences."""

    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    dh: float = 0.0
    dw: float = 0.0
    dl: float = 0.0
    dtheta: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.dx, self.dy, self.dz, self.dh, self.dw, self.dl, self.dtheta], dtype=np.float64
        )

    @classmethod
    def from_array(cls, values: np.ndarray) -> BoxResiduals:
        return cls(*(float(v) for v in np.asarray(values).reshape(7)))


@dataclass
class DepthPatch:
    """A 2D instance patch pasted onto the image canvas at a single representative depth."""

    top: int
    left: int
    pixels: Tensor  # [h, w, C]
    depth: float
    instance_id: int

    @property
    def bottom(self) -> int:
        return self.top + self.pixels.shape[0]

    @property
    def right(self) -> int:
        return self.left + self.pixels.shape[1]

    def clipped(self, height: int, width: int) -> DepthPatch | None:
        """Restrict the patch to a ``height x width`` canvas; None if nothing remains."""
        top, left = max(self.top, 0), max(self.left, 0)
        bottom, right = min(self.bottom, height), min(self.right, width)
        if top >= bottom or left >= right:
            return None
        pixels = self.pixels[top - self.top : bottom - self.top, left - self.left : right - self.left]
        return replace(self, top=top, left=left, pixels=pixels)


@dataclass
class BankInstance:
    """One ground-truth object available for GT sampling."""

    points: PointCloud
    box: Box3D
    patch: DepthPatch


@dataclass
class SceneSample:
    """A multimodal training scene: points, image strip, depth distribution and boxes."""

    points: PointCloud
    image_features: Tensor  # [H, W, C_img]
    depth: DepthDistribution
    boxes: list[Box3D]
    camera: PinholeCamera = field(default_factory=PinholeCamera)
    patches: list[DepthPatch] = field(default_factory=list)

    @property
    def num_objects(self) -> int:
        return len(self.boxes)


@dataclass
class RunReport:
    """Metrics emitted by a harness command."""

    command: str
    rows: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)
    format_version: int = 1

    def non_finite_fields(self) -> list[str]:
        bad = []
        for i, row in enumerate(self.rows):
            bad.extend(f"rows[{i}].{k}" for k, v in row.items() if _is_bad_number(v))
        bad.extend(f"final.{k}" for k, v in self.final.items() if _is_bad_number(v))
        return bad

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "format_version": self.format_version,
            "environment": self.environment,
            "rows": self.rows,
            "final": self.final,
        }


def _is_bad_number(value: object) -> bool:
    return isinstance(value, float | np.floating) and not math.isfinite(float(value))
