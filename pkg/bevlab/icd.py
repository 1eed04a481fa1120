"""Instance-level contrastive distillation between teacher and student BEV maps.

Boxes become BEV anchors, anchors crop both maps, crops are pooled to a fixed
S x S grid and flattened, and a temperature-scaled contrastive loss pulls
matching teacher/student instances together. The teacher side never receives
gradient.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    DegenerateEmbeddingError,
    DimensionError,
    EmptyInstanceError,
    InsufficientNegativesError,
)
from .geometry import crop_instance, valid_anchors
from .models import AnchorBev, BevGridSpec, Box3D, InstancePairBatch, Temperature
from .tensor import adaptive_avg_pool, adaptive_avg_pool_backward, logsumexp

logger = logging.getLogger(__name__)

MIN_NORM = 1e-12


def _unit_rows(x: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms < MIN_NORM):
        rows = np.flatnonzero(norms < MIN_NORM).tolist()
        raise DegenerateEmbeddingError(f"{name} rows {rows} have zero norm")
    return x / norms[:, None], norms


def cosine_similarity_matrix(batch: InstancePairBatch) -> np.ndarray:
    """M[i, j] = cos(a_i, b_j)."""
    a_hat, _ = _unit_rows(np.asarray(batch.a, dtype=np.float64), "teacher")
    b_hat, _ = _unit_rows(np.asarray(batch.b, dtype=np.float64), "student")
    return a_hat @ b_hat.T


def _denominator_mask(n: int, include_positive: bool) -> np.ndarray:
    return np.ones((n, n), dtype=bool) if include_positive else ~np.eye(n, dtype=bool)


def _loss_and_logit_grad(
    similarity: np.ndarray, tau: float, include_positive: bool
) -> tuple[float, np.ndarray]:
    n = similarity.shape[0]
    if similarity.ndim != 2 or similarity.shape[1] != n:
        raise DimensionError(f"similarity matrix must be square, got {similarity.shape}")
    if n < 2:
        raise InsufficientNegativesError(f"contrastive loss needs at least 2 instances, got {n}")
    logits = similarity / tau
    mask = _denominator_mask(n, include_positive)
    lse = logsumexp(logits, axis=1, where=mask)
    loss = -float(np.sum(np.diag(logits) - lse))
    probs = np.where(mask, np.exp(logits - lse[:, None]), 0.0)
    return loss, probs - np.eye(n)


def icd_loss(similarity: np.ndarray, temp: Temperature, include_positive: bool = False) -> float:
    """Contrastive loss over a teacher x student similarity matrix.

    With ``include_positive`` off the denominator sums over j != i only, so the
    loss can go negative; with it on this is standard NT-Xent.
    """
    loss, _ = _loss_and_logit_grad(np.asarray(similarity, dtype=np.float64), temp.tau, include_positive)
    return loss


class IcdGradients(NamedTuple):
    grad_a: np.ndarray
    grad_b: np.ndarray
    grad_rho: float


def _unit_backward(grad_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    radial = np.sum(grad_unit * unit, axis=1, keepdims=True)
    return (grad_unit - unit * radial) / norms[:, None]


def icd_loss_grad(
    batch: InstancePairBatch, temp: Temperature, include_positive: bool = False
) -> IcdGradients:
    """Analytical gradients of ``icd_loss(cosine_similarity_matrix(batch))``."""
    a_hat, a_norm = _unit_rows(np.asarray(batch.a, dtype=np.float64), "teacher")
    b_hat, b_norm = _unit_rows(np.asarray(batch.b, dtype=np.float64), "student")
    similarity = a_hat @ b_hat.T
    tau = temp.tau
    _, grad_logits = _loss_and_logit_grad(similarity, tau, include_positive)
    grad_sim = grad_logits / tau
    grad_tau = -float(np.sum(grad_logits * similarity)) / tau**2
    return IcdGradients(
        grad_a=_unit_backward(grad_sim @ b_hat, a_hat, a_norm).astype(batch.a.dtype),
        grad_b=_unit_backward(grad_sim.T @ a_hat, b_hat, b_norm).astype(batch.b.dtype),
        grad_rho=grad_tau * temp.dtau_drho,
    )


def instance_embeddings(bev: np.ndarray, anchors: Sequence[AnchorBev], pool_size: int) -> np.ndarray:
    """Crop, pool to ``pool_size`` x ``pool_size`` and flatten each anchor: [N, S*S*C]."""
    embeddings = [adaptive_avg_pool(crop_instance(bev, a), pool_size).ravel() for a in anchors]
    if not embeddings:
        return np.zeros((0, pool_size * pool_size * bev.shape[2]), dtype=bev.dtype)
    return np.stack(embeddings)


def embeddings_backward(
    grad: np.ndarray, anchors: Sequence[AnchorBev], pool_size: int, bev_shape: tuple[int, ...]
) -> np.ndarray:
    """Scatter embedding gradients back onto the BEV map they were cropped from."""
    channels = bev_shape[2]
    grad_bev = np.zeros(bev_shape, dtype=grad.dtype)
    for row, anchor in zip(grad, anchors, strict=True):
        window = (anchor.height, anchor.width, channels)
        grad_bev[anchor.min_v : anchor.max_v + 1, anchor.min_u : anchor.max_u + 1] += (
            adaptive_avg_pool_backward(row.reshape(pool_size, pool_size, channels), window)
        )
    return grad_bev


def mean_positive_similarity(similarity: np.ndarray) -> float:
    return float(np.mean(np.diag(similarity)))


def retrieval_accuracy(similarity: np.ndarray) -> float:
    """Fraction of teacher rows whose most similar student is their own positive."""
    return float(np.mean(np.argmax(similarity, axis=1) == np.arange(similarity.shape[0])))


@dataclass
class InstanceScene:
    """One scene's contribution to a contrastive batch."""

    teacher_bev: np.ndarray
    student_bev: np.ndarray
    anchors: list[AnchorBev]


@dataclass
class IcdResult:
    loss: float
    grad_student: list[np.ndarray]  # one BEV-shaped gradient per scene
    grad_rho: float
    similarity: np.ndarray

    @property
    def mean_positive_similarity(self) -> float:
        return mean_positive_similarity(self.similarity)

    @property
    def retrieval_accuracy(self) -> float:
        return retrieval_accuracy(self.similarity)


def icd_batch(
    scenes: Sequence[InstanceScene],
    pool_size: int,
    temp: Temperature,
    include_positive: bool = False,
) -> IcdResult:
    """Contrastive loss over the instances of several scenes concatenated into one batch."""
    teacher_rows, student_rows = [], []
    for scene in scenes:
        if scene.teacher_bev.shape != scene.student_bev.shape:
            raise DimensionError(
                f"teacher {scene.teacher_bev.shape} and student {scene.student_bev.shape} BEV differ"
            )
        teacher_rows.append(instance_embeddings(scene.teacher_bev, scene.anchors, pool_size))
        student_rows.append(instance_embeddings(scene.student_bev, scene.anchors, pool_size))
    total = sum(len(s.anchors) for s in scenes)
    if total == 0:
        raise EmptyInstanceError("no box produced a valid anchor")
    batch = InstancePairBatch(np.concatenate(teacher_rows), np.concatenate(student_rows))
    similarity = cosine_similarity_matrix(batch)
    loss = icd_loss(similarity, temp, include_positive)
    grads = icd_loss_grad(batch, temp, include_positive)

    grad_student = []
    offset = 0
    for scene in scenes:
        count = len(scene.anchors)
        grad_student.append(
            embeddings_backward(
                grads.grad_b[offset : offset + count],
                scene.anchors,
                pool_size,
                scene.student_bev.shape,
            )
        )
        offset += count
    logger.debug("ICD batch: %d instances from %d scenes, loss %.6f", total, len(scenes), loss)
    return IcdResult(loss=loss, grad_student=grad_student, grad_rho=grads.grad_rho, similarity=similarity)


def icd_pipeline(
    teacher_bev: np.ndarray,
    student_bev: np.ndarray,
    boxes: list[Box3D],
    grid: BevGridSpec,
    pool_size: int,
    temp: Temperature,
    include_positive: bool = False,
) -> IcdResult:
    """Boxes -> anchors -> crops -> pooled embeddings -> contrastive loss for one scene."""
    if teacher_bev.shape != student_bev.shape or teacher_bev.shape != grid.shape:
        raise DimensionError(
            f"teacher {teacher_bev.shape}, student {student_bev.shape} and grid {grid.shape} must agree"
        )
    anchors = valid_anchors(boxes, grid)
    return icd_batch([InstanceScene(teacher_bev, student_bev, anchors)], pool_size, temp, include_positive)
