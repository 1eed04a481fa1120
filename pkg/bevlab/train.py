"""Instance-level contrastive distillation of the toy student, and the pooling-size ablation."""

from __future__ import annotations

import asyncio
import copy
import logging
import math
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .errors import InsufficientNegativesError, NonFiniteError
from .geometry import lift_splat, valid_anchors
from .icd import IcdResult, InstanceScene, icd_batch
from .models import AnchorBev, BevGridSpec, RunReport, SceneSample, Temperature
from .synth import ToyEncoder, generate_scene, generate_scenes, teacher_encode
from .tensor import RNG_ALGORITHM, linear

logger = logging.getLogger(__name__)

HOLDOUT_OFFSET = 1_000_000
OPTIMIZER = "gd+momentum"


@dataclass
class DistillScene:
    """A scene reduced to what training needs: the frozen teacher map and the lifted image.

    Lifting is linear in the channel axis, so the student map for weights W is
    ``lifted @ W``.
    """

    teacher_bev: np.ndarray  # [H_b, W_b, C]
    lifted: np.ndarray  # [H_b, W_b, C_in]
    anchors: list[AnchorBev]

    def student_bev(self, weights: np.ndarray) -> np.ndarray:
        return linear(self.lifted, weights.astype(self.lifted.dtype, copy=False))


def prepare_scene(scene: SceneSample, teacher: ToyEncoder, grid: BevGridSpec) -> DistillScene:
    return DistillScene(
        teacher_bev=teacher_encode(scene, teacher, grid),
        lifted=lift_splat(scene.image_features, scene.depth, scene.camera, grid),
        anchors=valid_anchors(scene.boxes, grid),
    )


def take_instances(
    scenes: list[DistillScene], start: int, size: int
) -> tuple[list[tuple[DistillScene, list[AnchorBev]]], int]:
    """Up to ``size`` instances from consecutive scenes (cycling); returns the batch and next cursor."""
    batch, taken, cursor = [], 0, start
    for _ in range(len(scenes)):
        if taken >= size:
            break
        scene = scenes[cursor % len(scenes)]
        cursor += 1
        if scene.anchors:
            chosen = scene.anchors[: size - taken]
            batch.append((scene, chosen))
            taken += len(chosen)
    if taken < 2:
        raise InsufficientNegativesError(f"only {taken} instances available for a batch")
    return batch, cursor % len(scenes)


@dataclass
class OptimizerState:
    temp: Temperature
    velocity: np.ndarray
    rho_velocity: float = 0.0


class Distiller:
    """Gradient descent with momentum on the student projection and the temperature.

    The learning rate follows ``cfg.train.lr_schedule`` over ``cfg.train.steps``;
    the temperature stays at its initial value for ``tau_warmup_steps`` updates.
    """

    def __init__(self, cfg: RunConfig, student: ToyEncoder):
        self.cfg = cfg
        self.student = student
        self.state = OptimizerState(
            temp=Temperature.from_tau(cfg.icd.tau_init),
            velocity=np.zeros(student.weights.shape, dtype=np.float64),
        )
        self.steps_taken = 0

    def learning_rate(self, step: int) -> float:
        train = self.cfg.train
        if train.lr_schedule == "constant" or train.steps <= 0:
            return train.learning_rate
        progress = min(step / train.steps, 1.0)
        return train.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))

    def forward(self, batch: list[tuple[DistillScene, list[AnchorBev]]]) -> IcdResult:
        weights = self.student.weights
        scenes = [InstanceScene(s.teacher_bev, s.student_bev(weights), anchors) for s, anchors in batch]
        return icd_batch(scenes, self.cfg.icd.pool_size, self.state.temp, self.cfg.icd.include_positive)

    def step(self, batch: list[tuple[DistillScene, list[AnchorBev]]]) -> IcdResult:
        result = self.forward(batch)
        if not math.isfinite(result.loss):
            raise NonFiniteError(
                f"distillation diverged: loss {result.loss} at tau {self.state.temp.tau}"
            )
        grad_w = np.zeros(self.student.weights.shape, dtype=np.float64)
        for (scene, _), grad_bev in zip(batch, result.grad_student, strict=True):
            lifted = scene.lifted.reshape(-1, scene.lifted.shape[2]).astype(np.float64)
            grad_w += lifted.T @ grad_bev.reshape(-1, grad_bev.shape[2]).astype(np.float64)
        train = self.cfg.train
        warming_up = self.steps_taken < train.tau_warmup_steps
        grad_rho = 0.0 if warming_up else result.grad_rho
        norm = math.sqrt(float(np.sum(grad_w * grad_w)) + grad_rho * grad_rho)
        if norm > train.grad_clip:
            grad_w *= train.grad_clip / norm
            grad_rho *= train.grad_clip / norm

        state = self.state
        state.velocity = train.momentum * state.velocity + grad_w
        state.rho_velocity = train.momentum * state.rho_velocity + grad_rho
        lr = self.learning_rate(self.steps_taken)
        self.student.weights -= (lr * state.velocity).astype(self.student.weights.dtype)
        state.temp = Temperature(rho=state.temp.rho - lr * train.tau_lr_scale * state.rho_velocity)
        self.steps_taken += 1
        return result


def distill(
    cfg: RunConfig,
    train_scenes: list[DistillScene],
    eval_scenes: list[DistillScene],
    student: ToyEncoder,
) -> RunReport:
    """Train for ``cfg.train.steps`` steps, recording held-out metrics before every update."""
    distiller = Distiller(cfg, student)
    eval_batch, _ = take_instances(eval_scenes, 0, cfg.train.batch_instances)
    rows = []
    cursor = 0
    for step in range(cfg.train.steps):
        held_out = distiller.forward(eval_batch)
        rows.append(
            {
                "step": step,
                "loss": held_out.loss,
                "tau": distiller.state.temp.tau,
                "mean_pos_sim": held_out.mean_positive_similarity,
                "retrieval_acc": held_out.retrieval_accuracy,
            }
        )
        batch, cursor = take_instances(train_scenes, cursor, cfg.train.batch_instances)
        trained = distiller.step(batch)
        if step % cfg.train.log_every == 0:
            logger.info(
                "step %d: train loss %.4f, held-out sim %.4f acc %.3f, tau %.4f",
                step,
                trained.loss,
                held_out.mean_positive_similarity,
                held_out.retrieval_accuracy,
                distiller.state.temp.tau,
            )

    final_result = distiller.forward(eval_batch)
    channels = eval_scenes[0].teacher_bev.shape[2]
    final = {
        "steps": cfg.train.steps,
        "pool_size": cfg.icd.pool_size,
        "embedding_dim": cfg.icd.pool_size**2 * channels,
        "eval_instances": final_result.similarity.shape[0],
        "loss": final_result.loss,
        "tau": distiller.state.temp.tau,
        "mean_pos_sim": final_result.mean_positive_similarity,
        "retrieval_acc": final_result.retrieval_accuracy,
    }
    return RunReport(command="distill", rows=rows, final=final, environment=environment_stamp(cfg))


def environment_stamp(cfg: RunConfig) -> dict:
    return {
        "dtype": "float32",
        "threads": cfg.threads,
        "seed": cfg.seed,
        "rng": RNG_ALGORITHM,
        "optimizer": f"{OPTIMIZER} {cfg.train.momentum}",
    }


async def build_pools(
    cfg: RunConfig, teacher: ToyEncoder, scenes: list[SceneSample] | None = None
) -> tuple[list[DistillScene], list[DistillScene]]:
    """Training pool (generated scenes ``0..train_scenes-1`` unless given) and a held-out pool.

    Held-out scenes come from a disjoint index range and hold at least one full batch.
    """
    grid = cfg.synth.grid
    train = scenes
    if train is None:
        train = await generate_scenes(cfg.synth, range(cfg.train.train_scenes), cfg.seed, cfg.threads)
    held_out: list[SceneSample] = []
    count, chunk = 0, max(cfg.train.batch_instances // max(cfg.synth.min_objects, 1), 1)
    while count < cfg.train.batch_instances:
        start = HOLDOUT_OFFSET + len(held_out)
        more = await generate_scenes(cfg.synth, range(start, start + chunk), cfg.seed, cfg.threads)
        held_out.extend(more)
        count += sum(len(valid_anchors(s.boxes, grid)) for s in more)
        if len(held_out) > 100 * cfg.train.batch_instances:
            raise InsufficientNegativesError("held-out scenes contain too few instances")
    return (
        [prepare_scene(s, teacher, grid) for s in train],
        [prepare_scene(s, teacher, grid) for s in held_out],
    )


def run_distill(cfg: RunConfig, scenes: list[SceneSample] | None = None) -> RunReport:
    """Build the scene pools, distill, and confirm the teacher maps did not move."""
    grid = cfg.synth.grid
    teacher = ToyEncoder.teacher(cfg.synth, cfg.seed)
    student = ToyEncoder.student(cfg.synth, cfg.seed)
    train, held_out = asyncio.run(build_pools(cfg, teacher, scenes))
    report = distill(cfg, train, held_out, student)
    first = scenes[0] if scenes else generate_scene(cfg.synth, 0, cfg.seed)
    report.final["teacher_frozen"] = bool(
        np.array_equal(teacher_encode(first, teacher, grid), train[0].teacher_bev)
    )
    return report


def run_ablate_pool(cfg: RunConfig, scenes: list[SceneSample] | None = None) -> RunReport:
    """One distillation per pool size over the same scenes and initial weights."""
    teacher = ToyEncoder.teacher(cfg.synth, cfg.seed)
    train, held_out = asyncio.run(build_pools(cfg, teacher, scenes))
    rows = []
    for pool_size in cfg.train.ablate_pool_sizes:
        run_cfg = copy.deepcopy(cfg)
        run_cfg.icd.pool_size = pool_size
        logger.info("Pooling ablation: S=%d", pool_size)
        report = distill(run_cfg, train, held_out, ToyEncoder.student(cfg.synth, cfg.seed))
        final = report.final
        if not math.isfinite(final["loss"]):
            raise NonFiniteError(f"S={pool_size} finished with loss {final['loss']}")
        rows.append(
            {
                "pool_size": pool_size,
                "embedding_dim": final["embedding_dim"],
                "loss": final["loss"],
                "tau": final["tau"],
                "mean_pos_sim": final["mean_pos_sim"],
                "retrieval_acc": final["retrieval_acc"],
            }
        )
    return RunReport(command="ablate-pool", rows=rows, environment=environment_stamp(cfg))
