"""Command-line entry point: gen, distill, fuse, bench, gradcheck and ablate-pool."""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from pathlib import Path

from .augment import extract_bank
from .bench import bench_report, clfm_bench, fusion_scheme_timing
from .config import RunConfig, load_config
from .errors import BevlabError, DimensionError
from .fusion import ClfmFusion, ClfmParams, make_fusion
from .gradcheck import assert_all_passed, run_gradcheck
from .icd import icd_pipeline
from .models import RunReport, SceneSample, Temperature
from .storage import (
    load_boxes,
    load_bundle,
    load_scene,
    load_tensor,
    read_manifest,
    save_bank,
    save_bundle,
    save_report,
    save_scene,
    save_tensor,
    write_manifest,
)
from .synth import ToyEncoder, generate_scenes, lidar_encode, student_encode
from .train import environment_stamp, run_ablate_pool, run_distill

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"


def configure_logging(level: str) -> None:
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, datefmt=LOG_DATEFMT, force=True)


def _finish(cfg: RunConfig, report: RunReport, directory: Path, stem: str) -> Path:
    path = save_report(report, directory, stem, json_mirror=cfg.json)
    cfg.write_resolved(directory)
    return path


# ── Subcommands ───────────────────────────────────────────────────────


def cmd_gen(cfg: RunConfig, args: argparse.Namespace) -> int:
    """Write ``count`` scenes, their LiDAR/image BEV maps and an instance bank."""
    count = args.count
    scenes = asyncio.run(generate_scenes(cfg.synth, range(count), cfg.seed, cfg.threads))
    grid = cfg.synth.grid
    teacher = ToyEncoder.teacher(cfg.synth, cfg.seed)
    student = ToyEncoder.student(cfg.synth, cfg.seed)
    out = cfg.out_dir
    index, rows, bank = {}, [], []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:04d}"
        save_scene(out / "scenes" / name, scene)
        save_tensor(out / "scenes" / name / "lidar_bev.bflt", lidar_encode(scene, teacher, grid))
        save_tensor(out / "scenes" / name / "image_bev.bflt", student_encode(scene, student, grid))
        index[name] = f"scenes/{name}"
        bank.extend(extract_bank(scene))
        rows.append({"scene": name, "objects": scene.num_objects, "points": len(scene.points)})
    write_manifest(out / "manifest.txt", index)
    save_bank(out / "bank", bank)
    logger.info("Wrote %d scenes and %d bank instances to %s", count, len(bank), out)
    report = RunReport(
        command="gen",
        rows=rows,
        final={"scenes": count, "bank_instances": len(bank)},
        environment=environment_stamp(cfg),
    )
    _finish(cfg, report, out, "gen")
    return 0


def _load_scene_dir(directory: Path) -> list[SceneSample]:
    return [load_scene(directory / rel) for rel in read_manifest(directory / "manifest.txt").values()]


def cmd_distill(cfg: RunConfig, args: argparse.Namespace) -> int:
    """Train the toy student, or score a given teacher/student BEV pair against a box file."""
    if args.teacher_bev or args.student_bev:
        if not (args.teacher_bev and args.student_bev and args.boxes):
            raise DimensionError("--teacher-bev, --student-bev and --boxes must be given together")
        teacher_bev, student_bev = load_tensor(args.teacher_bev), load_tensor(args.student_bev)
        temp = Temperature.from_tau(cfg.icd.tau_init)
        result = icd_pipeline(
            teacher_bev,
            student_bev,
            load_boxes(args.boxes),
            cfg.synth.grid.with_channels(teacher_bev.shape[2]),
            cfg.icd.pool_size,
            temp,
            cfg.icd.include_positive,
        )
        row = {
            "step": 0,
            "loss": result.loss,
            "tau": temp.tau,
            "mean_pos_sim": result.mean_positive_similarity,
            "retrieval_acc": result.retrieval_accuracy,
        }
        report = RunReport(command="distill", rows=[row], final=dict(row), environment=environment_stamp(cfg))
    else:
        scenes = _load_scene_dir(args.scenes) if args.scenes else None
        report = run_distill(cfg, scenes)
        if not report.final.get("teacher_frozen", True):
            raise BevlabError("teacher BEV maps changed during distillation")
    _finish(cfg, report, cfg.out_dir, "distill")
    logger.info(
        "Final held-out similarity %.4f, retrieval accuracy %.3f",
        report.final["mean_pos_sim"],
        report.final["retrieval_acc"],
    )
    return 0


def cmd_fuse(cfg: RunConfig, args: argparse.Namespace) -> int:
    """Fuse a LiDAR and an image BEV tensor file."""
    lidar, image = load_tensor(args.lidar), load_tensor(args.image)
    if lidar.shape != image.shape:
        raise DimensionError(f"lidar {lidar.shape} and image {image.shape} BEV maps differ")
    if lidar.ndim != 3:
        raise DimensionError(f"BEV maps must be H x W x C, got {lidar.shape}")
    channels = lidar.shape[2]
    if args.scheme == "clfm":
        if args.params:
            params = ClfmParams.from_bundle(*load_bundle(args.params))
        else:
            c = cfg.clfm
            params = ClfmParams.init(
                channels,
                c.heads,
                cfg.seed,
                depthwise=c.depthwise,
                dtype=lidar.dtype,
                epsilon=c.epsilon,
                feature_map=c.feature_map,
                scale=c.scale,
                rope=c.rope,
            )
            save_bundle(cfg.out_dir / "params", params.named_weights(), params.meta())
        fusion = ClfmFusion(params, oracle=args.oracle)
    else:
        fusion = make_fusion(args.scheme, channels, heads=cfg.clfm.heads, seed=cfg.seed)
    fused, elapsed = fusion.timed_fuse(lidar, image)
    output = Path(args.output) if args.output else cfg.out_dir / "fused.bflt"
    save_tensor(output, fused)
    logger.info("Fused %s with %s in %.3f ms -> %s", lidar.shape, fusion.name, elapsed / 1e6, output)
    return 0


def cmd_bench(cfg: RunConfig, args: argparse.Namespace) -> int:
    """Time both attention evaluation orders and every fusion scheme."""
    b = cfg.bench
    summary = clfm_bench(
        lengths=b.lengths,
        channels=b.channels,
        heads=b.heads,
        trials=b.trials,
        warmup=b.warmup,
        quadratic_max_length=b.quadratic_max_length,
        seed=cfg.seed,
        parallel=b.parallel,
    )
    report = bench_report(summary, environment_stamp(cfg))
    csv_path = Path(args.csv) if args.csv else cfg.out_dir / "bench.csv"
    _finish(cfg, report, csv_path.parent, csv_path.stem)
    schemes = RunReport(
        command="bench-fusion",
        rows=fusion_scheme_timing(b.fusion_grids, b.channels, b.heads, b.trials, cfg.seed),
        environment=environment_stamp(cfg),
    )
    save_report(schemes, csv_path.parent, "fusion_schemes", json_mirror=cfg.json)
    logger.info("Fitted slopes: %s", report.final)
    return 0


def cmd_gradcheck(cfg: RunConfig, args: argparse.Namespace) -> int:
    g = cfg.gradcheck
    results = run_gradcheck(g.cases, g.tolerance, g.step, cfg.seed)
    report = RunReport(
        command="gradcheck",
        rows=[r.to_row() for r in results],
        final={"checked": len(results), "passed": sum(r.passed for r in results)},
        environment=environment_stamp(cfg),
    )
    _finish(cfg, report, cfg.out_dir, "gradcheck")
    assert_all_passed(results)
    return 0


def cmd_ablate_pool(cfg: RunConfig, args: argparse.Namespace) -> int:
    scenes = _load_scene_dir(args.scenes) if args.scenes else None
    report = run_ablate_pool(cfg, scenes)
    _finish(cfg, report, cfg.out_dir, "ablate_pool")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "distill": cmd_distill,
    "fuse": cmd_fuse,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "ablate-pool": cmd_ablate_pool,
}


# ── Argument parsing ──────────────────────────────────────────────────


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="config file with [section] key = value lines")
    common.add_argument("--seed", type=int, help="run seed (overrides BEVLAB_SEED and the config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--json", action="store_true", help="also write a JSON mirror of the report")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")

    parser = argparse.ArgumentParser(prog="bevlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="generate toy scenes")
    gen.add_argument("--count", type=int, default=8)

    distill = sub.add_parser("distill", parents=[common], help="contrastive distillation")
    distill.add_argument("--scenes", type=Path, help="train on scenes written by gen")
    distill.add_argument("--teacher-bev", type=Path)
    distill.add_argument("--student-bev", type=Path)
    distill.add_argument("--boxes", type=Path)

    fuse = sub.add_parser("fuse", parents=[common], help="fuse two BEV tensor files")
    fuse.add_argument("--lidar", type=Path, required=True)
    fuse.add_argument("--image", type=Path, required=True)
    fuse.add_argument("--params", type=Path, help="parameter bundle directory")
    fuse.add_argument("--output", type=Path)
    fuse.add_argument("--oracle", action="store_true", help="use the quadratic evaluation order")
    fuse.add_argument("--scheme", choices=["clfm", "conv", "sa", "ca"], default="clfm")

    bench = sub.add_parser("bench", parents=[common], help="attention scaling benchmark")
    bench.add_argument("--lengths", type=_int_list)
    bench.add_argument("--channels", type=int)
    bench.add_argument("--heads", type=int)
    bench.add_argument("--trials", type=int)
    bench.add_argument("--csv", type=Path)

    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")

    ablate = sub.add_parser("ablate-pool", parents=[common], help="pooling size ablation")
    ablate.add_argument("--scenes", type=Path)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if args.json:
        cfg.json = True
    if args.log_level:
        cfg.log_level = args.log_level
    if args.command == "bench":
        for name in ("lengths", "channels", "heads", "trials"):
            value = getattr(args, name)
            if value is not None:
                setattr(cfg.bench, name, value)
    cfg.validate()
    return cfg


def main(argv: list[str] | None = None) -> int:
    """Entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    configure_logging("INFO")
    try:
        cfg = resolve_config(args)
        configure_logging(cfg.log_level)
        logger.info("bevlab %s (seed %d, out %s)", args.command, cfg.seed, cfg.out_dir)
        code = COMMANDS[args.command](cfg, args)
        logger.info("Done: %s", args.command)
        return code
    except BevlabError as e:
        logger.error("%s failed: %s", args.command, e)
        return 1
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 1


if __name__ == "__main__":
    sys.exit(main())
