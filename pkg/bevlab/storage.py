"""Persistent storage: tensor files, box lists, manifests, scenes, banks and reports.

Tensor file layout (little-endian throughout)::

    magic    8 bytes   b"BFLT0001"
    dtype    1 byte    0 = f32, 1 = f64
    ndim     1 byte
    dims     ndim x u64
    payload  prod(dims) scalars, row-major
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError, NonFiniteError, TensorFormatError
from .models import (
    BankInstance,
    Box3D,
    DepthDistribution,
    DepthPatch,
    PinholeCamera,
    PointCloud,
    RunReport,
    SceneSample,
)

logger = logging.getLogger(__name__)

MAGIC = b"BFLT0001"
DTYPE_CODES: dict[int, np.dtype] = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def header_size(ndim: int) -> int:
    return len(MAGIC) + 2 + 8 * ndim


def encode_tensor(t: np.ndarray) -> bytes:
    code = _CODE_OF.get(np.dtype(t.dtype).newbyteorder("="))
    if code is None:
        raise DimensionError(f"only f32/f64 tensors can be stored, got {t.dtype}")
    if t.ndim > 255 or any(d < 1 for d in t.shape):
        raise DimensionError(f"stored tensors need 1..255 positive extents, got {t.shape}")
    header = MAGIC + struct.pack("<BB", code, t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape)
    return header + np.ascontiguousarray(t, dtype=DTYPE_CODES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < header_size(0):
        raise TensorFormatError(f"truncated header ({len(buf)} bytes)")
    if buf[: len(MAGIC)] != MAGIC:
        raise TensorFormatError(f"bad magic {buf[: len(MAGIC)]!r}")
    code, ndim = struct.unpack_from("<BB", buf, len(MAGIC))
    if code not in DTYPE_CODES:
        raise TensorFormatError(f"unknown dtype code {code}")
    if len(buf) < header_size(ndim):
        raise TensorFormatError(f"truncated dims: expected {ndim} extents")
    dims = struct.unpack_from(f"<{ndim}Q", buf, header_size(0))
    if any(d < 1 for d in dims):
        raise TensorFormatError(f"non-positive extent in {dims}")
    dtype = DTYPE_CODES[code]
    expected = math.prod(dims) * dtype.itemsize
    payload = buf[header_size(ndim) :]
    if len(payload) != expected:
        raise TensorFormatError(f"payload is {len(payload)} bytes, expected {expected}")
    native = np.float32 if code == 0 else np.float64
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(native)


def save_tensor(path: Path, t: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(t))
    logger.debug("Wrote tensor %s to %s", t.shape, path)


def load_tensor(path: Path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# ── Text formats ──────────────────────────────────────────────────────


def save_boxes(path: Path, boxes: list[Box3D]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{b.to_line()}\n" for b in boxes))


def load_boxes(path: Path) -> list[Box3D]:
    lines = Path(path).read_text().splitlines()
    return [Box3D.from_line(line) for line in lines if line.strip() and not line.lstrip().startswith("#")]


def write_manifest(path: Path, entries: dict[str, object]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k} = {v}\n" for k, v in entries.items()))


def read_manifest(path: Path) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise TensorFormatError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        entries[key.strip()] = value.strip()
    return entries


# ── Bundles, scenes and banks ─────────────────────────────────────────


def save_bundle(directory: Path, tensors: dict[str, np.ndarray], meta: dict[str, object]) -> None:
    """Write named tensors plus scalar metadata, indexed by ``manifest.txt``."""
    directory = Path(directory)
    entries: dict[str, object] = dict(meta)
    for name, t in tensors.items():
        filename = f"{name}.bflt"
        save_tensor(directory / filename, t)
        entries[f"weight.{name}"] = filename
    write_manifest(directory / "manifest.txt", entries)


def load_bundle(directory: Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    directory = Path(directory)
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for key, value in read_manifest(directory / "manifest.txt").items():
        if key.startswith("weight."):
            tensors[key.removeprefix("weight.")] = load_tensor(directory / value)
        else:
            meta[key] = value
    return tensors, meta


def _save_points(directory: Path, points: PointCloud) -> None:
    if len(points):
        save_tensor(directory / "points.bflt", points.xyz)
        save_tensor(directory / "point_features.bflt", points.features)


def _load_points(directory: Path, count: int, channels: int) -> PointCloud:
    if count == 0:
        return PointCloud.empty(channels)
    return PointCloud(load_tensor(directory / "points.bflt"), load_tensor(directory / "point_features.bflt"))


def save_scene(directory: Path, scene: SceneSample) -> None:
    directory = Path(directory)
    _save_points(directory, scene.points)
    save_tensor(directory / "image.bflt", scene.image_features)
    save_tensor(directory / "depth.bflt", scene.depth.probs)
    save_tensor(directory / "depth_edges.bflt", np.asarray(scene.depth.bin_edges))
    save_boxes(directory / "boxes.txt", scene.boxes)
    cam = scene.camera
    write_manifest(
        directory / "scene.txt",
        {
            "num_points": len(scene.points),
            "point_channels": scene.points.channels,
            "camera.x": repr(cam.x),
            "camera.y": repr(cam.y),
            "camera.heading": repr(cam.heading),
            "camera.fx": repr(cam.fx),
            "camera.cx": repr(cam.cx),
            "camera.width": cam.width,
        },
    )


def load_scene(directory: Path) -> SceneSample:
    directory = Path(directory)
    meta = read_manifest(directory / "scene.txt")
    try:
        camera = PinholeCamera(
            x=float(meta["camera.x"]),
            y=float(meta["camera.y"]),
            heading=float(meta["camera.heading"]),
            fx=float(meta["camera.fx"]),
            cx=float(meta["camera.cx"]),
            width=int(meta["camera.width"]),
        )
        points = _load_points(directory, int(meta["num_points"]), int(meta["point_channels"]))
    except (KeyError, ValueError) as e:
        raise TensorFormatError(f"bad scene manifest in {directory}: {e}") from e
    return SceneSample(
        points=points,
        image_features=load_tensor(directory / "image.bflt"),
        depth=DepthDistribution(load_tensor(directory / "depth.bflt"), load_tensor(directory / "depth_edges.bflt")),
        boxes=load_boxes(directory / "boxes.txt"),
        camera=camera,
    )


def save_bank(directory: Path, bank: list[BankInstance]) -> None:
    directory = Path(directory)
    index: dict[str, object] = {}
    for i, inst in enumerate(bank):
        name = f"inst_{i:04d}"
        sub = directory / name
        _save_points(sub, inst.points)
        save_boxes(sub / "box.txt", [inst.box])
        save_tensor(sub / "patch.bflt", inst.patch.pixels)
        write_manifest(
            sub / "patch.txt",
            {
                "top": inst.patch.top,
                "left": inst.patch.left,
                "depth": repr(inst.patch.depth),
                "instance_id": inst.patch.instance_id,
                "num_points": len(inst.points),
                "point_channels": inst.points.channels,
            },
        )
        index[name] = name
    write_manifest(directory / "manifest.txt", index)
    logger.info("Saved %d bank instances to %s", len(bank), directory)


def load_bank(directory: Path) -> list[BankInstance]:
    directory = Path(directory)
    bank = []
    for name, rel in read_manifest(directory / "manifest.txt").items():
        sub = directory / rel
        meta = read_manifest(sub / "patch.txt")
        try:
            patch = DepthPatch(
                top=int(meta["top"]),
                left=int(meta["left"]),
                pixels=load_tensor(sub / "patch.bflt"),
                depth=float(meta["depth"]),
                instance_id=int(meta["instance_id"]),
            )
            points = _load_points(sub, int(meta["num_points"]), int(meta["point_channels"]))
        except (KeyError, ValueError) as e:
            raise TensorFormatError(f"bad bank entry {name}: {e}") from e
        (box,) = load_boxes(sub / "box.txt")
        bank.append(BankInstance(points=points, box=box, patch=patch))
    return bank


# ── Reports ───────────────────────────────────────────────────────────


def save_report(report: RunReport, directory: Path, stem: str, json_mirror: bool = False) -> Path:
    """Write the report rows as CSV (plus an optional JSON mirror); returns the CSV path."""
    bad = report.non_finite_fields()
    if bad:
        raise NonFiniteError(f"report {report.command!r} has non-finite values: {', '.join(bad)}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{stem}.csv"
    columns: list[str] = []
    for row in report.rows:
        columns.extend(k for k in row if k not in columns)
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(report.rows)
    if json_mirror:
        json_path = directory / f"{stem}.json"
        json_path.write_text(json.dumps(report.to_dict(), indent=2, default=_json_default))
    logger.info("Saved %s report (%d rows) to %s", report.command, len(report.rows), csv_path)
    return csv_path


def _json_default(value: object) -> object:
    if isinstance(value, np.generic):
        return value.item()
    return str(value)
