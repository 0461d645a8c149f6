"""File formats: KITTI velodyne scans, weight files, run configs, detections."""

from __future__ import annotations

import math
import struct
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .boxes import Detection
from .config import AnchorSpec, GridSpec, ModelConfig, reference_config, toy_config
from .pillars import PointCloud
from .tensor import Tensor

__all__ = [
    "read_kitti_bin",
    "write_kitti_bin",
    "save_weights",
    "load_weights",
    "WeightFileError",
    "TrainSettings",
    "RunConfig",
    "ConfigError",
    "load_run_config",
    "format_detections",
]


# --------------------------------------------------------------------------
# KITTI velodyne scans

_POINT_DTYPE = np.dtype("<f4")


def read_kitti_bin(path: str | Path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise ValueError(f"{path}: length not divisible by 16 ({len(raw)} bytes)")
    pts = np.frombuffer(raw, dtype=_POINT_DTYPE).reshape(-1, 4)
    bad = ~np.isfinite(pts).all(axis=1)
    if bad.any():
        raise ValueError(f"{path}: non-finite value at point {int(np.argmax(bad))}")
    return PointCloud(pts.astype(np.float64))


def write_kitti_bin(path: str | Path, points: np.ndarray | PointCloud) -> None:
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points)
    Path(path).write_bytes(np.ascontiguousarray(pts, dtype=_POINT_DTYPE).reshape(-1, 4).tobytes())


# --------------------------------------------------------------------------
# weight files
#
# layout (little-endian):
#   magic b"SDW1", u32 tensor count
#   per tensor: u16 name length, utf-8 name, u8 rank (<= 4), rank x u32 dims, u64 payload offset
#   payload: float32 values of every tensor, contiguous in header order

_MAGIC = b"SDW1"


class WeightFileError(ValueError):
    pass


def save_weights(params: Mapping[str, Tensor | np.ndarray], path: str | Path) -> None:
    header = bytearray(_MAGIC + struct.pack("<I", len(params)))
    payload = bytearray()
    for name, value in params.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f4")
        if arr.ndim > 4:
            raise WeightFileError(f"{name}: rank {arr.ndim} exceeds 4")
        if not np.isfinite(arr).all():
            raise WeightFileError(f"{name}: non-finite values")
        encoded = name.encode("utf-8")
        header += struct.pack("<H", len(encoded)) + encoded
        header += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        header += struct.pack("<Q", len(payload))
        payload += arr.tobytes()
    Path(path).write_bytes(bytes(header + payload))


def load_weights(path: str | Path, requires_grad: bool = False) -> dict[str, Tensor]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise WeightFileError(f"{path}: not a weight file (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise WeightFileError(f"{path}: truncated header")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    (count,) = take("<I")
    entries = []
    for _ in range(count):
        (n,) = take("<H")
        if pos + n > len(raw):
            raise WeightFileError(f"{path}: truncated header")
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<B")
        if rank > 4:
            raise WeightFileError(f"{path}: tensor {name!r} has rank {rank} > 4")
        dims = take(f"<{rank}I")
        (offset,) = take("<Q")
        entries.append((name, dims, offset))

    names = [e[0] for e in entries]
    if len(set(names)) != len(names):
        dup = next(n for n in names if names.count(n) > 1)
        raise WeightFileError(f"{path}: duplicate tensor name {dup!r}")
    payload = raw[pos:]
    expected = 0
    for name, dims, offset in entries:
        if offset != expected:
            raise WeightFileError(
                f"{path}: tensor {name!r} offset {offset} inconsistent with dims (expected {expected})"
            )
        expected += 4 * int(np.prod(dims, dtype=np.int64))
    if len(payload) < expected:
        raise WeightFileError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise WeightFileError(f"{path}: {len(payload) - expected} trailing payload bytes")

    out = {}
    for name, dims, offset in entries:
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(dims)
        out[name] = Tensor(arr.astype(np.float32), requires_grad=requires_grad)
    return out


# --------------------------------------------------------------------------
# run configuration

class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 500
    lr: float = 2e-3
    weight_decay: float = 0.01
    clip_norm: float = 10.0
    pct_start: float = 0.4
    div_factor: float = 10.0
    final_div_factor: float = 100.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    n_boxes: int = 2


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=reference_config)
    train: TrainSettings = field(default_factory=TrainSettings)
    points: str | None = None
    weights: str | None = None
    output: str | None = None
    seed: int = 0


_PRESETS = {"reference": reference_config, "toy": toy_config}
_MODEL_SCALARS = {
    f.name for f in fields(ModelConfig) if f.name not in ("grid", "anchors")
}
_TOP_KEYS = {"preset", "model", "grid", "anchors", "train", "paths", "seed"}
_PATH_KEYS = {"points", "weights", "output"}


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _check_keys(section: str, doc: Mapping, allowed: set[str]) -> None:
    if not isinstance(doc, Mapping):
        raise ConfigError(f"section {section!r} must be a mapping")
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def parse_run_config(doc: Mapping[str, Any] | None, notice=None) -> RunConfig:
    """Build a :class:`RunConfig` from a parsed document, rejecting unknown keys.

    Missing keys take the preset's defaults and are reported through
    ``notice`` (stderr by default).
    """
    doc = dict(doc or {})
    notice = notice or (lambda msg: print(msg, file=sys.stderr))
    _check_keys("config", doc, _TOP_KEYS)
    preset = doc.get("preset", "reference")
    if preset not in _PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(_PRESETS)}")
    base = _PRESETS[preset]()
    defaulted = [k for k in sorted(_TOP_KEYS - {"preset"}) if k not in doc]

    model_doc = doc.get("model", {}) or {}
    _check_keys("model", model_doc, _MODEL_SCALARS)
    grid_doc = doc.get("grid", {}) or {}
    _check_keys("grid", grid_doc, {f.name for f in fields(GridSpec)})
    train_doc = doc.get("train", {}) or {}
    _check_keys("train", train_doc, {f.name for f in fields(TrainSettings)})
    paths_doc = doc.get("paths", {}) or {}
    _check_keys("paths", paths_doc, _PATH_KEYS)

    try:
        grid = GridSpec(**{**asdict(base.grid), **{k: _tuplify(v) for k, v in grid_doc.items()}})
        anchors = base.anchors
        if "anchors" in doc:
            if not isinstance(doc["anchors"], list):
                raise ConfigError("anchors must be a list")
            allowed = {f.name for f in fields(AnchorSpec)}
            parsed = []
            for i, a in enumerate(doc["anchors"]):
                _check_keys(f"anchors[{i}]", a, allowed)
                parsed.append(AnchorSpec(**{k: _tuplify(v) for k, v in a.items()}))
            anchors = tuple(parsed)
        model = base.with_(grid=grid, anchors=anchors, **{k: _tuplify(v) for k, v in model_doc.items()})
        train = TrainSettings(**{k: _tuplify(v) for k, v in train_doc.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if defaulted:
        notice(f"notice: using {preset} defaults for: {', '.join(defaulted)}")
    return RunConfig(
        model=model,
        train=train,
        points=paths_doc.get("points"),
        weights=paths_doc.get("weights"),
        output=paths_doc.get("output"),
        seed=int(doc.get("seed", 0)),
    )


def load_run_config(path: str | Path | None, notice=None) -> RunConfig:
    if path is None:
        return parse_run_config({}, notice=notice or (lambda msg: None))
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    return parse_run_config(doc, notice)


def dump_run_config(cfg: RunConfig, preset: str = "reference") -> str:
    m = cfg.model
    model = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(m).items() if k in _MODEL_SCALARS}
    doc = {
        "preset": preset,
        "seed": cfg.seed,
        "model": model,
        "grid": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(m.grid).items()},
        "anchors": [
            {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(a).items()} for a in m.anchors
        ],
        "train": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg.train).items()},
        "paths": {"points": cfg.points, "weights": cfg.weights, "output": cfg.output},
    }
    return yaml.safe_dump(doc, sort_keys=False)


# --------------------------------------------------------------------------
# detections

def _g6(v: float) -> str:
    text = f"{v:.6g}"
    return "0" if text == "-0" else text


def format_detections(dets: list[Detection]) -> str:
    lines = []
    for d in dets:
        b = d.box
        nums = " ".join(_g6(v) for v in (b.x, b.y, b.z, b.w, b.l, b.h, b.yaw))
        lines.append(f"{d.label} {_g6(d.score)} {nums}")
    return "".join(line + "\n" for line in lines)


def parse_detections(text: str) -> list[tuple[str, float, tuple[float, ...]]]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 9:
            raise ValueError(f"malformed detection line: {line!r}")
        vals = tuple(float(v) for v in parts[2:])
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite value in detection line: {line!r}")
        out.append((parts[0], float(parts[1]), vals))
    return out
