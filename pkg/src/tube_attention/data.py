"""Box tracks, dataset manifests and the synthetic benchmark generator.

Synthetic videos are produced directly at stage-1 resolution.  A moving,
slightly rotated box is rasterized into a tube; tube cells carry a quality
signal along channel 0 whose amplitude grows with the sample's hidden
quality ``q``, while background cells carry zero-mean clutter plus
"distractor" cells that put label-independent energy on the same channel.
A predictor that pools the whole frame therefore sees the signal mixed with
distractors, whereas one restricted to the tube sees it cleanly.
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, GeometryError, ResolutionError
from .geometry import GridSpec, TrackBox, build_tube, default_clip_layout
from .tensor import write_ft1

MANIFEST_FORMAT = "tsa-manifest"
MANIFEST_VERSION = 1
TRAJECTORIES = ("linear", "parabolic", "scale-varying")
LABEL_RULES = {
    "score": "regression",
    "score_dd": "distribution",
    "fall": "classification",
}
# Fixed execution-score ranges per rule, used for min-max normalization.
SCORE_RANGES = {"score": (20.0, 90.0), "score_dd": (10.0, 30.0)}


def load_boxes(path) -> list:
    path = Path(path)
    if not path.exists():
        raise ResolutionError(f"boxes file not found: {path}")
    boxes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                box = TrackBox(rec["frame"], tuple(tuple(p) for p in rec["pts"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed box record: {exc}") from exc
            if boxes and box.frame_index <= boxes[-1].frame_index:
                raise DataError(f"{path}:{lineno}: frame {box.frame_index} not after frame {boxes[-1].frame_index}")
            boxes.append(box)
    return boxes


def write_boxes(path, boxes) -> None:
    with open(path, "w") as fh:
        for b in boxes:
            fh.write(json.dumps({"frame": b.frame_index, "pts": [list(p) for p in b.pts]}) + "\n")


@dataclass
class SampleRecord:
    id: str
    features: Path
    boxes: Path
    label: dict
    split: str
    category: str = "all"


@dataclass
class Manifest:
    path: Path
    task: str
    grid: GridSpec
    tau: float
    channels: int
    normalization: dict
    samples: list
    num_classes: int = 2

    def split(self, name: str) -> list:
        return [s for s in self.samples if s.split == name]


def _check_label(label: dict, task: str, where: str) -> None:
    ok = {
        "regression": "score" in label,
        "distribution": "score" in label,
        "classification": "class" in label,
    }[task]
    if not ok:
        raise DataError(f"{where}: label {label} does not fit task {task!r}")


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise ResolutionError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed manifest: {exc}") from exc
    if doc.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{path}: not a {MANIFEST_FORMAT} document")
    root = path.parent
    task = doc["task"]
    samples = []
    for k, s in enumerate(doc["samples"]):
        rec = SampleRecord(
            id=s["id"],
            features=root / s["features"],
            boxes=root / s["boxes"],
            label=s["label"],
            split=s["split"],
            category=s.get("category", "all"),
        )
        for ref in (rec.features, rec.boxes):
            if not ref.exists():
                raise ResolutionError(f"{path}: sample {rec.id} references missing file {ref}")
        if rec.split not in ("train", "test"):
            raise DataError(f"{path}: sample {rec.id} has unknown split {rec.split!r}")
        _check_label(rec.label, task, f"{path}: sample {rec.id}")
        samples.append(rec)
    return Manifest(
        path=path,
        task=task,
        grid=GridSpec.from_dict(doc["grid"]),
        tau=doc.get("tau", 0.5),
        channels=doc["channels"],
        normalization=doc.get("normalization", {}),
        samples=samples,
        num_classes=doc.get("num_classes", 2),
    )


@dataclass
class SynthConfig:
    n_videos: int = 200
    frames: int = 103
    frame_size: tuple = (320, 240)  # (width, height)
    grid: tuple = (8, 8)  # (H, W)
    clips: int = 10
    clip_length: int = 16
    stride: int = 4
    channels: int = 8
    trajectories: tuple = TRAJECTORIES
    occupancy: tuple = (0.15, 0.25)
    contrast: float = 1.0
    distractor: float = 1.0
    noise: float = 0.5
    max_skew_deg: float = 15.0
    label_rule: str = "score"
    tau: float = 0.5
    train_fraction: float = 0.5
    dtype: str = "f32"
    seed: int = 0

    def __post_init__(self):
        self.frame_size = tuple(self.frame_size)
        self.grid = tuple(self.grid)
        self.trajectories = tuple(self.trajectories)
        self.occupancy = tuple(float(v) for v in self.occupancy)
        for name in ("n_videos", "frames", "clips", "clip_length", "stride", "channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"synth.{name} must be >= 1")
        lo, hi = self.occupancy
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError(f"synth.occupancy must satisfy 0 < lo <= hi <= 1, got {self.occupancy}")
        if self.contrast < 0 or self.distractor < 0 or self.noise < 0:
            raise ConfigError("synth.contrast, synth.distractor and synth.noise must be >= 0")
        unknown = set(self.trajectories) - set(TRAJECTORIES)
        if unknown or not self.trajectories:
            raise ConfigError(f"synth.trajectories has unknown families {sorted(unknown)}")
        if self.label_rule not in LABEL_RULES:
            raise ConfigError(f"synth.label_rule must be one of {sorted(LABEL_RULES)}")
        if self.channels < 2:
            raise ConfigError("synth.channels must be >= 2")
        if self.clip_length > self.frames:
            raise ConfigError("synth.clip_length exceeds synth.frames")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown field synth.{key}")
        return cls(**d)

    def grid_spec(self) -> GridSpec:
        return GridSpec(
            frame_size=self.frame_size,
            grid=self.grid,
            stride=self.stride,
            clips=default_clip_layout(self.frames, self.clips, self.clip_length),
            video_length=self.frames,
        )


def _rect(cx, cy, w, h, angle) -> tuple:
    ca, sa = math.cos(angle), math.sin(angle)
    corners = ((-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2), (-w / 2, h / 2))
    return tuple((cx + x * ca - y * sa, cy + x * sa + y * ca) for x, y in corners)


def synth_track(cfg: SynthConfig, family: str, rho: float, rng) -> list:
    fw, fh = (float(v) for v in cfg.frame_size)
    bw, bh = math.sqrt(rho) * fw, math.sqrt(rho) * fh
    frames = cfg.frames
    if rho >= 1.0:
        return [TrackBox(l, _rect(fw / 2, fh / 2, fw, fh, 0.0)) for l in range(frames)]
    x_lo, x_hi = bw / 2, fw - bw / 2
    y_lo, y_hi = bh / 2, fh - bh / 2
    x0, x1 = rng.uniform(x_lo, x_hi, size=2)
    y0, y1 = rng.uniform(y_lo, y_hi, size=2)
    skew = math.radians(cfg.max_skew_deg)
    a0, a1 = rng.uniform(-skew, skew, size=2)
    jump = rng.uniform(0.3, 1.0) * (y_hi - y_lo)
    phase = rng.uniform(0, 2 * math.pi)
    boxes = []
    for l in range(frames):
        s = l / max(frames - 1, 1)
        cx = x0 + s * (x1 - x0)
        cy = y0 + s * (y1 - y0)
        scale = 1.0
        if family == "parabolic":
            cy = min(max(cy - 4.0 * jump * s * (1.0 - s), y_lo), y_hi)
        elif family == "scale-varying":
            scale = 1.0 + 0.25 * math.sin(2 * math.pi * s + phase)
        boxes.append(TrackBox(l, _rect(cx, cy, bw * scale, bh * scale, a0 + s * (a1 - a0))))
    return boxes


def _label(rule: str, q: float, rng) -> dict:
    if rule == "score":
        return {"score": 20.0 + 60.0 * q + 10.0 * q * q}
    if rule == "score_dd":
        dd = round(float(rng.uniform(1.5, 3.5)), 1)
        return {"score": dd * (10.0 + 20.0 * q), "dd": dd}
    return {"class": int(q < 1.0 / 3.0)}


def synth_sample(cfg: SynthConfig, index: int, spec: GridSpec | None = None) -> dict:
    """Generate one video: boxes, features, label and the hidden quality."""
    spec = spec or cfg.grid_spec()
    rng = np.random.default_rng([cfg.seed, index])
    family = cfg.trajectories[index % len(cfg.trajectories)]
    q = float(rng.uniform())
    rho = float(rng.uniform(*cfg.occupancy))
    boxes = synth_track(cfg, family, rho, rng)
    tube = build_tube(boxes, spec, cfg.tau)
    n, t, h, w = spec.dims
    x = rng.normal(0.0, cfg.noise, size=(n, t, h, w, cfg.channels))
    signal = x[..., 0].copy()
    signal[tube.masks] = cfg.contrast * (0.5 + q)
    background = np.flatnonzero(~tube.masks)
    count = min(tube.total, background.size)
    picked = rng.choice(background, size=count, replace=False) if count else background[:0]
    level = float(rng.uniform(0.0, 2.0)) * cfg.distractor
    signal.reshape(-1)[picked] += level
    x[..., 0] = signal
    return {
        "boxes": boxes,
        "features": x,
        "tube": tube,
        "quality": q,
        "category": family,
        "label": _label(cfg.label_rule, q, rng),
    }


def gen_synthetic(cfg: SynthConfig, out_dir, force: bool = False) -> Path:
    """Write features/, boxes/ and manifest.json under ``out_dir``; return the manifest path."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise DataError(f"output directory {out} is not empty (use force to overwrite)")
        for sub in ("features", "boxes"):
            shutil.rmtree(out / sub, ignore_errors=True)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "boxes").mkdir(parents=True, exist_ok=True)
    spec = cfg.grid_spec()
    split_rng = np.random.default_rng([cfg.seed, 2**31])
    order = split_rng.permutation(cfg.n_videos)
    n_train = int(round(cfg.train_fraction * cfg.n_videos))
    train_ids = set(order[:n_train].tolist())
    samples = []
    for k in range(cfg.n_videos):
        sid = f"v{k:05d}"
        s = synth_sample(cfg, k, spec)
        feat_rel = f"features/{sid}.ft1"
        box_rel = f"boxes/{sid}.jsonl"
        try:
            write_ft1(out / feat_rel, s["features"], dtype=cfg.dtype)
            write_boxes(out / box_rel, s["boxes"])
        except OSError as exc:
            raise DataError(f"failed writing sample {sid} under {out}: {exc}") from exc
        samples.append(
            {
                "id": sid,
                "features": feat_rel,
                "boxes": box_rel,
                "label": s["label"],
                "split": "train" if k in train_ids else "test",
                "category": s["category"],
                "quality": s["quality"],
                "occupancy": s["tube"].occupancy,
            }
        )
    task = LABEL_RULES[cfg.label_rule]
    lo, hi = SCORE_RANGES.get(cfg.label_rule, (0.0, 1.0))
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "task": task,
        "grid": spec.to_dict(),
        "tau": cfg.tau,
        "channels": cfg.channels,
        "normalization": {"min": lo, "max": hi},
        "num_classes": 2,
        "synth": asdict(cfg),
        "samples": samples,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path
