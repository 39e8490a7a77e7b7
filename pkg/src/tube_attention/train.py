"""Adam optimizer, training loop and evaluation reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import Manifest, load_boxes, load_manifest
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .geometry import TubeIndex, build_tube
from .metrics import UndefinedCorrelation, accuracy, fisher_z_average, mse, spearman
from .model import (
    HeadConfig,
    NetConfig,
    TSANet,
    final_score,
    gt_distribution,
    kl_divergence,
    loss_bce,
    loss_bce_grad,
    loss_kl_grad,
    loss_mse,
    loss_mse_grad,
)
from .tensor import read_ft1

CHECKPOINT_KIND = "tsa-net"


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-5
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict, **hyper) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()}, **hyper)


def adam_step(params: dict, grads: dict, state: OptimizerState) -> tuple:
    """One Adam update with L2 weight decay folded into the gradient.

    Parameters without a gradient entry are left untouched.  Returns new
    ``(params, state)``; inputs are not modified.
    """
    step = state.step + 1
    new_params = dict(params)
    m, v = dict(state.m), dict(state.v)
    c1 = 1.0 - state.beta1**step
    c2 = 1.0 - state.beta2**step
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise ConfigError(f"gradient for {name} has shape {g.shape}, parameter has {w.shape}")
        g = g + state.weight_decay * w
        m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = m[name] / c1
        v_hat = v[name] / c2
        new_params[name] = w - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = OptimizerState(m, v, step, state.lr, state.beta1, state.beta2, state.weight_decay, state.eps)
    return new_params, new_state


def _from_dict(cls, d: dict, section: str):
    known = {f.name for f in fields(cls)}
    for key in d:
        if key not in known:
            raise ConfigError(f"unknown field {section}.{key}")
    return cls(**d)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    depth: int = 1
    seed: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-5
    eps: float = 1e-8
    flip: bool = False
    time_offset: bool = False
    sigma: float = 1.0
    bins: int = 101
    channels_reduction: int = 2
    stage2_channels: int = 16
    hidden: tuple = (256,)
    train_backbone: bool = False

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("train.epochs must be >= 0 and train.batch_size >= 1")
        if self.depth not in (0, 1, 2, 3):
            raise ConfigError(f"train.depth must be 0, 1, 2 or 3, got {self.depth}")
        if self.lr < 0 or self.sigma <= 0 or self.bins < 2:
            raise ConfigError("train.lr must be >= 0, train.sigma > 0, train.bins >= 2")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _from_dict(cls, d, "train")


@dataclass
class Sample:
    id: str
    x: np.ndarray
    tube: object
    label: dict
    category: str
    boxes: list = field(repr=False, default=None)
    _flipped: object = field(repr=False, default=None)


def load_split(manifest: Manifest, split: str) -> list:
    out = []
    for rec in manifest.split(split):
        x = read_ft1(rec.features).astype(np.float64)
        if x.shape[:4] != manifest.grid.dims or x.shape[4] != manifest.channels:
            raise DataError(f"{rec.features}: dims {x.shape} do not match manifest grid {manifest.grid.dims} x {manifest.channels}")
        boxes = load_boxes(rec.boxes)
        tube = build_tube(boxes, manifest.grid, manifest.tau)
        out.append(Sample(rec.id, x, tube, rec.label, rec.category, boxes))
    return out


class Dataset:
    """Loaded samples of one manifest, split into train and test."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self.train = load_split(manifest, "train")
        self.test = load_split(manifest, "test")

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls(load_manifest(path))

    def flipped(self, s: Sample):
        """Features and tube mirrored along the width axis."""
        if s._flipped is None:
            fw = self.manifest.grid.frame_size[0]
            tube = build_tube([b.reflected(fw) for b in s.boxes], self.manifest.grid, self.manifest.tau)
            s._flipped = (np.ascontiguousarray(s.x[:, :, :, ::-1]), tube)
        return s._flipped


def _time_shift(x, masks, delta: int):
    """Shift the flattened (clip, time) axis by ``delta`` with edge replication."""
    n, t = x.shape[:2]
    idx = np.clip(np.arange(n * t) - delta, 0, n * t - 1)
    xs = x.reshape(n * t, *x.shape[2:])[idx].reshape(x.shape)
    ms = masks.reshape(n * t, *masks.shape[2:])[idx].reshape(masks.shape)
    return xs, ms


class Task:
    """Maps labels to targets and network outputs to losses and scores."""

    def __init__(self, manifest: Manifest, cfg: TrainConfig):
        self.name = manifest.task
        norm = manifest.normalization or {}
        self.lo = float(norm.get("min", 0.0))
        self.hi = float(norm.get("max", 1.0))
        if self.hi <= self.lo:
            raise DataError("manifest normalization needs max > min")
        self.num_classes = manifest.num_classes
        self.sigma = cfg.sigma
        self.bins = np.linspace(self.lo, self.hi, cfg.bins)

    def head_config(self, hidden) -> HeadConfig:
        out = {"regression": 1, "classification": self.num_classes, "distribution": len(self.bins)}[self.name]
        return HeadConfig(task=self.name, hidden=hidden, out_size=out)

    @staticmethod
    def execution_score(label: dict) -> float:
        return label["score"] / label.get("dd", 1.0)

    def target(self, label: dict) -> np.ndarray:
        if self.name == "regression":
            return np.array([(self.execution_score(label) - self.lo) / (self.hi - self.lo)])
        if self.name == "distribution":
            return gt_distribution(self.execution_score(label), self.sigma, self.bins).probs
        onehot = np.zeros(self.num_classes)
        onehot[int(label["class"])] = 1.0
        return onehot

    def loss_and_grad(self, out: np.ndarray, target: np.ndarray) -> tuple:
        if self.name == "regression":
            return loss_mse(out, target), loss_mse_grad(out, target)
        if self.name == "classification":
            return loss_bce(out, target), loss_bce_grad(out, target)
        return kl_divergence(target, out), loss_kl_grad(target, out)

    def score(self, out: np.ndarray, label: dict):
        """Final prediction in label units (score, or class index)."""
        if self.name == "classification":
            return int(np.argmax(out))
        if self.name == "regression":
            s_pre = self.lo + float(out[0]) * (self.hi - self.lo)
        else:
            s_pre = float(np.dot(self.bins, out))
        return final_score(s_pre, label.get("dd", 1.0))


def _net_config(manifest: Manifest, cfg: TrainConfig, task: Task) -> NetConfig:
    return NetConfig(
        channels=manifest.channels,
        depth=cfg.depth,
        reduction=cfg.channels_reduction,
        stage2_channels=cfg.stage2_channels,
        train_backbone=cfg.train_backbone,
        head=task.head_config(cfg.hidden),
    )


def _run_model(model: TSANet, task: Task, samples: list) -> list:
    rows = []
    for s in sorted(samples, key=lambda s: s.id):
        out = model.predict(s.x, s.tube)
        rows.append((s, out))
    return rows


def metrics_report(model: TSANet, task: Task, samples: list, split: str, per_clip: bool = True) -> dict:
    """Metric report over ``samples``; sample order does not matter."""
    if not samples:
        raise DataError(f"split {split!r} is empty")
    rows = _run_model(model, task, samples)
    report = {"task": task.name, "split": split, "n": len(rows), "depth": model.cfg.depth}
    preds = []
    for s, out in rows:
        entry = {"id": s.id, "category": s.category, "gt": s.label.get("score", s.label.get("class")), "pred": task.score(out, s.label)}
        if per_clip:
            entry["clip_scores"] = [task.score(o, s.label) for o in model.clip_outputs(s.x, s.tube)]
        preds.append(entry)
    if task.name == "classification":
        report["accuracy"] = accuracy([p["pred"] for p in preds], [p["gt"] for p in preds])
        report["metric"] = "accuracy"
        report["value"] = report["accuracy"]
    else:
        pred = [p["pred"] for p in preds]
        gt = [p["gt"] for p in preds]
        report["mse"] = mse(pred, gt)
        try:
            report["spearman"] = spearman(pred, gt)
        except UndefinedCorrelation:
            report["spearman"] = 0.0
        per_cat = {}
        for cat in sorted({p["category"] for p in preds}):
            sub = [p for p in preds if p["category"] == cat]
            if len(sub) >= 2:
                try:
                    per_cat[cat] = spearman([p["pred"] for p in sub], [p["gt"] for p in sub])
                except UndefinedCorrelation:
                    per_cat[cat] = 0.0
        report["per_category"] = per_cat
        report["fisher_z"] = fisher_z_average(per_cat.values()) if per_cat else report["spearman"]
        report["metric"] = "spearman"
        report["value"] = report["spearman"]
    report["predictions"] = preds
    return report


def save_model(stem, model: TSANet, task: Task, cfg: TrainConfig, extra: dict | None = None, opt: OptimizerState | None = None):
    tensors = dict(model.params)
    meta = {
        "net": {**asdict(model.cfg), "head": asdict(model.cfg.head)},
        "task": task.name,
        "normalization": {"min": task.lo, "max": task.hi},
        "train": asdict(cfg),
        "param_names": list(model.params),
    }
    if opt is not None:
        for name in opt.m:
            tensors[f"adam.m.{name}"] = opt.m[name]
            tensors[f"adam.v.{name}"] = opt.v[name]
        meta["adam"] = {"step": opt.step, "names": list(opt.m)}
    meta.update(extra or {})
    return checkpoint.save(stem, tensors, kind=CHECKPOINT_KIND, meta=meta)


def load_model(stem) -> tuple:
    """Return ``(model, meta, optimizer_state_or_None)``."""
    tensors, meta = checkpoint.load(stem, kind=CHECKPOINT_KIND)
    net = dict(meta["net"])
    net["head"] = HeadConfig(**net["head"])
    model = TSANet(NetConfig(**net), params={k: tensors[k] for k in meta["param_names"]})
    opt = None
    if "adam" in meta:
        tc = meta["train"]
        opt = OptimizerState(
            {k: tensors[f"adam.m.{k}"] for k in meta["adam"]["names"]},
            {k: tensors[f"adam.v.{k}"] for k in meta["adam"]["names"]},
            meta["adam"]["step"],
            tc["lr"],
            tc["beta1"],
            tc["beta2"],
            tc["weight_decay"],
            tc["eps"],
        )
    return model, meta, opt


@dataclass
class TrainResult:
    model: TSANet
    log: list
    best_metric: float
    final_report: dict
    out_dir: Path | None = None


def _sample_view(ds: Dataset, s: Sample, cfg: TrainConfig, rng):
    x, tube = s.x, s.tube
    if cfg.flip and rng.uniform() < 0.5:
        x, tube = ds.flipped(s)
    if cfg.time_offset:
        delta = int(rng.integers(-1, 2))
        if delta:
            x, masks = _time_shift(x, tube.masks, delta)
            tube = TubeIndex(masks)
    return x, tube


def train(cfg: TrainConfig, data, out_dir=None, resume=None, epochs: int | None = None) -> TrainResult:
    """Train a network on ``data`` (a Dataset or a manifest path).

    With ``out_dir`` the per-epoch log goes to ``logs/train.jsonl`` and
    checkpoints to ``checkpoints/{last,best}``.  ``resume`` names a ``last``
    checkpoint to continue from; ``epochs`` caps how many epochs run in
    this call (for interrupted runs).
    """
    ds = data if isinstance(data, Dataset) else Dataset.load(data)
    if not ds.train:
        raise DataError("training split is empty")
    if not ds.test:
        raise DataError("test split is empty")
    task = Task(ds.manifest, cfg)
    hyper = dict(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay, eps=cfg.eps)
    start_epoch = 0
    best = -math.inf
    if resume is not None:
        model, meta, opt = load_model(resume)
        if opt is None or meta.get("task") != task.name:
            raise CheckpointError(f"{resume}: cannot resume (missing optimizer state or task mismatch)")
        start_epoch = meta["epoch"] + 1
        best = meta.get("best_metric", -math.inf)
    else:
        model = TSANet(_net_config(ds.manifest, cfg, task), seed=cfg.seed)
        opt = OptimizerState.zeros_like({k: model.params[k] for k in model.trainable}, **hyper)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "logs").mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_path = out / "logs" / "train.jsonl"
        if resume is None and log_path.exists():
            log_path.unlink()

    targets = {s.id: task.target(s.label) for s in ds.train}
    log = []
    stop = cfg.epochs if epochs is None else min(cfg.epochs, start_epoch + epochs)
    for epoch in range(start_epoch, stop):
        order = np.random.default_rng([cfg.seed, 11, epoch]).permutation(len(ds.train))
        aug_rng = np.random.default_rng([cfg.seed, 12, epoch])
        losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            batch = [ds.train[i] for i in order[b0 : b0 + cfg.batch_size]]
            acc = None
            for s in batch:
                x, tube = _sample_view(ds, s, cfg, aug_rng)
                output, cache = model.forward(x, tube)
                loss, d_out = task.loss_and_grad(output, targets[s.id])
                if not math.isfinite(loss):
                    raise NumericError(f"non-finite loss at epoch {epoch}, sample {s.id}")
                losses.append(loss)
                g = model.backward(cache, d_out)
                if acc is None:
                    acc = {k: g[k].copy() for k in opt.m}
                else:
                    for k in opt.m:
                        acc[k] += g[k]
            grads = {k: v / len(batch) for k, v in acc.items()}
            new_params, opt = adam_step({k: model.params[k] for k in opt.m}, grads, opt)
            model.params.update(new_params)
        report = metrics_report(model, task, ds.test, "test", per_clip=False)
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)), "test_metric": report["value"], "metric": report["metric"]}
        if "mse" in report:
            record["test_mse"] = report["mse"]
        log.append(record)
        improved = report["value"] > best
        best = max(best, report["value"])
        if out is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            extra = {"epoch": epoch, "best_metric": best}
            save_model(out / "checkpoints" / "last", model, task, cfg, extra, opt)
            if improved:
                save_model(out / "checkpoints" / "best", model, task, cfg, extra)
    final = metrics_report(model, task, ds.test, "test")
    if out is not None:
        (out / "reports").mkdir(exist_ok=True)
        (out / "reports" / "final_test.json").write_text(json.dumps(final, indent=1, sort_keys=True) + "\n")
    return TrainResult(model, log, best, final, out)


def evaluate(checkpoint_path, data, split: str = "test") -> dict:
    model, meta, _ = load_model(checkpoint_path)
    ds = data if isinstance(data, Dataset) else Dataset.load(data)
    if meta["task"] != ds.manifest.task:
        raise CheckpointError(f"checkpoint task {meta['task']!r} does not match manifest task {ds.manifest.task!r} (format version {checkpoint.VERSION})")
    if meta["net"]["channels"] != ds.manifest.channels:
        raise CheckpointError(f"checkpoint expects {meta['net']['channels']} channels, manifest has {ds.manifest.channels} (format version {checkpoint.VERSION})")
    cfg = TrainConfig.from_dict(meta["train"])
    task = Task(ds.manifest, cfg)
    samples = ds.train if split == "train" else ds.test
    return metrics_report(model, task, samples, split)
