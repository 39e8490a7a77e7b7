"""Desk-scale network around the tube attention stack.

    clips -> stage1 stub -> X -> TSA x depth -> X' -> stage2 stub -> H
          -> clip mean -> MLP head -> task output

The two backbone stages are fixed random linear maps with pooling that
stand in for a pretrained video network.  Only the attention modules and
the head are trained unless the backbone is explicitly unfrozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import MAX_STACK_DEPTH, AttentionParams, init_params, stack_backward, stack_forward
from .errors import ConfigError, ShapeError
from .geometry import TubeIndex
from .tensor import as_feature_tensor, check_finite, clip_mean

TASKS = ("regression", "classification", "distribution")
BCE_EPS = 1e-7
KL_EPS = 1e-12


@dataclass
class BackboneConfig:
    clip_frames: int = 16  # M
    in_size: tuple = (56, 56)  # (H0, W0)
    in_channels: int = 3  # C0
    grid: tuple = (14, 14)  # stage-1 (H, W)
    channels: int = 16  # stage-1 C
    stride: int = 4  # r
    stage2_channels: int = 32  # C2
    seed: int = 0

    def __post_init__(self):
        self.in_size = tuple(self.in_size)
        self.grid = tuple(self.grid)
        if min(self.clip_frames, self.in_channels, self.channels, self.stride, self.stage2_channels, *self.grid) < 1:
            raise ConfigError("backbone dims must all be >= 1")

    @property
    def time_steps(self) -> int:
        return -(-self.clip_frames // self.stride)


def _pool_edges(n_in: int, n_out: int) -> list:
    return [(k * n_in // n_out, max((k + 1) * n_in // n_out, k * n_in // n_out + 1)) for k in range(n_out)]


def stage1_weights(cfg: BackboneConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 1])
    bound = 1.0 / math.sqrt(cfg.in_channels)
    return rng.uniform(-bound, bound, size=(cfg.in_channels, cfg.channels))


def stage2_weights(channels: int, out_channels: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 2])
    bound = 1.0 / math.sqrt(channels)
    return rng.uniform(-bound, bound, size=(channels, out_channels))


def stage1_stub(clips, cfg: BackboneConfig, weights: np.ndarray | None = None) -> np.ndarray:
    """Strided average pooling to (T, H, W) then a seeded linear channel map.

    ``clips`` has shape (N, M, H0, W0, C0).  Frames are pooled ``stride`` at a
    time (the last group may be shorter); space uses adaptive bins.
    """
    clips = np.asarray(clips, dtype=float)
    if clips.ndim != 5:
        raise ShapeError(f"clips must be (N, M, H0, W0, C0), got {clips.shape}")
    n, m, h0, w0, c0 = clips.shape
    h, w = cfg.grid
    if m < cfg.stride:
        raise ConfigError(f"clip has {m} frames, fewer than the temporal stride {cfg.stride}")
    if h0 < h or w0 < w:
        raise ConfigError(f"input {h0}x{w0} is smaller than the target grid {h}x{w}")
    if c0 != cfg.in_channels:
        raise ShapeError(f"clips have {c0} channels, config expects {cfg.in_channels}")
    t_out = -(-m // cfg.stride)
    pooled = np.empty((n, t_out, h, w, c0))
    rows, cols = _pool_edges(h0, h), _pool_edges(w0, w)
    for t in range(t_out):
        seg = clips[:, t * cfg.stride : (t + 1) * cfg.stride].mean(axis=1)
        for i, (r0, r1) in enumerate(rows):
            for j, (q0, q1) in enumerate(cols):
                pooled[:, t, i, j] = seg[:, r0:r1, q0:q1].mean(axis=(1, 2))
    w1 = stage1_weights(cfg) if weights is None else weights
    return check_finite(pooled @ w1, "stage1 output")


def stage2_stub(x, weights: np.ndarray) -> np.ndarray:
    """Per-position linear map followed by a mean over (T, H, W); returns (N,1,1,1,C2)."""
    x = as_feature_tensor(x)
    if x.shape[4] != weights.shape[0]:
        raise ShapeError(f"stage2 expects {weights.shape[0]} channels, got {x.shape[4]}")
    n = x.shape[0]
    h = (x.reshape(n, -1, x.shape[4]) @ weights).mean(axis=1)
    return check_finite(h.reshape(n, 1, 1, 1, -1), "stage2 output")


@dataclass
class HeadConfig:
    task: str = "regression"
    hidden: tuple = (256,)
    out_size: int = 1

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "regression" and self.out_size != 1:
            raise ConfigError("regression head must have out_size 1")
        if self.task == "distribution" and self.out_size < 2:
            raise ConfigError("distribution head needs out_size >= 2 bins")
        if self.out_size < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("head sizes must be >= 1")


def init_head(in_size: int, cfg: HeadConfig, rng) -> list:
    """PyTorch-style uniform(+-1/sqrt(fan_in)) weights and biases."""
    layers = []
    sizes = [in_size, *cfg.hidden, cfg.out_size]
    for a, b in zip(sizes, sizes[1:]):
        bound = 1.0 / math.sqrt(a)
        layers.append((rng.uniform(-bound, bound, size=(a, b)), rng.uniform(-bound, bound, size=b)))
    return layers


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def mlp_forward(hbar, layers: list, task: str) -> tuple:
    """Return (output, cache). Hidden layers use tanh; the output transform follows the task."""
    a = np.asarray(hbar, dtype=float)
    acts = [a]
    for k, (w, b) in enumerate(layers):
        z = a @ w + b
        a = np.tanh(z) if k < len(layers) - 1 else z
        acts.append(a)
    logits = acts[-1]
    if task == "classification":
        out = _sigmoid(logits)
    elif task == "distribution":
        out = _softmax(logits)
    else:
        out = logits
    return out, (acts, out)


def mlp_backward(layers: list, task: str, cache, d_out) -> tuple:
    """Return (layer_grads, d_hbar)."""
    acts, out = cache
    d_out = np.asarray(d_out, dtype=float)
    if task == "classification":
        d = d_out * out * (1.0 - out)
    elif task == "distribution":
        d = out * (d_out - np.dot(out, d_out))
    else:
        d = d_out
    grads = [None] * len(layers)
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        grads[k] = (np.outer(acts[k], d), d.copy())
        d = d @ w.T
        if k > 0:
            d = d * (1.0 - acts[k] ** 2)
    return grads, d


def mlp_head(hbar, layers: list, cfg: HeadConfig) -> np.ndarray:
    hbar = np.asarray(hbar, dtype=float).reshape(-1)
    if hbar.shape[0] != layers[0][0].shape[0]:
        raise ShapeError(f"head expects {layers[0][0].shape[0]} features, got {hbar.shape[0]}")
    return mlp_forward(hbar, layers, cfg.task)[0]


def loss_mse(pred, gt) -> float:
    return float(np.mean((np.asarray(pred, dtype=float) - gt) ** 2))


def loss_mse_grad(pred, gt) -> np.ndarray:
    pred = np.asarray(pred, dtype=float)
    return 2.0 * (pred - gt) / pred.size


def loss_bce(pred, gt) -> float:
    p = np.clip(np.asarray(pred, dtype=float), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(gt, dtype=float)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def loss_bce_grad(pred, gt) -> np.ndarray:
    p = np.clip(np.asarray(pred, dtype=float), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(gt, dtype=float)
    return (-(y / p) + (1.0 - y) / (1.0 - p)) / p.size


@dataclass(frozen=True)
class ScoreDistribution:
    bins: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=float)
        probs = np.asarray(self.probs, dtype=float)
        if bins.ndim != 1 or bins.shape != probs.shape or len(bins) < 2:
            raise ShapeError("a score distribution needs >= 2 bins with one probability each")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "bins", bins)
        object.__setattr__(self, "probs", probs)

    def expectation(self) -> float:
        return float(np.dot(self.bins, self.probs))


def kl_divergence(p, s) -> float:
    s = np.maximum(s, KL_EPS)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / s[nz])))


def loss_kl(p_c: ScoreDistribution, s_pre: ScoreDistribution) -> float:
    """KL(p_c || s_pre); zero-probability target bins contribute nothing."""
    if not np.array_equal(p_c.bins, s_pre.bins):
        raise ShapeError("distributions are defined over different bins")
    return kl_divergence(p_c.probs, s_pre.probs)


def loss_kl_grad(p, s) -> np.ndarray:
    """Gradient of KL(p || s) with respect to the predicted probabilities s."""
    p = np.asarray(p, dtype=float)
    s = np.asarray(s, dtype=float)
    return np.where(s > KL_EPS, -p / np.maximum(s, KL_EPS), 0.0)


def gt_distribution(score: float, sigma: float, bins) -> ScoreDistribution:
    """Gaussian centred on ``score`` discretized onto ``bins`` and renormalized."""
    bins = np.asarray(bins, dtype=float)
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    logits = -((bins - score) ** 2) / (2.0 * sigma * sigma)
    w = np.exp(logits - logits.max())
    return ScoreDistribution(bins, w / w.sum())


def final_score(s_pre_expected: float, dd: float = 1.0) -> float:
    return dd * s_pre_expected


def plist_from(params: dict, depth: int) -> list:
    return [AttentionParams(params[f"tsa{k}.theta"], params[f"tsa{k}.phi"], params[f"tsa{k}.g"], params[f"tsa{k}.w_z"]) for k in range(depth)]


@dataclass
class NetConfig:
    channels: int = 8
    depth: int = 1
    reduction: int = 2
    stage2_channels: int = 16
    train_backbone: bool = False
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if isinstance(self.head, dict):
            self.head = HeadConfig(**self.head)
        if not 0 <= self.depth <= MAX_STACK_DEPTH:
            raise ConfigError(f"depth must be in [0, {MAX_STACK_DEPTH}], got {self.depth}")


class TSANet:
    """Attention stack + stage-2 stub + clip pooling + MLP head.

    ``params`` maps names to arrays; ``trainable`` lists the names the
    optimizer updates.  Depth 0 is the plain network without attention.
    """

    def __init__(self, cfg: NetConfig, seed: int = 0, params: dict | None = None):
        self.cfg = cfg
        if params is None:
            params = self._init_params(seed)
        self.params = params

    def _init_params(self, seed: int) -> dict:
        cfg = self.cfg
        rng = np.random.default_rng([seed, 3])
        params = {}
        for k in range(cfg.depth):
            p = init_params(cfg.channels, cfg.reduction, rng)
            for name, arr in p.as_dict().items():
                params[f"tsa{k}.{name}"] = arr
        params["stage2.w"] = stage2_weights(cfg.channels, cfg.stage2_channels, seed)
        for k, (w, b) in enumerate(init_head(cfg.stage2_channels, cfg.head, rng)):
            params[f"head{k}.w"] = w
            params[f"head{k}.b"] = b
        return params

    @property
    def trainable(self) -> list:
        return [n for n in self.params if n != "stage2.w" or self.cfg.train_backbone]

    def _layers(self) -> list:
        return [(self.params[f"head{k}.w"], self.params[f"head{k}.b"]) for k in range(len(self.cfg.head.hidden) + 1)]

    def _attend(self, x, tube: TubeIndex) -> np.ndarray:
        return stack_forward(x, tube, plist_from(self.params, self.cfg.depth)) if self.cfg.depth else x

    def features(self, x, tube: TubeIndex) -> np.ndarray:
        """Per-clip stage-2 features, shape (N, C2)."""
        h = stage2_stub(self._attend(as_feature_tensor(x), tube), self.params["stage2.w"])
        return h.reshape(h.shape[0], -1)

    def forward(self, x, tube: TubeIndex) -> tuple:
        x = as_feature_tensor(x)
        x1 = self._attend(x, tube)
        h = stage2_stub(x1, self.params["stage2.w"])
        h = h.reshape(h.shape[0], -1)
        hbar = clip_mean(h[:, None, None, None, :]).reshape(-1)
        out, head_cache = mlp_forward(hbar, self._layers(), self.cfg.head.task)
        return out, (x, x1, tube, h, head_cache)

    def predict(self, x, tube: TubeIndex) -> np.ndarray:
        return self.forward(x, tube)[0]

    def clip_outputs(self, x, tube: TubeIndex) -> np.ndarray:
        """Head output for every clip on its own, for per-clip score reports."""
        h = self.features(as_feature_tensor(x), tube)
        return np.stack([mlp_forward(row, self._layers(), self.cfg.head.task)[0] for row in h])

    def backward(self, cache, d_out) -> dict:
        x, x1, tube, h, head_cache = cache
        layer_grads, d_hbar = mlp_backward(self._layers(), self.cfg.head.task, head_cache, d_out)
        grads = {}
        for k, (dw, db) in enumerate(layer_grads):
            grads[f"head{k}.w"] = dw
            grads[f"head{k}.b"] = db
        n = h.shape[0]
        dh = np.broadcast_to(d_hbar / n, h.shape)
        w2 = self.params["stage2.w"]
        depth = self.cfg.depth
        plist = plist_from(self.params, depth)
        if self.cfg.train_backbone:
            grads["stage2.w"] = x1.reshape(n, -1, x1.shape[4]).mean(axis=1).T @ dh
        if depth:
            positions = x.shape[1] * x.shape[2] * x.shape[3]
            dx1 = np.broadcast_to((dh @ w2.T / positions)[:, None, None, None, :], x.shape)
            tsa_grads, _ = stack_backward(x, tube, plist, dx1)
            for k, g in enumerate(tsa_grads):
                grads[f"tsa{k}.theta"] = g.d_theta
                grads[f"tsa{k}.phi"] = g.d_phi
                grads[f"tsa{k}.g"] = g.d_g
                grads[f"tsa{k}.w_z"] = g.d_wz
        return grads
