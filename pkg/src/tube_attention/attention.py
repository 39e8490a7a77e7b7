"""Tube self-attention: forward, analytic backward, dense baselines and stacking.

For the K tube features Q (rows in canonical tube order) the module computes

    Y  = (1/K) * (Q theta)(Q phi)^T (Q g)
    X' = X + scatter(Y W_z)

so queries and keys/values both range over the tube of the whole video and
positions outside the tube are passed through untouched.  The K x K
similarity matrix is formed in row blocks to bound memory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .errors import ConfigError, ShapeError
from .geometry import TubeIndex
from .tensor import as_feature_tensor, check_finite, gather_positions, scatter_add

DEFAULT_BLOCK = 1024
MAX_STACK_DEPTH = 3


@dataclass(frozen=True)
class AttentionParams:
    theta: np.ndarray  # C x C'
    phi: np.ndarray  # C x C'
    g: np.ndarray  # C x C'
    w_z: np.ndarray  # C' x C

    def __post_init__(self):
        for name in ("theta", "phi", "g", "w_z"):
            value = getattr(self, name)
            if not isinstance(value, np.ndarray):
                object.__setattr__(self, name, np.asarray(value, dtype=np.float64))
        c, cr = np.shape(self.theta)
        for name in ("phi", "g"):
            if np.shape(getattr(self, name)) != (c, cr):
                raise ShapeError(f"{name} has shape {np.shape(getattr(self, name))}, expected {(c, cr)}")
        if np.shape(self.w_z) != (cr, c):
            raise ShapeError(f"w_z has shape {np.shape(self.w_z)}, expected {(cr, c)}")
        if cr < 1:
            raise ShapeError("reduced channel count must be >= 1")
        for name in ("theta", "phi", "g", "w_z"):
            check_finite(np.asarray(getattr(self, name)), name)

    @property
    def channels(self) -> int:
        return self.theta.shape[0]

    @property
    def reduced(self) -> int:
        return self.theta.shape[1]

    def as_dict(self) -> dict:
        return {"theta": self.theta, "phi": self.phi, "g": self.g, "w_z": self.w_z}


@dataclass
class AttentionGradients:
    d_theta: np.ndarray
    d_phi: np.ndarray
    d_g: np.ndarray
    d_wz: np.ndarray
    d_input: np.ndarray


def init_params(channels: int, reduction: int = 2, rng=None) -> AttentionParams:
    """theta/phi/g uniform in +-1/sqrt(C); W_z zero so the module starts as identity."""
    if channels % reduction:
        raise ConfigError(f"channels {channels} not divisible by reduction factor {reduction}")
    rng = np.random.default_rng(rng)
    cr = channels // reduction
    bound = 1.0 / np.sqrt(channels)
    theta, phi, g = (rng.uniform(-bound, bound, size=(channels, cr)) for _ in range(3))
    return AttentionParams(theta, phi, g, np.zeros((cr, channels)))


def _check(x, tube: TubeIndex, p: AttentionParams) -> np.ndarray:
    x = as_feature_tensor(x)
    if tuple(tube.dims) != x.shape[:4]:
        raise ShapeError(f"tube grid {tuple(tube.dims)} does not match tensor dims {x.shape[:4]}")
    if x.shape[4] != p.channels:
        raise ShapeError(f"tensor has {x.shape[4]} channels, params expect {p.channels}")
    return x


def _blocks(k: int, block: int):
    for lo in range(0, k, block):
        yield slice(lo, min(lo + block, k))


def _attend(q: np.ndarray, p: AttentionParams, block: int, counter=None):
    """Return (Z, U, V, G, Y) for tube rows ``q``."""
    k, c = q.shape
    cr = p.reduced
    u = q @ p.theta
    v = q @ p.phi
    gv = q @ p.g
    y = np.empty((k, cr), dtype=np.result_type(q, p.theta))
    vt = v.T
    for rows in _blocks(k, block):
        a = u[rows] @ vt
        y[rows] = (a @ gv) / k
    z = y @ p.w_z
    if counter is not None:
        counter.add("embed", 3 * k * c * cr)
        counter.add("similarity", k * k * cr)
        counter.add("weighting", k * k * cr)
        counter.add("normalize", k * cr)
        counter.add("output", k * cr * c)
    return z, u, v, gv, y


def tsa_forward(x, tube: TubeIndex, p: AttentionParams, block: int = DEFAULT_BLOCK, counter=None) -> np.ndarray:
    x = _check(x, tube, p)
    if tube.total == 0:
        return x.copy()
    q = gather_positions(x, tube)
    z = _attend(q, p, block, counter)[0]
    return scatter_add(x, tube, z)


def nonlocal_forward(x, p: AttentionParams, block: int = DEFAULT_BLOCK, counter=None) -> np.ndarray:
    """Dense baseline: every position of every clip is both query and key."""
    x = as_feature_tensor(x)
    return tsa_forward(x, TubeIndex.full(x.shape[:4]), p, block=block, counter=counter)


def masked_nonlocal_reference(x, tube: TubeIndex, p: AttentionParams) -> np.ndarray:
    """Dense all-pairs computation with the tube applied as explicit 0/1 masks.

    Independent of the gather/scatter path; used as a correctness oracle.
    """
    x = _check(x, tube, p)
    k = tube.total
    if k == 0:
        return x.copy()
    c = x.shape[4]
    flat = x.reshape(-1, c)
    m = tube.masks.reshape(-1).astype(flat.dtype)
    sim = (flat @ p.theta) @ (flat @ p.phi).T
    sim = sim * m[:, None] * m[None, :]
    y = (sim @ (flat @ p.g)) / k
    out = flat + (y @ p.w_z) * m[:, None]
    return check_finite(out.reshape(x.shape), "reference output")


def tsa_backward(x, tube: TubeIndex, p: AttentionParams, upstream, block: int = DEFAULT_BLOCK) -> AttentionGradients:
    """Gradients of ``<upstream, tsa_forward(x, tube, p)>`` w.r.t. x and all weights."""
    x = _check(x, tube, p)
    upstream = np.asarray(upstream)
    if upstream.shape != x.shape:
        raise ShapeError(f"upstream gradient {upstream.shape} does not match output {x.shape}")
    k = tube.total
    if k == 0:
        zeros = np.zeros_like
        return AttentionGradients(zeros(p.theta), zeros(p.phi), zeros(p.g), zeros(p.w_z), upstream.copy())
    q = gather_positions(x, tube)
    _, u, v, gv, y = _attend(q, p, block)
    dz = gather_positions(upstream, tube)
    d_wz = y.T @ dz
    dy = dz @ p.w_z.T
    du = np.empty_like(u)
    dv = np.zeros_like(v)
    dg = np.zeros_like(gv)
    vt = v.T
    for rows in _blocks(k, block):
        a = u[rows] @ vt
        dyb = dy[rows] / k
        da = dyb @ gv.T
        dg += a.T @ dyb
        du[rows] = da @ v
        dv += da.T @ u[rows]
    dq = du @ p.theta.T + dv @ p.phi.T + dg @ p.g.T
    d_input = scatter_add(upstream, tube, dq)
    return AttentionGradients(q.T @ du, q.T @ dv, q.T @ dg, d_wz, d_input)


def stack_forward(x, tube: TubeIndex, params_list, block: int = DEFAULT_BLOCK, max_depth: int = MAX_STACK_DEPTH, counter=None):
    if not 1 <= len(params_list) <= max_depth:
        raise ConfigError(f"stack depth must be in [1, {max_depth}], got {len(params_list)}")
    for p in params_list:
        x = tsa_forward(x, tube, p, block=block, counter=counter)
    return x


def stack_backward(x, tube: TubeIndex, params_list, upstream, block: int = DEFAULT_BLOCK) -> tuple:
    """Return ``(per_module_gradients, d_input)`` for a stack of modules."""
    inputs = [as_feature_tensor(x)]
    for p in params_list[:-1]:
        inputs.append(tsa_forward(inputs[-1], tube, p, block=block))
    grads = [None] * len(params_list)
    d = upstream
    for layer in range(len(params_list) - 1, -1, -1):
        grads[layer] = tsa_backward(inputs[layer], tube, params_list[layer], d, block=block)
        d = grads[layer].d_input
    return grads, d


def save_params(stem, p: AttentionParams, seed=None, reduction: int | None = None):
    meta = {
        "shapes": {k: list(v.shape) for k, v in p.as_dict().items()},
        "seed": seed,
        "reduction_factor": reduction if reduction is not None else p.channels // p.reduced,
    }
    return checkpoint.save(stem, p.as_dict(), kind="tsa-params", meta=meta)


def load_params(stem) -> AttentionParams:
    tensors, _ = checkpoint.load(stem, kind="tsa-params")
    return AttentionParams(tensors["theta"], tensors["phi"], tensors["g"], tensors["w_z"])
