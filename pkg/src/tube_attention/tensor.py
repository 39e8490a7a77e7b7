"""Dense array substrate: feature tensors, matrices and the FT1 file format.

Feature tensors are plain ``numpy.ndarray`` objects of rank 5 laid out as
``(clip, time, row, col, channel)``; matrices are rank-2 arrays.  Nothing
broadcasts: every shape mismatch raises :class:`ShapeError`.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, ShapeError

FT1_MAGIC = "FT1"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def as_feature_tensor(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 5:
        raise ShapeError(f"feature tensor must be rank 5 (N,T,H,W,C), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"feature tensor dims must all be >= 1, got {arr.shape}")
    if arr.dtype not in (np.float32, np.float64):
        raise ShapeError(f"unsupported dtype {arr.dtype}")
    return arr


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains NaN or Inf")
    return arr


def as_matrix(a) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 2:
        raise ShapeError(f"matrix must be rank 2, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product with ascending-index accumulation.

    The inner dimension is reduced one term at a time, so each output entry
    is bit-identical to ``s = 0; s += a[i,k] * b[k,j]`` for k = 0, 1, ...
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return check_finite(out, "matmul result")


def _check_tube(x: np.ndarray, tube) -> None:
    if tuple(tube.dims) != x.shape[:4]:
        raise ShapeError(f"tube grid {tuple(tube.dims)} does not match tensor dims {x.shape[:4]}")


def gather_positions(x, tube) -> np.ndarray:
    """Rows of the tube's feature vectors in (n, t, i, j) ascending order."""
    x = as_feature_tensor(x)
    _check_tube(x, tube)
    return x.reshape(-1, x.shape[4])[tube.flat_index]


def scatter_add(x, tube, rows) -> np.ndarray:
    """Return a copy of ``x`` with ``rows[k]`` added at the k-th tube position."""
    x = as_feature_tensor(x)
    _check_tube(x, tube)
    rows = np.asarray(rows)
    if rows.shape != (tube.total, x.shape[4]):
        raise ShapeError(f"scatter_add: rows {rows.shape}, expected ({tube.total}, {x.shape[4]})")
    out = x.copy()
    flat = out.reshape(-1, x.shape[4])
    flat[tube.flat_index] += rows
    return check_finite(out, "scatter_add result")


def clip_mean(h) -> np.ndarray:
    """Mean over the clip axis, keeping it as a singleton.

    Values are sorted along the clip axis before the sequential sum, so the
    result is exactly invariant to clip order.
    """
    h = as_feature_tensor(h)
    ordered = np.sort(h, axis=0)
    acc = ordered[0].copy()
    for n in range(1, h.shape[0]):
        acc += ordered[n]
    return check_finite((acc / h.shape[0])[None], "clip mean")


def write_ft1(path, x, dtype: str = "f64") -> None:
    x = as_feature_tensor(x)
    if dtype not in _DTYPES:
        raise FormatError(f"unknown FT1 dtype {dtype!r}")
    header = {"magic": FT1_MAGIC, "dims": list(x.shape), "dtype": dtype}
    blob = np.ascontiguousarray(x, dtype=_DTYPES[dtype]).tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(blob)


def read_ft1(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing FT1 header line")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed FT1 header: {exc}") from exc
    if not isinstance(header, dict) or header.get("magic") != FT1_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {FT1_MAGIC!r}")
    dims = header.get("dims")
    if not (isinstance(dims, list) and len(dims) == 5 and all(isinstance(d, int) and d >= 1 for d in dims)):
        raise FormatError(f"{path}: dims must be five positive integers, got {dims!r}")
    if header.get("dtype") not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype {header.get('dtype')!r}")
    dt = _DTYPES[header["dtype"]]
    expected = int(np.prod(dims)) * dt.itemsize
    actual = len(raw) - nl - 1
    if actual != expected:
        raise FormatError(f"{path}: blob holds {actual} bytes, expected {expected} for dims {dims}")
    arr = np.frombuffer(raw, dtype=dt, offset=nl + 1).reshape(dims)
    return arr.astype(dt.newbyteorder("="))
