"""Dense matrix primitives shared by every other module.

Matrices are plain 2-D ``numpy`` arrays.  Two precisions are used: float64 for
anything that is gradient-checked and float32 for the wire and the server.
All public operations validate shapes and refuse to return non-finite values.
"""
from __future__ import annotations

import numpy as np

F64 = np.float64
F32 = np.float32

#: Bit generator behind :func:`make_rng`.  PCG64 streams are specified
#: independently of platform, so a seed reproduces everywhere.
RNG_ALGORITHM = "PCG64"


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


def make_rng(seed) -> np.random.Generator:
    """Seeded generator; ``seed`` is an int or a sequence of ints."""
    if isinstance(seed, (list, tuple)):
        return np.random.Generator(np.random.PCG64([int(s) for s in seed]))
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_matrix(a, dtype=F64) -> np.ndarray:
    out = np.asarray(a, dtype=dtype)
    if out.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {out.shape}")
    return out


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced non-finite values")
    return out


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _same_dtype(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: precisions {a.dtype} and {b.dtype} differ")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    _same_dtype(a, b, "matmul")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return _finite(out, "matmul")


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax with the row maximum subtracted first."""
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows: expected 2-D input, got {a.shape}")
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return _finite(e / e.sum(axis=1, keepdims=True), "softmax_rows")


def sigmoid(a: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    a = np.asarray(a)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "hadamard")
    return _finite(a * b, "hadamard")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "add")
    return _finite(a + b, "add")


def scale(a: np.ndarray, c: float) -> np.ndarray:
    return _finite(a * a.dtype.type(c), "scale")


def transpose(a: np.ndarray) -> np.ndarray:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D input, got {a.shape}")
    return np.ascontiguousarray(a.T)


def concat_cols(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Columns of ``a`` followed by columns of ``b``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: cannot join {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def numerical_rank(a: np.ndarray, rtol: float = 1e-9) -> int:
    """Number of singular values above ``rtol`` times the largest one."""
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))
