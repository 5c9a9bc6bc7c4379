"""Single-head attention with an optional prepended soft prompt.

Everything here uses the column convention: a sequence of ``n`` vectors of
dimension ``d`` is a ``d x n`` matrix, and head weights are ``d_H x d``.

Two independent routes compute the output of a head when a prompt ``Z`` is
prepended to the context:

* :func:`prefix_forward_direct` runs ordinary attention over ``[Z | X]``;
* :func:`prefix_forward_decomposed` splits the result into a bias drawn from
  the span of ``W^V z^k`` plus a rescaled copy of the prompt-free output.

The test-suite checks that both agree to round-off.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm

UNSCALED = "unscaled"
INV_SQRT_DH = "inv-sqrt-dH"


@dataclass(frozen=True)
class HeadWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    scale_mode: str = INV_SQRT_DH

    def __post_init__(self):
        shapes = {self.wq.shape, self.wk.shape, self.wv.shape}
        if len(shapes) != 1 or self.wq.ndim != 2:
            raise nm.ShapeError(
                f"wq/wk/wv must share one d_H x d shape, got "
                f"{self.wq.shape}, {self.wk.shape}, {self.wv.shape}"
            )
        if self.scale_mode not in (UNSCALED, INV_SQRT_DH):
            raise ValueError(f"unknown scale_mode {self.scale_mode!r}")

    @property
    def d(self) -> int:
        return self.wq.shape[1]

    @property
    def d_head(self) -> int:
        return self.wq.shape[0]

    @property
    def factor(self) -> float:
        return 1.0 if self.scale_mode == UNSCALED else 1.0 / np.sqrt(self.d_head)

    @classmethod
    def random(cls, rng, d: int, d_head: int, scale_mode=INV_SQRT_DH, std=None):
        std = 1.0 / np.sqrt(d) if std is None else std
        ws = [rng.normal(0.0, std, size=(d_head, d)) for _ in range(3)]
        return cls(*ws, scale_mode=scale_mode)


@dataclass(frozen=True)
class MultiHeadConfig:
    d: int
    n_heads: int

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads


def _check_column(w: HeadWeights, x: np.ndarray, name: str) -> None:
    if x.ndim != 2 or x.shape[0] != w.d:
        raise nm.ShapeError(f"{name} must have {w.d} rows, got shape {x.shape}")


def _logits(w: HeadWeights, x_query: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """1 x n row of ``(W^K x^j)^T W^Q x^i`` (times the head scale)."""
    q = nm.matmul(w.wq, x_query)
    k = nm.matmul(w.wk, keys)
    return nm.scale(nm.matmul(nm.transpose(q), k), w.factor)


def head_forward(w: HeadWeights, x_query: np.ndarray, x_context: np.ndarray) -> np.ndarray:
    """Output of one head at one query position, shape ``d_H x 1``."""
    _check_column(w, x_query, "x_query")
    _check_column(w, x_context, "x_context")
    if x_query.shape[1] != 1:
        raise nm.ShapeError(f"x_query must be a single column, got {x_query.shape}")
    if x_context.shape[1] == 0:
        raise nm.ShapeError("x_context must hold at least one column")
    probs = nm.softmax_rows(_logits(w, x_query, x_context))
    values = nm.matmul(w.wv, x_context)
    return nm.matmul(values, nm.transpose(probs))


def prefix_forward_direct(w, x_query, z, x_context) -> np.ndarray:
    """Head output with ``z`` prepended to the context."""
    _check_column(w, z, "z")
    if z.shape[1] == 0:
        return head_forward(w, x_query, x_context)
    return head_forward(w, x_query, nm.concat_cols(z, x_context))


def prefix_attention_weights(w, x_query, z, x_context) -> np.ndarray:
    """Attention mass given to each prompt vector, length ``m``.

    The normaliser runs over prompt and context logits together; the
    maximum over both is subtracted before exponentiating.
    """
    _check_column(w, x_query, "x_query")
    _check_column(w, z, "z")
    _check_column(w, x_context, "x_context")
    m = z.shape[1]
    if m == 0:
        return np.zeros(0, dtype=x_query.dtype)
    zl = _logits(w, x_query, z)[0]
    xl = _logits(w, x_query, x_context)[0]
    top = max(zl.max(), xl.max() if xl.size else -np.inf)
    ez = np.exp(zl - top)
    ex = np.exp(xl - top)
    return ez / (ez.sum() + ex.sum())


def prefix_forward_decomposed(w, x_query, z, x_context) -> np.ndarray:
    """Bias-plus-rescale form: ``sum_k A_k W^V z^k + (1 - sum_k A_k) o``."""
    o = head_forward(w, x_query, x_context)
    if z.shape[1] == 0:
        return o
    a = prefix_attention_weights(w, x_query, z, x_context)
    bias = nm.matmul(nm.matmul(w.wv, z), a[:, None])
    return nm.add(bias, nm.scale(o, 1.0 - a.sum()))


def offset_subspace_rank(w: HeadWeights, z: np.ndarray, rtol: float = 1e-9) -> int:
    """Dimension of span{W^V z^k}."""
    _check_column(w, z, "z")
    return nm.numerical_rank(nm.matmul(w.wv, z), rtol)


def offset_subspace_basis(w: HeadWeights, z: np.ndarray, rtol: float = 1e-9) -> np.ndarray:
    """Orthonormal basis (columns) of span{W^V z^k}."""
    _check_column(w, z, "z")
    return _orth(nm.matmul(w.wv, z), rtol)


def _orth(a, rtol):
    if a.size == 0:
        return np.zeros((a.shape[0], 0))
    u, s, _ = np.linalg.svd(a, full_matrices=False)
    if s[0] == 0.0:
        return np.zeros((a.shape[0], 0))
    return u[:, s > rtol * s[0]]


def same_span(a: np.ndarray, b: np.ndarray, atol: float = 1e-9, rtol: float = 1e-9) -> bool:
    """Whether the columns of ``a`` and ``b`` span the same subspace."""
    if a.shape[0] != b.shape[0]:
        return False
    qa, qb = _orth(a, rtol), _orth(b, rtol)
    if qa.shape[1] != qb.shape[1]:
        return False
    return bool(np.allclose(qa @ qa.T, qb @ qb.T, atol=atol))
