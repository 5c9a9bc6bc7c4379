"""Frozen toy foundation model.

A byte-level transformer classifier: token + position embeddings, a stack
of blocks (multi-head attention then a tanh feed-forward, both residual),
pooling over positions and a fixed linear read-out.  Every weight here is
frozen; training only ever touches the client-side composer and encoder.

A soft prompt ``Z`` (``(B, d, m)``) is prepended to the context of the
first block only.  Queries are the real input positions, so the prompt
contributes keys and values in block one and nothing afterwards.

This module deliberately does not import the composer code: the server
depends on it and must stay task-blind.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from . import numeric as nm


@dataclass(frozen=True)
class FMConfig:
    vocab: int = 256
    d: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    d_ff: int = 128
    n_max: int = 64
    n_classes: int = 2
    pooling: str = "mean"
    scale_mode: str = "inv-sqrt-dH"
    seed: int = 0

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} must be divisible by n_heads={self.n_heads}")
        if self.pooling not in ("mean", "first"):
            raise ValueError(f"pooling must be 'mean' or 'first', got {self.pooling!r}")
        if self.scale_mode not in ("unscaled", "inv-sqrt-dH"):
            raise ValueError(f"unknown scale_mode {self.scale_mode!r}")

    @property
    def d_head(self):
        return self.d // self.n_heads

    def to_dict(self):
        return asdict(self)


def init_fm_params(cfg: FMConfig, dtype=nm.F64) -> dict:
    rng = nm.make_rng(cfg.seed)
    d, H, dh = cfg.d, cfg.n_heads, cfg.d_head
    p = {
        "tok_emb": rng.normal(0.0, 1.0, size=(d, cfg.vocab)),
        "pos_emb": rng.normal(0.0, 0.5, size=(d, cfg.n_max)),
    }
    for i in range(cfg.n_blocks):
        s = 1.0 / np.sqrt(d)
        p[f"b{i}.wq"] = rng.normal(0.0, s, size=(H, dh, d))
        p[f"b{i}.wk"] = rng.normal(0.0, s, size=(H, dh, d))
        p[f"b{i}.wv"] = rng.normal(0.0, s, size=(H, dh, d))
        p[f"b{i}.wo"] = rng.normal(0.0, s, size=(d, d))
        p[f"b{i}.w1"] = rng.normal(0.0, s, size=(cfg.d_ff, d))
        p[f"b{i}.b1"] = np.zeros(cfg.d_ff)
        p[f"b{i}.w2"] = rng.normal(0.0, 1.0 / np.sqrt(cfg.d_ff), size=(d, cfg.d_ff))
        p[f"b{i}.b2"] = np.zeros(d)
    p["cls_w"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(cfg.n_classes, d))
    p["cls_b"] = np.zeros(cfg.n_classes)
    return {k: v.astype(dtype) for k, v in p.items()}


class ToyTransformer:
    frozen = True

    def __init__(self, cfg: FMConfig, params: dict | None = None, dtype=nm.F64):
        self.cfg = cfg
        if params is None:
            params = init_fm_params(cfg, dtype)
        expected = set(init_param_shapes(cfg))
        if set(params) != expected:
            raise ValueError(f"parameter names differ from config: {sorted(set(params) ^ expected)}")
        for name, shape in init_param_shapes(cfg).items():
            if params[name].shape != shape:
                raise nm.ShapeError(f"{name}: expected {shape}, got {params[name].shape}")
        self.params = {k: np.ascontiguousarray(v, dtype=dtype) for k, v in params.items()}
        self.dtype = np.dtype(dtype)

    @property
    def d(self):
        return self.cfg.d

    def astype(self, dtype) -> "ToyTransformer":
        return ToyTransformer(self.cfg, self.params, dtype)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------ forward

    def embed(self, tokens) -> np.ndarray:
        """``(B, d, n)`` token plus position embeddings."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        n = tokens.shape[1]
        if n < 1:
            raise ValueError("token sequence must not be empty")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab:
            raise ValueError(f"token ids must lie in [0, {self.cfg.vocab})")
        if n > self.cfg.n_max:
            raise ValueError(f"sequence length {n} exceeds n_max={self.cfg.n_max}")
        x = self.params["tok_emb"][:, tokens]  # (d, B, n)
        return np.transpose(x, (1, 0, 2)) + self.params["pos_emb"][:, :n]

    def _attention(self, i, x, context):
        p, cfg = self.params, self.cfg
        B = x.shape[0]
        wq, wk, wv = p[f"b{i}.wq"], p[f"b{i}.wk"], p[f"b{i}.wv"]
        q = np.matmul(wq[None], x[:, None])
        k = np.matmul(wk[None], context[:, None])
        v = np.matmul(wv[None], context[:, None])
        scale = 1.0 if cfg.scale_mode == "unscaled" else 1.0 / np.sqrt(cfg.d_head)
        heads, probs = kernels.attention_forward(q, k, v, scale)
        merged = heads.reshape(B, cfg.d, x.shape[2])
        out = np.matmul(p[f"b{i}.wo"], merged)
        return out, (x, context, q, k, v, probs, merged, scale)

    def _ffn(self, i, x):
        p = self.params
        pre = np.matmul(p[f"b{i}.w1"], x) + p[f"b{i}.b1"][:, None]
        hid = np.tanh(pre)
        return np.matmul(p[f"b{i}.w2"], hid) + p[f"b{i}.b2"][:, None], hid

    def forward(self, tokens, prefix=None, keep_cache=False):
        """Logits ``(B, n_classes)``; ``prefix`` is ``(B, d, m)`` or None."""
        x = self.embed(tokens)
        B = x.shape[0]
        if prefix is not None:
            prefix = np.asarray(prefix, dtype=self.dtype)
            if prefix.ndim == 2:
                prefix = prefix[None]
            if prefix.shape[0] != B or prefix.shape[1] != self.cfg.d:
                raise nm.ShapeError(f"prefix must be ({B}, {self.cfg.d}, m), got {prefix.shape}")
            if prefix.shape[2] + x.shape[2] > self.cfg.n_max:
                raise ValueError(
                    f"prompt length {prefix.shape[2]} plus sequence length {x.shape[2]} "
                    f"exceeds n_max={self.cfg.n_max}"
                )
        caches = []
        for i in range(self.cfg.n_blocks):
            if i == 0 and prefix is not None and prefix.shape[2]:
                context = np.concatenate([prefix, x], axis=2)
            else:
                context = x
            a, acache = self._attention(i, x, context)
            x1 = x + a
            f, hid = self._ffn(i, x1)
            caches.append((acache, hid))
            x = x1 + f
        if self.cfg.pooling == "mean":
            pooled = x.mean(axis=2)
        else:
            pooled = x[:, :, 0]
        logits = pooled @ self.params["cls_w"].T + self.params["cls_b"]
        if not np.all(np.isfinite(logits)):
            raise nm.NumericError("forward produced non-finite logits")
        if keep_cache:
            m = 0 if prefix is None else prefix.shape[2]
            return logits, (caches, x.shape, m)
        return logits

    # ----------------------------------------------------------- backward

    def backward_prefix(self, cache, dlogits) -> np.ndarray:
        """Gradient of ``sum(dlogits * logits)`` with respect to the prefix."""
        p, cfg = self.params, self.cfg
        caches, shape, m = cache
        B, d, n = shape
        dpooled = dlogits @ p["cls_w"]
        if cfg.pooling == "mean":
            dx = np.repeat(dpooled[:, :, None] / n, n, axis=2)
        else:
            dx = np.zeros(shape, dtype=dpooled.dtype)
            dx[:, :, 0] = dpooled
        dprefix = np.zeros((B, d, m), dtype=dx.dtype)
        for i in reversed(range(cfg.n_blocks)):
            (xin, context, q, k, v, probs, merged, scale), hid = caches[i]
            # x_out = x1 + W2 tanh(W1 x1 + b1) + b2
            dhid = np.matmul(p[f"b{i}.w2"].T, dx)
            dpre = dhid * (1.0 - hid * hid)
            dx1 = dx + np.matmul(p[f"b{i}.w1"].T, dpre)
            # x1 = x + Wo merge(attention)
            dmerged = np.matmul(p[f"b{i}.wo"].T, dx1)
            dheads = dmerged.reshape(B, cfg.n_heads, cfg.d_head, n)
            dq, dk, dv = kernels.attention_backward(q, k, v, probs, scale, dheads)
            dxq = self._unheads(i, "wq", dq)
            dctx = self._unheads(i, "wk", dk) + self._unheads(i, "wv", dv)
            mi = context.shape[2] - n
            if mi:
                dprefix += dctx[:, :, :mi]
            dx = dx1 + dxq + dctx[:, :, mi:]
        return dprefix

    def _unheads(self, i, name, g):
        """``sum_h W_h^T g_h`` for per-head gradients ``g`` of shape (B, H, dH, L)."""
        w = self.params[f"b{i}.{name}"]
        B, H, dh, L = g.shape
        return np.matmul(w.reshape(H * dh, -1).T, g.reshape(B, H * dh, L))


def init_param_shapes(cfg: FMConfig) -> dict:
    d, H, dh = cfg.d, cfg.n_heads, cfg.d_head
    shapes = {"tok_emb": (d, cfg.vocab), "pos_emb": (d, cfg.n_max)}
    for i in range(cfg.n_blocks):
        shapes.update({
            f"b{i}.wq": (H, dh, d), f"b{i}.wk": (H, dh, d), f"b{i}.wv": (H, dh, d),
            f"b{i}.wo": (d, d), f"b{i}.w1": (cfg.d_ff, d), f"b{i}.b1": (cfg.d_ff,),
            f"b{i}.w2": (d, cfg.d_ff), f"b{i}.b2": (d,),
        })
    shapes["cls_w"] = (cfg.n_classes, d)
    shapes["cls_b"] = (cfg.n_classes,)
    return shapes


def zero_shot_forward(fm: ToyTransformer, tokens) -> np.ndarray:
    return fm.forward(tokens)
