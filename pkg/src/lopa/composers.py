"""Soft-prompt composers and their hand-written gradients.

A composer maps a pooled instance encoding ``x_enc`` (shape ``(B, d_enc)``)
to a batch of prompts ``Z`` of shape ``(B, d, m_eff)``.  Every composer
exposes the same small surface:

``parameters()``
    dict of named trainable arrays (the live arrays, updated in place);
``forward(x_enc)``
    ``(Z, cache)``;
``backward(cache, dZ)``
    ``(grads, dx_enc)`` where ``grads`` mirrors ``parameters()``.

Single-instance helpers (:func:`compose_lopa`, :func:`grad_lopa`, ...) wrap
the batched path for a 1-D encoding.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm

COMBINES = ("gate", "max", "concat")
ACTIVATIONS = ("tanh", "relu")


def _act(name, pre):
    if name == "tanh":
        return np.tanh(pre)
    if name == "relu":
        return np.maximum(pre, 0.0)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, pre, post):
    if name == "tanh":
        return 1.0 - post * post
    return (pre > 0.0).astype(pre.dtype)


def _as_batch(x_enc, d_enc):
    x = np.asarray(x_enc)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != d_enc:
        raise nm.ShapeError(f"x_enc must have length {d_enc}, got shape {np.shape(x_enc)}")
    return x


@dataclass
class MlpHead:
    """Down-projection, activation, up-projection, reshaped to ``out_shape``."""

    w_down: np.ndarray  # (h, d_enc)
    b_down: np.ndarray  # (h,)
    w_up: np.ndarray  # (out, h)
    b_up: np.ndarray  # (out,)
    out_shape: tuple
    activation: str = "tanh"

    def __post_init__(self):
        h, d_enc = self.w_down.shape
        out = int(np.prod(self.out_shape))
        if self.b_down.shape != (h,) or self.w_up.shape != (out, h) or self.b_up.shape != (out,):
            raise nm.ShapeError(
                f"inconsistent MLP head shapes: w_down {self.w_down.shape}, "
                f"b_down {self.b_down.shape}, w_up {self.w_up.shape}, b_up {self.b_up.shape} "
                f"for out_shape {self.out_shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(cls, rng, d_enc, h, out_shape, std=0.02, activation="tanh", dtype=nm.F64):
        """Normal weights with ``std`` (``None`` means 1/sqrt(fan_in)), zero biases."""
        out = int(np.prod(out_shape))
        s_down = 1.0 / np.sqrt(d_enc) if std is None else std
        s_up = 1.0 / np.sqrt(h) if std is None else std
        return cls(
            w_down=rng.normal(0.0, s_down, size=(h, d_enc)).astype(dtype),
            b_down=np.zeros(h, dtype=dtype),
            w_up=rng.normal(0.0, s_up, size=(out, h)).astype(dtype),
            b_up=np.zeros(out, dtype=dtype),
            out_shape=tuple(out_shape),
            activation=activation,
        )

    @property
    def d_enc(self):
        return self.w_down.shape[1]

    def parameters(self):
        return {"w_down": self.w_down, "b_down": self.b_down, "w_up": self.w_up, "b_up": self.b_up}

    def forward(self, x):
        x = _as_batch(x, self.d_enc)
        pre = x @ self.w_down.T + self.b_down
        hid = _act(self.activation, pre)
        y = hid @ self.w_up.T + self.b_up
        return y.reshape((x.shape[0],) + self.out_shape), (x, pre, hid)

    def backward(self, cache, gy):
        x, pre, hid = cache
        gy = gy.reshape(x.shape[0], -1)
        g_hid = gy @ self.w_up
        g_pre = g_hid * _act_grad(self.activation, pre, hid)
        grads = {
            "w_down": g_pre.T @ x,
            "b_down": g_pre.sum(axis=0),
            "w_up": gy.T @ hid,
            "b_up": gy.sum(axis=0),
        }
        return grads, g_pre @ self.w_down


def mlp_forward(head: MlpHead, x_enc) -> np.ndarray:
    """Single-instance MLP output in its declared shape."""
    y, _ = head.forward(x_enc)
    return y[0]


def phm_linear(a_list, b_list, x) -> np.ndarray:
    """``(sum_i A_i kron B_i) @ x`` without forming the Kronecker sum.

    With ``A_i`` of shape ``(p, q)`` and ``B_i`` of shape ``(s, t)``, ``x``
    of length ``q*t`` is viewed row-major as ``X`` (``q x t``) and the result
    is ``sum_i A_i X B_i^T`` flattened row-major (length ``p*s``).  A leading
    batch axis on ``x`` is allowed.
    """
    if len(a_list) == 0 or len(a_list) != len(b_list):
        raise nm.ShapeError(f"need matching non-empty factor lists, got {len(a_list)} and {len(b_list)}")
    p, q = a_list[0].shape
    s, t = b_list[0].shape
    for a, b in zip(a_list, b_list):
        if a.shape != (p, q) or b.shape != (s, t):
            raise nm.ShapeError(f"factor shapes must agree: {a.shape} vs {(p, q)}, {b.shape} vs {(s, t)}")
    x = np.asarray(x)
    if x.shape[-1] != q * t:
        raise nm.ShapeError(f"input length {x.shape[-1]} does not match {q}*{t}")
    xm = x.reshape(x.shape[:-1] + (q, t))
    y = sum(a @ xm @ b.T for a, b in zip(a_list, b_list))
    return y.reshape(x.shape[:-1] + (p * s,))


def phm_materialize(a_list, b_list) -> np.ndarray:
    return sum(np.kron(a, b) for a, b in zip(a_list, b_list))


@dataclass
class PhmLinear:
    """Linear layer whose weight is a sum of ``n`` Kronecker products."""

    a: np.ndarray  # (n, n, n)
    b: np.ndarray  # (n, out/n, in/n)
    bias: np.ndarray  # (out,)

    @classmethod
    def init(cls, rng, n, d_in, d_out, std=0.02, dtype=nm.F64):
        if d_in % n or d_out % n:
            raise nm.ShapeError(f"PHM n={n} must divide in={d_in} and out={d_out}")
        std = np.sqrt(n / d_in) if std is None else std
        return cls(
            a=rng.normal(0.0, 1.0 / n, size=(n, n, n)).astype(dtype),
            b=rng.normal(0.0, std, size=(n, d_out // n, d_in // n)).astype(dtype),
            bias=np.zeros(d_out, dtype=dtype),
        )

    @property
    def n(self):
        return self.a.shape[0]

    def parameters(self):
        return {"a": self.a, "b": self.b, "bias": self.bias}

    def forward(self, x):
        return phm_linear(list(self.a), list(self.b), x) + self.bias

    def backward(self, x, gy):
        n, q, t = self.n, self.a.shape[2], self.b.shape[2]
        p, s = self.a.shape[1], self.b.shape[1]
        xm = x.reshape(-1, q, t)
        gm = gy.reshape(-1, p, s)
        ga = np.empty_like(self.a)
        gb = np.empty_like(self.b)
        gx = np.zeros_like(xm)
        for i in range(n):
            a, b = self.a[i], self.b[i]
            # y = A X B^T per sample
            ga[i] = np.einsum("nps,st,nqt->pq", gm, b, xm)
            gb[i] = np.einsum("nps,pq,nqt->st", gm, a, xm)
            gx += a.T @ gm @ b
        grads = {"a": ga, "b": gb, "bias": gy.sum(axis=0)}
        return grads, gx.reshape(x.shape)


@dataclass
class PhmHead:
    """MLP head with both projections replaced by PHM layers."""

    down: PhmLinear
    up: PhmLinear
    out_shape: tuple
    activation: str = "tanh"

    @classmethod
    def init(cls, rng, n, d_enc, h, out_shape, std=0.02, activation="tanh", dtype=nm.F64):
        out = int(np.prod(out_shape))
        return cls(
            PhmLinear.init(rng, n, d_enc, h, std, dtype),
            PhmLinear.init(rng, n, h, out, std, dtype),
            tuple(out_shape),
            activation,
        )

    @property
    def d_enc(self):
        return self.down.b.shape[2] * self.down.n

    def parameters(self):
        out = {f"down.{k}": v for k, v in self.down.parameters().items()}
        out.update({f"up.{k}": v for k, v in self.up.parameters().items()})
        return out

    def forward(self, x):
        x = _as_batch(x, self.d_enc)
        pre = self.down.forward(x)
        hid = _act(self.activation, pre)
        y = self.up.forward(hid)
        return y.reshape((x.shape[0],) + self.out_shape), (x, pre, hid)

    def backward(self, cache, gy):
        x, pre, hid = cache
        gy = gy.reshape(x.shape[0], -1)
        g_up, g_hid = self.up.backward(hid, gy)
        g_pre = g_hid * _act_grad(self.activation, pre, hid)
        g_down, gx = self.down.backward(x, g_pre)
        grads = {f"down.{k}": v for k, v in g_down.items()}
        grads.update({f"up.{k}": v for k, v in g_up.items()})
        return grads, gx


def _prefixed(prefix, d):
    return {f"{prefix}.{k}": v for k, v in d.items()}


@dataclass
class TaskOnlyComposer:
    """One shared prompt for every instance (plain prompt tuning)."""

    z_s: np.ndarray
    needs_input = False
    method = "pt"

    @classmethod
    def init(cls, rng, d, m, std=0.02, dtype=nm.F64):
        return cls(rng.normal(0.0, std, size=(d, m)).astype(dtype))

    @property
    def d(self):
        return self.z_s.shape[0]

    @property
    def prompt_length(self):
        return self.z_s.shape[1]

    def parameters(self):
        return {"z_s": self.z_s}

    def forward(self, x_enc=None, batch=None):
        if batch is None:
            batch = 1 if x_enc is None else np.atleast_2d(x_enc).shape[0]
        return np.broadcast_to(self.z_s, (batch,) + self.z_s.shape).copy(), None

    def backward(self, cache, dz):
        return {"z_s": dz.sum(axis=0)}, None


@dataclass
class InstanceAdditiveComposer:
    """Whole prompt generated from the instance by one MLP (the bias of
    the up-projection plays the role of a shared prompt)."""

    mlp: MlpHead
    needs_input = True
    method = "additive"

    @classmethod
    def init(cls, rng, d, m, d_enc, h, std=0.02, activation="tanh", dtype=nm.F64):
        return cls(MlpHead.init(rng, d_enc, h, (d, m), std, activation, dtype))

    @property
    def d(self):
        return self.mlp.out_shape[0]

    @property
    def prompt_length(self):
        return self.mlp.out_shape[1]

    def parameters(self):
        return _prefixed("mlp", self.mlp.parameters())

    def forward(self, x_enc):
        return self.mlp.forward(x_enc)

    def backward(self, cache, dz):
        grads, dx = self.mlp.backward(cache, dz)
        return _prefixed("mlp", grads), dx


@dataclass
class PhmAdditiveComposer(InstanceAdditiveComposer):
    """Additive composer whose generator uses PHM layers."""

    mlp: PhmHead
    method = "phm-additive"

    @classmethod
    def init(cls, rng, d, m, d_enc, h, n_phm=2, std=0.02, activation="tanh", dtype=nm.F64):
        return cls(PhmHead.init(rng, n_phm, d_enc, h, (d, m), std, activation, dtype))


@dataclass
class LopaComposer:
    """Shared prompt ``z_s`` combined with a rank-``r`` instance prompt
    ``u v^T``; ``u`` and ``v`` come from two MLP heads.

    ``combine`` selects how the two parts meet: ``gate`` multiplies ``z_s``
    by ``sigmoid(u v^T)``, ``max`` takes the elementwise maximum and
    ``concat`` appends the instance prompt after the shared one (doubling
    the prompt length).
    """

    z_s: np.ndarray
    mlp_u: MlpHead
    mlp_v: MlpHead
    combine: str = "gate"
    needs_input = True

    def __post_init__(self):
        d, m = self.z_s.shape
        r = self.rank
        if r < 1 or r > min(d, m):
            raise ValueError(f"rank must satisfy 1 <= r <= min(d, m) = {min(d, m)}, got {r}")
        if self.mlp_u.out_shape != (d, r) or self.mlp_v.out_shape != (m, r):
            raise nm.ShapeError(
                f"MLP heads produce {self.mlp_u.out_shape} and {self.mlp_v.out_shape}, "
                f"expected {(d, r)} and {(m, r)}"
            )
        if self.combine not in COMBINES:
            raise ValueError(f"combine must be one of {COMBINES}, got {self.combine!r}")

    @classmethod
    def init(cls, rng, d, m, d_enc, h, r, combine="gate", std=0.02, activation="tanh",
             dtype=nm.F64, zs_std=None):
        z_s = rng.normal(0.0, std if zs_std is None else zs_std, size=(d, m)).astype(dtype)
        mlp_u = MlpHead.init(rng, d_enc, h, (d, r), std, activation, dtype)
        mlp_v = MlpHead.init(rng, d_enc, h, (m, r), std, activation, dtype)
        return cls(z_s, mlp_u, mlp_v, combine)

    @property
    def method(self):
        return f"lopa-{self.combine}"

    @property
    def d(self):
        return self.z_s.shape[0]

    @property
    def rank(self):
        return self.mlp_u.out_shape[1]

    @property
    def prompt_length(self):
        m = self.z_s.shape[1]
        return 2 * m if self.combine == "concat" else m

    def parameters(self):
        out = {"z_s": self.z_s}
        out.update(_prefixed("u", self.mlp_u.parameters()))
        out.update(_prefixed("v", self.mlp_v.parameters()))
        return out

    def instance_part(self, x_enc):
        """``Z_I = u v^T`` with the caches needed to backpropagate it."""
        u, cu = self.mlp_u.forward(x_enc)
        v, cv = self.mlp_v.forward(x_enc)
        return u @ np.swapaxes(v, 1, 2), (u, v, cu, cv)

    def forward(self, x_enc):
        zi, parts = self.instance_part(x_enc)
        if self.combine == "gate":
            gate = nm.sigmoid(zi)
            return self.z_s * gate, (zi, gate, parts)
        if self.combine == "max":
            keep = self.z_s >= zi  # ties go to z_s
            return np.where(keep, self.z_s, zi), (zi, keep, parts)
        zs = np.broadcast_to(self.z_s, zi.shape)
        return np.concatenate([zs, zi], axis=2), (zi, None, parts)

    def split_grad(self, cache, dz):
        """Gradients reaching ``z_s`` (summed over the batch) and ``Z_I``."""
        zi, aux, _ = cache
        if self.combine == "gate":
            g_zs = (dz * aux).sum(axis=0)
            g_zi = dz * self.z_s * aux * (1.0 - aux)
        elif self.combine == "max":
            g_zs = np.where(aux, dz, 0.0).sum(axis=0)
            g_zi = np.where(aux, 0.0, dz)
        else:
            m = self.z_s.shape[1]
            g_zs = dz[:, :, :m].sum(axis=0)
            g_zi = dz[:, :, m:]
        return g_zs, g_zi

    def backward(self, cache, dz):
        g_zs, g_zi = self.split_grad(cache, dz)
        u, v, cu, cv = cache[2]
        g_u = g_zi @ v
        g_v = np.swapaxes(g_zi, 1, 2) @ u
        gu, dxu = self.mlp_u.backward(cu, g_u)
        gv, dxv = self.mlp_v.backward(cv, g_v)
        grads = {"z_s": g_zs}
        grads.update(_prefixed("u", gu))
        grads.update(_prefixed("v", gv))
        return grads, dxu + dxv


def compose_task_only(c: TaskOnlyComposer) -> np.ndarray:
    return c.z_s


def compose_additive(c: InstanceAdditiveComposer, x_enc) -> np.ndarray:
    z, _ = c.forward(x_enc)
    return z[0]


def compose_lopa(c: LopaComposer, x_enc) -> np.ndarray:
    if c.combine != "gate":
        raise ValueError(f"compose_lopa needs combine='gate', got {c.combine!r}")
    z, _ = c.forward(x_enc)
    return z[0]


def compose_variant(c: LopaComposer, x_enc) -> np.ndarray:
    if c.combine not in ("max", "concat"):
        raise ValueError(f"compose_variant needs combine in ('max', 'concat'), got {c.combine!r}")
    z, _ = c.forward(x_enc)
    return z[0]


def grad_lopa(c: LopaComposer, x_enc, upstream) -> dict:
    """Gradients of ``sum(upstream * Z)`` for a single instance.

    Returns ``g_zs`` and ``g_zi`` (the two closed-form matrix gradients) and
    ``g_mlp_u`` / ``g_mlp_v`` dicts for the two generator heads.
    """
    upstream = np.asarray(upstream)
    if upstream.ndim == 2:
        upstream = upstream[None]
    _, cache = c.forward(x_enc)
    if upstream.shape[1:] != (c.d, c.prompt_length):
        raise nm.ShapeError(f"upstream must be {(c.d, c.prompt_length)}, got {upstream.shape[1:]}")
    g_zs, g_zi = c.split_grad(cache, upstream)
    grads, _ = c.backward(cache, upstream)
    return {
        "g_zs": g_zs,
        "g_zi": g_zi[0],
        "g_mlp_u": {k[2:]: v for k, v in grads.items() if k.startswith("u.")},
        "g_mlp_v": {k[2:]: v for k, v in grads.items() if k.startswith("v.")},
    }


# ---------------------------------------------------------------- counting

METHODS = ("pt", "additive", "lopa", "phm-additive")


def _mlp_count(d_enc, h, out):
    return d_enc * h + h + h * out + out


def _phm_count(n, d_in, d_out):
    return n**3 + (d_in * d_out) // n + d_out


def closed_form_param_count(method, d, m, h=0, d_enc=0, r=0, n_phm=1) -> int:
    """Closed-form trainable-parameter count of a composer."""
    if method == "pt":
        return d * m
    if method == "additive":
        return _mlp_count(d_enc, h, d * m)
    if method == "lopa":
        return d * m + _mlp_count(d_enc, h, d * r) + _mlp_count(d_enc, h, m * r)
    if method == "phm-additive":
        return _phm_count(n_phm, d_enc, h) + _phm_count(n_phm, h, d * m)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def build_composer(method, d, m, h=0, d_enc=0, r=0, n_phm=1, rng=None, combine="gate",
                   std=0.02, activation="tanh", dtype=nm.F64, zs_std=None):
    """Fresh composer.  ``std`` initialises generator weights (``None`` for
    fan-in scaling) and, unless ``zs_std`` is given, the shared prompt."""
    rng = nm.make_rng(0) if rng is None else rng
    if zs_std is None:
        zs_std = 0.02 if std is None else std
    if method == "pt":
        return TaskOnlyComposer.init(rng, d, m, zs_std, dtype)
    if method == "additive":
        return InstanceAdditiveComposer.init(rng, d, m, d_enc, h, std, activation, dtype)
    if method == "lopa":
        return LopaComposer.init(rng, d, m, d_enc, h, r, combine, std, activation, dtype, zs_std)
    if method == "phm-additive":
        return PhmAdditiveComposer.init(rng, d, m, d_enc, h, n_phm, std, activation, dtype)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def count_parameters(composer) -> int:
    return int(sum(p.size for p in composer.parameters().values()))


def param_count(method, d, m, h=0, d_enc=0, r=0, n_phm=1) -> int:
    """Trainable parameters of a freshly constructed composer, by enumeration."""
    # float32 halves the allocation for large dims; only sizes matter
    c = build_composer(method, d, m, h, d_enc, r, n_phm, dtype=nm.F32)
    return count_parameters(c)
