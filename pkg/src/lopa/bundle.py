"""Client-side encoder plus the composer, glued to a frozen FM."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import composers as cp
from . import numeric as nm
from .fm import ToyTransformer


@dataclass
class InstanceEncoder:
    """Pooled byte embeddings followed by a linear projection."""

    tok_emb: np.ndarray  # (d_enc, V)
    proj: np.ndarray  # (d_enc, d_enc)
    aggregation: str = "mean"

    def __post_init__(self):
        if self.aggregation not in ("mean", "max"):
            raise ValueError(f"aggregation must be 'mean' or 'max', got {self.aggregation!r}")

    @classmethod
    def init(cls, rng, d_enc, vocab=256, aggregation="mean", dtype=nm.F64):
        return cls(
            rng.normal(0.0, 1.0, size=(d_enc, vocab)).astype(dtype),
            rng.normal(0.0, 1.0 / np.sqrt(d_enc), size=(d_enc, d_enc)).astype(dtype),
            aggregation,
        )

    @property
    def d_enc(self):
        return self.tok_emb.shape[0]

    @property
    def vocab(self):
        return self.tok_emb.shape[1]

    def parameters(self):
        return {"tok_emb": self.tok_emb, "proj": self.proj}

    def forward(self, tokens):
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.shape[1] < 1:
            raise ValueError("cannot encode an empty token sequence")
        if tokens.min() < 0 or tokens.max() >= self.vocab:
            raise ValueError(f"token ids must lie in [0, {self.vocab})")
        emb = self.tok_emb[:, tokens]  # (d_enc, B, n)
        if self.aggregation == "mean":
            pooled = emb.mean(axis=2).T
        else:
            pooled = emb.max(axis=2).T
        return pooled @ self.proj.T, (tokens, pooled)

    def backward(self, cache, dout):
        tokens, pooled = cache
        g_proj = dout.T @ pooled
        dpooled = dout @ self.proj  # (B, d_enc)
        g_emb = np.zeros_like(self.tok_emb)
        B, n = tokens.shape
        if self.aggregation == "mean":
            for b in range(B):
                np.add.at(g_emb.T, tokens[b], dpooled[b] / n)
        else:
            emb = self.tok_emb[:, tokens]
            for b in range(B):
                # ties send the whole gradient to the first maximiser
                arg = emb[:, b, :].argmax(axis=1)
                np.add.at(g_emb, (np.arange(self.d_enc), tokens[b][arg]), dpooled[b])
        return {"tok_emb": g_emb, "proj": g_proj}


def encode(e: InstanceEncoder, tokens) -> np.ndarray:
    out, _ = e.forward(tokens)
    return out[0]


class ModelBundle:
    """Frozen FM, instance encoder and (optional) composer.

    Only composer parameters train, plus the encoder's when
    ``train_encoder`` is set.
    """

    def __init__(self, fm: ToyTransformer, encoder: InstanceEncoder | None = None,
                 composer=None, train_encoder: bool = False):
        if composer is not None and composer.d != fm.d:
            raise nm.ShapeError(f"composer prompt dim {composer.d} != model dim {fm.d}")
        if composer is not None and composer.needs_input and encoder is None:
            raise ValueError("an instance-aware composer needs an encoder")
        self.fm = fm
        self.encoder = encoder
        self.composer = composer
        self.train_encoder = bool(train_encoder and composer is not None and composer.needs_input)

    @property
    def prompt_length(self):
        return 0 if self.composer is None else self.composer.prompt_length

    def trainable(self) -> dict:
        out = {}
        if self.composer is not None:
            out.update({f"composer.{k}": v for k, v in self.composer.parameters().items()})
        if self.train_encoder:
            out.update({f"encoder.{k}": v for k, v in self.encoder.parameters().items()})
        return out

    def prompts(self, tokens):
        """Soft prompts ``(B, d, m)`` for a batch of token sequences."""
        z, _ = self._prompts(tokens)
        return z

    def _prompts(self, tokens):
        tokens = np.atleast_2d(np.asarray(tokens))
        if self.composer is None:
            return None, None
        if not self.composer.needs_input:
            return self.composer.forward(batch=tokens.shape[0])[0], None
        x_enc, ecache = self.encoder.forward(tokens)
        z, ccache = self.composer.forward(x_enc)
        return z, (ecache, ccache)

    def forward(self, tokens) -> np.ndarray:
        z, _ = self._prompts(tokens)
        return self.fm.forward(tokens, z)

    def forward_backward(self, tokens, loss_grad_fn):
        """Run forward, hand the logits to ``loss_grad_fn`` (which returns
        ``(loss, dlogits)``) and backpropagate into the trainable arrays.

        Returns ``(loss, logits, grads)``.
        """
        z, caches = self._prompts(tokens)
        logits, fcache = self.fm.forward(tokens, z, keep_cache=True)
        loss, dlogits = loss_grad_fn(logits)
        grads = {}
        if self.composer is None:
            return loss, logits, grads
        dz = self.fm.backward_prefix(fcache, dlogits)
        if self.composer.needs_input:
            ecache, ccache = caches
            cg, dx_enc = self.composer.backward(ccache, dz)
            if self.train_encoder:
                eg = self.encoder.backward(ecache, dx_enc)
                grads.update({f"encoder.{k}": v for k, v in eg.items()})
        else:
            cg, _ = self.composer.backward(None, dz)
        grads.update({f"composer.{k}": v for k, v in cg.items()})
        return loss, logits, grads


def forward(bundle: ModelBundle, tokens) -> np.ndarray:
    return bundle.forward(tokens)


def build_bundle(fm: ToyTransformer, method: str, m: int = 10, r: int = 2, h: int = 32,
                 d_enc: int = 32, seed: int = 0, n_phm: int = 2, aggregation: str = "mean",
                 activation: str = "tanh", train_encoder: bool = False, std: float | None = 0.02,
                 zs_std: float | None = None) -> ModelBundle:
    """Bundle for one of ``none``, ``pt``, ``additive``, ``phm-additive``,
    ``lopa`` (gate), ``lopa-max`` or ``lopa-concat``."""
    rng = nm.make_rng(seed)
    dtype = fm.dtype
    encoder = InstanceEncoder.init(rng, d_enc, fm.cfg.vocab, aggregation, dtype)
    if method == "none":
        return ModelBundle(fm, encoder, None)
    combine = "gate"
    base = method
    if method.startswith("lopa-"):
        base, combine = "lopa", method.split("-", 1)[1]
    composer = cp.build_composer(base, fm.d, m, h, d_enc, r, n_phm, rng=rng, combine=combine,
                                 std=std, activation=activation, dtype=dtype, zs_std=zs_std)
    return ModelBundle(fm, encoder, composer, train_encoder)


def composer_arrays(composer) -> tuple[dict, dict]:
    """Serializable ``(meta, arrays)`` description of a composer."""
    meta = {"method": composer.method}
    if isinstance(composer, cp.LopaComposer):
        meta.update(combine=composer.combine, activation=composer.mlp_u.activation)
    elif isinstance(composer, cp.InstanceAdditiveComposer):
        meta.update(activation=composer.mlp.activation, out_shape=list(composer.mlp.out_shape))
    return meta, dict(composer.parameters())


def composer_from_arrays(meta: dict, arrays: dict, dtype=nm.F64):
    a = {k: np.asarray(v, dtype=dtype) for k, v in arrays.items()}
    method = meta["method"]
    if method == "pt":
        return cp.TaskOnlyComposer(a["z_s"])

    def mlp(prefix, out_shape):
        return cp.MlpHead(a[f"{prefix}.w_down"], a[f"{prefix}.b_down"], a[f"{prefix}.w_up"],
                          a[f"{prefix}.b_up"], tuple(out_shape), meta.get("activation", "tanh"))

    if method == "additive":
        return cp.InstanceAdditiveComposer(mlp("mlp", meta["out_shape"]))
    if method == "phm-additive":
        head = cp.PhmHead(
            cp.PhmLinear(a["mlp.down.a"], a["mlp.down.b"], a["mlp.down.bias"]),
            cp.PhmLinear(a["mlp.up.a"], a["mlp.up.b"], a["mlp.up.bias"]),
            tuple(meta["out_shape"]), meta.get("activation", "tanh"),
        )
        return cp.PhmAdditiveComposer(head)
    if method.startswith("lopa"):
        d, m = a["z_s"].shape
        r = a["u.b_up"].size // d
        return cp.LopaComposer(a["z_s"], mlp("u", (d, r)), mlp("v", (m, r)), meta["combine"])
    raise ValueError(f"unknown composer method {method!r}")


def save_client(path, encoder: InstanceEncoder, composer) -> None:
    """Store everything a client needs to build prompts: encoder plus composer."""
    from . import checkpoint

    meta, arrays = composer_arrays(composer) if composer is not None else ({"method": "none"}, {})
    meta["aggregation"] = encoder.aggregation
    payload = {f"composer.{k}": v for k, v in arrays.items()}
    payload.update({f"encoder.{k}": v for k, v in encoder.parameters().items()})
    checkpoint.save(path, "client", meta, payload)


def load_client(path, dtype=nm.F64):
    """Inverse of :func:`save_client`; returns ``(encoder, composer)``."""
    from . import checkpoint

    _, meta, arrays = checkpoint.load(path, "client")
    enc = InstanceEncoder(arrays["encoder.tok_emb"].astype(dtype), arrays["encoder.proj"].astype(dtype),
                          meta.get("aggregation", "mean"))
    if meta["method"] == "none":
        return enc, None
    comp = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("composer.")}
    return enc, composer_from_arrays(meta, comp, dtype)
