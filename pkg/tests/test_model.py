import numpy as np
import pytest

from lopa import attention as at
from lopa import numeric as nm
from lopa.bundle import InstanceEncoder, ModelBundle, build_bundle, encode
from lopa.composers import TaskOnlyComposer
from lopa.fm import FMConfig, ToyTransformer, zero_shot_forward


def oracle_logits(fm, tokens, prefix=None):
    """Straight-line forward for one sequence, one query column at a time."""
    p, cfg = fm.params, fm.cfg
    n = len(tokens)
    x = np.stack([p["tok_emb"][:, t] + p["pos_emb"][:, i] for i, t in enumerate(tokens)], axis=1)
    for blk in range(cfg.n_blocks):
        ctx = x if (blk or prefix is None) else np.concatenate([prefix, x], axis=1)
        heads = []
        for h in range(cfg.n_heads):
            w = at.HeadWeights(p[f"b{blk}.wq"][h], p[f"b{blk}.wk"][h], p[f"b{blk}.wv"][h], cfg.scale_mode)
            heads.append(np.concatenate([at.head_forward(w, x[:, i:i + 1], ctx) for i in range(n)], axis=1))
        x = x + p[f"b{blk}.wo"] @ np.concatenate(heads, axis=0)
        hid = np.tanh(p[f"b{blk}.w1"] @ x + p[f"b{blk}.b1"][:, None])
        x = x + p[f"b{blk}.w2"] @ hid + p[f"b{blk}.b2"][:, None]
    return p["cls_w"] @ x.mean(axis=1) + p["cls_b"]


def test_forward_matches_oracle(small_fm, rng):
    tokens = rng.integers(0, 256, size=(3, 7))
    prefix = rng.standard_normal((3, small_fm.d, 4))
    got = small_fm.forward(tokens, prefix)
    for b in range(3):
        assert np.allclose(got[b], oracle_logits(small_fm, tokens[b], prefix[b]), rtol=1e-12, atol=1e-12)
    plain = small_fm.forward(tokens)
    for b in range(3):
        assert np.allclose(plain[b], oracle_logits(small_fm, tokens[b]), rtol=1e-12, atol=1e-12)


def test_unscaled_mode_matches_oracle(rng):
    fm = ToyTransformer(FMConfig(d=8, n_heads=2, d_ff=16, n_max=16, scale_mode="unscaled"))
    tokens = rng.integers(0, 256, size=(1, 5))
    prefix = rng.standard_normal((1, 8, 2))
    assert np.allclose(fm.forward(tokens, prefix)[0], oracle_logits(fm, tokens[0], prefix[0]), rtol=1e-12)


def test_absent_composer_is_zero_shot(small_fm, rng):
    tokens = rng.integers(0, 256, size=(4, 6))
    bundle = ModelBundle(small_fm, None, None)
    assert np.array_equal(bundle.forward(tokens), zero_shot_forward(small_fm, tokens))
    assert np.array_equal(small_fm.forward(tokens, np.zeros((4, small_fm.d, 0))), small_fm.forward(tokens))


def test_zero_prompt_is_not_zero_shot(small_fm, rng):
    # zero vectors add no value bias but still soak up attention mass
    tokens = rng.integers(0, 256, size=(2, 6))
    bundle = ModelBundle(small_fm, None, TaskOnlyComposer(np.zeros((small_fm.d, 3))))
    got = bundle.forward(tokens)
    for b in range(2):
        assert np.allclose(got[b], oracle_logits(small_fm, tokens[b], np.zeros((small_fm.d, 3))), rtol=1e-12)
    assert not np.allclose(got, zero_shot_forward(small_fm, tokens), atol=1e-8)


def test_prefix_gradient_matches_finite_differences(small_fm, rng):
    tokens = rng.integers(0, 256, size=(2, 5))
    prefix = rng.standard_normal((2, small_fm.d, 3))
    up = rng.standard_normal((2, 2))
    _, cache = small_fm.forward(tokens, prefix, keep_cache=True)
    g = small_fm.backward_prefix(cache, up)
    num = np.zeros_like(prefix)
    for idx in np.ndindex(prefix.shape):
        old = prefix[idx]
        prefix[idx] = old + 1e-6
        a = (small_fm.forward(tokens, prefix) * up).sum()
        prefix[idx] = old - 1e-6
        b = (small_fm.forward(tokens, prefix) * up).sum()
        prefix[idx] = old
        num[idx] = (a - b) / 2e-6
    assert np.allclose(g, num, rtol=1e-6, atol=1e-9)


def test_forward_validation(small_fm):
    with pytest.raises(ValueError):
        small_fm.forward(np.array([[1, 256]]))
    with pytest.raises(ValueError):
        small_fm.forward(np.zeros((1, 30), int), np.zeros((1, small_fm.d, 5)))
    with pytest.raises(nm.ShapeError):
        small_fm.forward(np.zeros((1, 3), int), np.zeros((1, small_fm.d + 1, 2)))
    with pytest.raises(nm.ShapeError):
        ModelBundle(small_fm, None, TaskOnlyComposer(np.zeros((5, 2))))


def test_float32_tracks_float64(small_fm, rng):
    tokens = rng.integers(0, 256, size=(2, 6))
    prefix = rng.standard_normal((2, small_fm.d, 3))
    f32 = small_fm.astype(np.float32)
    assert f32.forward(tokens, prefix).dtype == np.float32
    assert np.allclose(f32.forward(tokens, prefix), small_fm.forward(tokens, prefix), rtol=1e-4, atol=1e-4)
    assert f32.digest() != small_fm.digest()


def test_digest_is_stable(small_fm):
    assert small_fm.digest() == ToyTransformer(small_fm.cfg).digest()
    other = ToyTransformer(FMConfig(d=16, n_heads=2, d_ff=32, n_max=32, seed=1))
    assert other.digest() != small_fm.digest()


@pytest.mark.parametrize("aggregation", ["mean", "max"])
def test_encoder_matches_oracle_and_gradient(aggregation, rng):
    enc = InstanceEncoder.init(nm.make_rng(0), 6, 256, aggregation)
    tokens = rng.integers(0, 256, size=(2, 5))
    cols = enc.tok_emb[:, tokens[0]]
    pooled = cols.mean(axis=1) if aggregation == "mean" else cols.max(axis=1)
    assert np.allclose(encode(enc, tokens[0]), enc.proj @ pooled, rtol=1e-13)
    up = rng.standard_normal((2, 6))
    out, cache = enc.forward(tokens)
    grads = enc.backward(cache, up)
    for name, arr in enc.parameters().items():
        num = np.zeros_like(arr)
        touched = np.unique(tokens) if name == "tok_emb" else None
        idxs = [(i, t) for i in range(6) for t in touched] if touched is not None else list(np.ndindex(arr.shape))
        for idx in idxs:
            old = arr[idx]
            arr[idx] = old + 1e-6
            a = (enc.forward(tokens)[0] * up).sum()
            arr[idx] = old - 1e-6
            b = (enc.forward(tokens)[0] * up).sum()
            arr[idx] = old
            num[idx] = (a - b) / 2e-6
        assert np.allclose(grads[name], num, rtol=1e-6, atol=1e-9), name


def test_encoder_rejects_bad_input():
    enc = InstanceEncoder.init(nm.make_rng(0), 4)
    with pytest.raises(ValueError):
        enc.forward(np.zeros((1, 0), int))
    with pytest.raises(ValueError):
        enc.forward(np.array([300]))
    with pytest.raises(ValueError):
        InstanceEncoder.init(nm.make_rng(0), 4, aggregation="sum")


@pytest.mark.parametrize("method,length", [("none", 0), ("pt", 4), ("additive", 4), ("lopa", 4),
                                           ("lopa-max", 4), ("lopa-concat", 8), ("phm-additive", 4)])
def test_bundle_prompt_shapes(small_fm, method, length, rng):
    b = build_bundle(small_fm, method, m=4, r=2, h=8, d_enc=8, n_phm=2)
    tokens = rng.integers(0, 256, size=(3, 5))
    assert b.prompt_length == length
    z = b.prompts(tokens)
    assert (z is None and length == 0) or z.shape == (3, small_fm.d, length)
    assert b.forward(tokens).shape == (3, 2)


def test_task_only_bundle_never_trains_encoder(small_fm):
    b = build_bundle(small_fm, "pt", m=4, train_encoder=True)
    assert not b.train_encoder
    assert set(b.trainable()) == {"composer.z_s"}
    b = build_bundle(small_fm, "lopa", m=4, r=2, train_encoder=True)
    assert "encoder.proj" in b.trainable()
