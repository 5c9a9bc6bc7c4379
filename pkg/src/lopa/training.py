"""Loss, optimiser, synthetic tasks, training loop and gradient checking."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import numeric as nm
from .bundle import ModelBundle, build_bundle
from .composers import closed_form_param_count
from .fm import FMConfig, ToyTransformer

log = logging.getLogger(__name__)


class TrainingDiverged(nm.NumericError):
    pass


# ------------------------------------------------------------------- loss

def cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient with respect to logits.

    Accepts a single logit vector with an integer label, or a batch.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    if single:
        logits = logits[None]
        labels = np.asarray([labels])
    labels = np.asarray(labels)
    n_classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"label out of range for {n_classes} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    B = logits.shape[0]
    idx = np.arange(B)
    loss = float(np.mean(logz - shifted[idx, labels]))
    grad = np.exp(shifted - logz[:, None])
    grad[idx, labels] -= 1.0
    grad /= B
    return loss, (grad[0] if single else grad)


# -------------------------------------------------------------- optimiser

class Adam:
    def __init__(self, params: dict, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class Sgd:
    def __init__(self, params: dict, lr):
        self.params, self.lr = params, lr

    def step(self, grads):
        for k, p in self.params.items():
            p -= self.lr * grads[k]


# ------------------------------------------------------------------ tasks

MARK = 0x41  # 'A'
PIPE = 0x7C  # '|', marker for parity-of-marked-byte
FILLER = np.arange(0x61, 0x7B)  # 'a'..'z'
KEYS = np.arange(0x80, 0x88)
CONTENT = np.arange(0xA0, 0xA8)
TASK_NAMES = ("task-signal", "instance-signal", "mixed", "parity-of-marked-byte")


@dataclass
class Task:
    """A labelled binary classification problem over byte sequences.

    ``task-signal``
        label is 1 iff the byte ``A`` occurs.  One global pattern, so a
        single shared prompt can encode it.
    ``instance-signal``
        position 0 holds a key byte and position 1 a content byte, each
        carrying a hidden bit from a random balanced table; label is their
        XOR.  Each key bit is 0 for exactly half the keys and the content
        bits are balanced, so for any fixed prompt the label is independent
        of any single byte; only an input-dependent prompt can route it.
    ``mixed``
        label is (``A`` occurs) XOR (key bit of position 0).
    ``parity-of-marked-byte``
        label is the low bit of the byte following a ``|`` marker.

    Train and test draw from disjoint PRNG streams; test sequences that
    also occur in the training set are dropped.
    """

    name: str
    seed: int
    n_train: int
    n_test: int
    seq_len: int
    train_tokens: np.ndarray = field(repr=False)
    train_labels: np.ndarray = field(repr=False)
    test_tokens: np.ndarray = field(repr=False)
    test_labels: np.ndarray = field(repr=False)
    key_bits: np.ndarray = field(repr=False, default=None)
    content_bits: np.ndarray = field(repr=False, default=None)


def _balanced_bits(rng, n):
    bits = np.zeros(n, dtype=np.int64)
    bits[rng.permutation(n)[: n // 2]] = 1
    return bits


def _sample(name, rng, count, seq_len, key_bits, content_bits):
    toks = rng.choice(FILLER, size=(count, seq_len))
    if name == "task-signal" or name == "mixed":
        has = rng.integers(0, 2, size=count)
        lo = 0 if name == "task-signal" else 1
        pos = rng.integers(lo, seq_len, size=count)
        rows = np.nonzero(has)[0]
        toks[rows, pos[rows]] = MARK
        if name == "task-signal":
            return toks, has
        kidx = rng.integers(0, len(KEYS), size=count)
        toks[:, 0] = KEYS[kidx]
        return toks, has ^ key_bits[kidx]
    if name == "instance-signal":
        kidx = rng.integers(0, len(KEYS), size=count)
        cidx = rng.integers(0, len(CONTENT), size=count)
        toks[:, 0] = KEYS[kidx]
        toks[:, 1] = CONTENT[cidx]
        return toks, key_bits[kidx] ^ content_bits[cidx]
    # parity-of-marked-byte
    pos = rng.integers(0, seq_len - 1, size=count)
    payload = rng.integers(0x30, 0x3A, size=count)  # digits '0'..'9'
    idx = np.arange(count)
    toks[idx, pos] = PIPE
    toks[idx, pos + 1] = payload
    return toks, payload & 1


def make_task(name: str, seed: int = 0, n_train: int = 512, n_test: int = 256,
              seq_len: int = 12) -> Task:
    if name not in TASK_NAMES:
        raise ValueError(f"unknown task {name!r}; expected one of {TASK_NAMES}")
    rule_rng = nm.make_rng([seed, 0])
    key_bits = _balanced_bits(rule_rng, len(KEYS))
    content_bits = _balanced_bits(rule_rng, len(CONTENT))
    train_rng = nm.make_rng([seed, 1])
    test_rng = nm.make_rng([seed, 2])
    xtr, ytr = _sample(name, train_rng, n_train, seq_len, key_bits, content_bits)
    xte, yte = _sample(name, test_rng, n_test, seq_len, key_bits, content_bits)
    seen = {row.tobytes() for row in xtr}
    keep = np.array([row.tobytes() not in seen for row in xte], dtype=bool)
    return Task(name, seed, n_train, int(keep.sum()), seq_len,
                xtr, ytr, xte[keep], yte[keep], key_bits, content_bits)


# ---------------------------------------------------------------- configs

METHOD_NAMES = ("none", "pt", "additive", "phm-additive", "lopa", "lopa-max", "lopa-concat")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "lopa"
    task: str = "instance-signal"
    seed: int = 0
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: int = 10
    r: int = 2
    h: int = 32
    d_enc: int = 32
    n_phm: int = 2
    train_encoder: bool = True
    # None means 1/sqrt(fan_in) for generator weights
    mlp_init_std: float | None = None
    prompt_init_std: float = 1.0
    n_train: int = 1024
    n_test: int = 256
    seq_len: int = 12
    # frozen model
    d: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    d_ff: int = 128
    n_max: int = 64
    vocab: int = 256
    fm_seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.method not in METHOD_NAMES:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHOD_NAMES}")
        if self.method != "none" and self.m < 1:
            raise ValueError(f"prompt methods need m >= 1, got {self.m}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def fm_config(self) -> FMConfig:
        return FMConfig(vocab=self.vocab, d=self.d, n_heads=self.n_heads, n_blocks=self.n_blocks,
                        d_ff=self.d_ff, n_max=self.n_max, seed=self.fm_seed)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def method_param_count(cfg: TrainConfig) -> int:
    """Composer parameters for the configured method (0 for ``none``)."""
    if cfg.method == "none":
        return 0
    base = "lopa" if cfg.method.startswith("lopa") else cfg.method
    return closed_form_param_count(base, cfg.d, cfg.m, cfg.h, cfg.d_enc, cfg.r, cfg.n_phm)


def encoder_param_count(cfg: TrainConfig) -> int:
    return cfg.d_enc * cfg.vocab + cfg.d_enc * cfg.d_enc


def bundle_for(cfg: TrainConfig, fm: ToyTransformer | None = None) -> ModelBundle:
    fm = ToyTransformer(cfg.fm_config()) if fm is None else fm
    return build_bundle(fm, cfg.method, m=cfg.m, r=cfg.r, h=cfg.h, d_enc=cfg.d_enc,
                        seed=cfg.seed, n_phm=cfg.n_phm, train_encoder=cfg.train_encoder,
                        std=cfg.mlp_init_std, zs_std=cfg.prompt_init_std)


# ---------------------------------------------------------------- reports

@dataclass
class RunReport:
    config: dict
    seed: int
    method: str
    task: str
    epoch_loss: list
    initial_loss: float
    initial_train_acc: float
    train_acc: float
    test_acc: float
    final_train_loss: float
    param_count: int
    trained_scalars: int
    moved_scalars: int  # composer scalars that differ after training
    fm_digest: str
    wall_clock: float = field(default=0.0, compare=False)

    def to_json_dict(self):
        return asdict(self)

    def epoch_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss"])
        for i, loss in enumerate(self.epoch_loss, start=1):
            w.writerow([i, repr(loss)])
        return buf.getvalue()


def evaluate(bundle: ModelBundle, tokens, labels, batch_size=256):
    losses, correct = 0.0, 0
    for s in range(0, len(tokens), batch_size):
        xb, yb = tokens[s:s + batch_size], labels[s:s + batch_size]
        logits = bundle.forward(xb)
        loss, _ = cross_entropy(logits, yb)
        losses += loss * len(xb)
        correct += int(np.sum(logits.argmax(axis=1) == yb))
    return losses / len(tokens), correct / len(tokens)


def train(bundle: ModelBundle, task: Task, cfg: TrainConfig) -> RunReport:
    """Fit the trainable arrays of ``bundle`` on ``task``; the FM stays frozen."""
    t0 = time.perf_counter()
    digest = bundle.fm.digest()
    params = bundle.trainable()
    before = {k: v.copy() for k, v in params.items()}
    if cfg.optimizer == "adam":
        opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    else:
        opt = Sgd(params, cfg.lr)
    rng = nm.make_rng([cfg.seed, 7])
    init_loss, init_acc = evaluate(bundle, task.train_tokens, task.train_labels)
    epoch_loss = []
    n = len(task.train_tokens)
    step = 0
    for epoch in range(cfg.epochs if params else 0):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            yb = task.train_labels[idx]
            loss, _, grads = bundle.forward_backward(task.train_tokens[idx],
                                                     lambda lg: cross_entropy(lg, yb))
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at step {step}")
            for k, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise TrainingDiverged(f"non-finite gradient for {k} at step {step}")
            opt.step(grads)
            total += loss * len(idx)
            step += 1
        epoch_loss.append(total / n)
        log.debug("epoch %d loss %.5f", epoch + 1, epoch_loss[-1])
    if bundle.fm.digest() != digest:
        raise AssertionError("frozen model weights changed during training")
    moved = sum(int(np.sum(params[k] != before[k])) for k in params if k.startswith("composer."))
    log.debug("%d composer scalars moved", moved)
    final_loss, train_acc = evaluate(bundle, task.train_tokens, task.train_labels)
    _, test_acc = evaluate(bundle, task.test_tokens, task.test_labels)
    return RunReport(
        config=cfg.to_dict(), seed=cfg.seed, method=cfg.method, task=task.name,
        epoch_loss=epoch_loss, initial_loss=init_loss, initial_train_acc=init_acc,
        train_acc=train_acc, test_acc=test_acc, final_train_loss=final_loss,
        param_count=method_param_count(cfg),
        trained_scalars=int(sum(v.size for v in params.values())),
        moved_scalars=moved, fm_digest=digest, wall_clock=time.perf_counter() - t0,
    )


def run(cfg: TrainConfig, fm: ToyTransformer | None = None) -> RunReport:
    task = make_task(cfg.task, cfg.seed, cfg.n_train, cfg.n_test, cfg.seq_len)
    return train(bundle_for(cfg, fm), task, cfg)


# ------------------------------------------------------------- gradcheck

@dataclass
class GradcheckReport:
    max_rel_error: float
    per_param: dict
    n_scalars: int
    samples: int


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradcheck(bundle: ModelBundle, task: Task, samples: int = 4, step: float = 1e-4,
              floor: float = 1e-6) -> GradcheckReport:
    """Central differences over every trainable scalar, against backprop."""
    if bundle.fm.dtype != np.float64:
        raise ValueError("gradcheck needs a float64 bundle")
    tokens = task.train_tokens[:samples]
    labels = task.train_labels[:samples]

    def loss_fn():
        return cross_entropy(bundle.forward(tokens), labels)[0]

    _, _, grads = bundle.forward_backward(tokens, lambda lg: cross_entropy(lg, labels))
    params = bundle.trainable()
    per_param = {}
    total = 0
    for name, p in params.items():
        num = np.zeros_like(p)
        flat, nflat = p.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * step)
        per_param[name] = float(relative_error(grads[name], num, floor).max()) if p.size else 0.0
        total += p.size
    worst = max(per_param.values()) if per_param else 0.0
    return GradcheckReport(worst, per_param, total, len(tokens))


# ---------------------------------------------------------------- ablation

ABLATION_FIELDS = ("method", "m", "r", "seed", "param_count", "train_acc", "test_acc",
                   "final_train_loss", "wall_clock")


def ablate(base: TrainConfig, methods=None, ms=None, rs=None, seeds=None) -> list:
    """Cross product of runs over the given sweep lists."""
    methods = [base.method] if methods is None else list(methods)
    ms = [base.m] if ms is None else list(ms)
    rs = [base.r] if rs is None else list(rs)
    seeds = [base.seed] if seeds is None else list(seeds)
    for name, lst in (("methods", methods), ("ms", ms), ("rs", rs), ("seeds", seeds)):
        if not lst:
            raise ValueError(f"sweep list {name} is empty")
    fm = ToyTransformer(base.fm_config())
    reports = []
    for method in methods:
        for m in ms:
            for r in rs:
                for seed in seeds:
                    cfg = replace(base, method=method, m=m, r=min(r, m), seed=seed)
                    reports.append(run(cfg, fm))
    return reports


def rank_sweep_shape(reports, gap=0.15) -> dict:
    """Check a rank sweep: median test accuracy should not drop as ``r``
    grows, unless the larger rank overfits (median train-test gap > ``gap``).

    Returns ``{"ok", "by_rank", "overfit"}``.
    """
    by_rank = {}
    for rep in reports:
        by_rank.setdefault(rep.config["r"], []).append(rep)
    ranks = sorted(by_rank)
    acc = {r: float(np.median([x.test_acc for x in by_rank[r]])) for r in ranks}
    overfit = {r: float(np.median([x.train_acc - x.test_acc for x in by_rank[r]])) > gap for r in ranks}
    ok = all(acc[b] >= acc[a] or overfit[b] for a, b in zip(ranks, ranks[1:]))
    return {"ok": ok, "by_rank": acc, "overfit": overfit}


def ablation_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_FIELDS)
    for rep in reports:
        c = rep.config
        w.writerow([rep.method, c["m"], c["r"], rep.seed, rep.param_count, rep.train_acc,
                    rep.test_acc, rep.final_train_loss, f"{rep.wall_clock:.3f}"])
    return buf.getvalue()
