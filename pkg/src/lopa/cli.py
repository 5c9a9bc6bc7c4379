"""``lopa`` command line entry point.

Exit codes: 0 ok, 1 invariant violated, 2 config error, 3 numeric failure,
4 I/O error, 5 remote error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4
EXIT_REMOTE = 5

log = logging.getLogger("lopa")

GRADCHECK_BASE = {"d": 16, "m": 4, "r": 2, "h": 8, "d_enc": 8, "n_heads": 2, "d_ff": 32,
                  "seq_len": 6, "mlp_init_std": 0.5, "prompt_init_std": 0.5}


class ConfigError(ValueError):
    pass


def _setup_logging():
    level = os.environ.get("LOPA_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"LOPA_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _config_flags(p):
    """Flags that override TrainConfig fields (flags win over the file)."""
    from .training import TrainConfig

    p.add_argument("--config", help="JSON file with TrainConfig fields")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            p.add_argument(flag, dest=f.name, default=None, type=_parse_bool, metavar="BOOL")
        elif f.type in ("int", int):
            p.add_argument(flag, dest=f.name, default=None, type=int)
        elif f.type in ("float", float):
            p.add_argument(flag, dest=f.name, default=None, type=float)
        elif "float" in str(f.type):
            p.add_argument(flag, dest=f.name, default=None, type=_parse_opt_float)
        else:
            p.add_argument(flag, dest=f.name, default=None)


def _parse_bool(s):
    if s.lower() in ("1", "true", "yes"):
        return True
    if s.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _parse_opt_float(s):
    return None if s.lower() in ("none", "fan-in") else float(s)


def load_config(args):
    from .training import TrainConfig

    data = dict(getattr(args, "base_config", {}))
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        data.update(loaded)
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            data[f.name] = v
    try:
        return TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _write_json(path, obj):
    from .checkpoint import atomic_write

    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _write_text(path, text):
    from .checkpoint import atomic_write

    atomic_write(path, text.encode())


# ------------------------------------------------------------- commands

def cmd_train(args):
    from . import checkpoint, training
    from .bundle import save_client
    from .fm import ToyTransformer

    cfg = load_config(args)
    fm = ToyTransformer(cfg.fm_config())
    task = training.make_task(cfg.task, cfg.seed, cfg.n_train, cfg.n_test, cfg.seq_len)
    bundle = training.bundle_for(cfg, fm)
    report = training.train(bundle, task, cfg)
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "report.json"), report.to_json_dict())
    _write_text(os.path.join(args.out, "epochs.csv"), report.epoch_csv())
    checkpoint.save_fm(os.path.join(args.out, "fm.ckpt"), fm)
    save_client(os.path.join(args.out, "client.ckpt"), bundle.encoder, bundle.composer)
    print(f"{report.method} on {report.task}: train {report.train_acc:.4f} "
          f"test {report.test_acc:.4f} params {report.param_count}")
    return EXIT_OK


def cmd_evaluate(args):
    from . import checkpoint, training
    from .bundle import ModelBundle, load_client

    cfg = load_config(args)
    fm = checkpoint.load_fm(args.fm, np.float64)
    encoder, composer = load_client(args.client)
    bundle = ModelBundle(fm, encoder, composer)
    task = training.make_task(cfg.task, cfg.seed, cfg.n_train, cfg.n_test, cfg.seq_len)
    tr_loss, tr_acc = training.evaluate(bundle, task.train_tokens, task.train_labels)
    te_loss, te_acc = training.evaluate(bundle, task.test_tokens, task.test_labels)
    out = {"task": cfg.task, "seed": cfg.seed, "train_loss": tr_loss, "train_acc": tr_acc,
           "test_loss": te_loss, "test_acc": te_acc}
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def _int_list(s):
    try:
        return [int(x) for x in s.split(",") if x]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {s!r}") from exc


def cmd_ablate(args):
    from . import training

    cfg = load_config(args)
    methods = args.methods.split(",") if args.methods else None
    reports = training.ablate(cfg, methods, args.ms, args.rs, args.seeds)
    text = training.ablation_csv(reports)
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args):
    from . import training
    from .fm import ToyTransformer

    cfg = load_config(args)
    fm = ToyTransformer(cfg.fm_config())
    task = training.make_task(cfg.task, cfg.seed, max(cfg.n_train, args.samples), 16, cfg.seq_len)
    bundle = training.bundle_for(cfg, fm)
    rep = training.gradcheck(bundle, task, samples=args.samples)
    for name, err in sorted(rep.per_param.items()):
        print(f"{name:28s} {err:.3e}")
    ok = rep.max_rel_error <= args.tol
    print(f"max relative error {rep.max_rel_error:.3e} over {rep.n_scalars} scalars: "
          f"{'ok' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_params(args):
    from .composers import METHODS, closed_form_param_count

    method = args.method.lower()
    if method not in METHODS:
        raise ConfigError(f"unknown method {args.method!r}; expected one of {METHODS}")
    print(closed_form_param_count(method, args.d, args.m, args.h, args.d_enc, args.r, args.n_phm))
    return EXIT_OK


def _host_port(s):
    host, _, port = s.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected host:port, got {s!r}") from exc


def cmd_serve(args):
    from .checkpoint import load_fm
    from .serving.server import serve

    fm = load_fm(args.fm)
    host, port = args.listen
    log.info("model digest %s", fm.digest())
    try:
        serve(fm, host, port, args.max_batch, args.window)
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_client(args):
    from .bundle import load_client
    from .serving.client import client_prepare, query

    encoder, composer = load_client(args.client)
    if args.text is not None:
        tokens = np.frombuffer(args.text.encode("latin-1"), dtype=np.uint8).astype(np.int64)
    else:
        tokens = np.array(_int_list(args.tokens), dtype=np.int64)
    if tokens.size == 0:
        raise ConfigError("empty input")
    env = client_prepare(encoder, composer, tokens, args.request_id)
    host, port = args.connect
    logits = query(host, port, env, args.timeout)
    print(json.dumps({"request_id": args.request_id, "logits": [float(x) for x in logits],
                      "label": int(np.argmax(logits))}))
    return EXIT_OK


def cmd_inspect(args):
    from .checkpoint import load

    kind, meta, arrays = load(args.path)
    print(json.dumps({
        "kind": kind, "meta": meta,
        "arrays": {k: list(v.shape) for k, v in arrays.items()},
        "scalars": int(sum(v.size for v in arrays.values())),
    }, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="lopa", description="Instance-dependent soft prompts on a frozen toy model.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train one composer and write report plus checkpoints")
    _config_flags(s)
    s.add_argument("--out", default="run", help="output directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="evaluate saved checkpoints on a task")
    _config_flags(s)
    s.add_argument("--fm", required=True)
    s.add_argument("--client", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="sweep methods, prompt lengths, ranks and seeds")
    _config_flags(s)
    s.add_argument("--methods", help="comma separated method names")
    s.add_argument("--ms", type=_int_list)
    s.add_argument("--rs", type=_int_list)
    s.add_argument("--seeds", type=_int_list)
    s.add_argument("--out", help="CSV path (stdout if omitted)")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference check of all trainable gradients")
    _config_flags(s)
    s.add_argument("--samples", type=int, default=4)
    s.add_argument("--tol", type=float, default=1e-5)
    # small bundle so that every scalar can be perturbed in seconds
    s.set_defaults(func=cmd_gradcheck, base_config=GRADCHECK_BASE)

    s = sub.add_parser("params", help="print the composer parameter count")
    s.add_argument("method")
    s.add_argument("--d", type=int, required=True)
    s.add_argument("--m", type=int, required=True)
    s.add_argument("--h", type=int, default=0)
    s.add_argument("--d-enc", dest="d_enc", type=int, default=0)
    s.add_argument("--r", type=int, default=0)
    s.add_argument("--n-phm", dest="n_phm", type=int, default=1)
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("serve", help="serve a frozen model checkpoint")
    s.add_argument("--fm", required=True)
    s.add_argument("--listen", type=_host_port, default=("127.0.0.1", 8765))
    s.add_argument("--max-batch", type=int, default=16)
    s.add_argument("--window", type=float, default=0.01, help="batch window in seconds")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("client", help="compute a prompt locally and query a server")
    s.add_argument("--client", required=True, help="client checkpoint (encoder + composer)")
    s.add_argument("--connect", type=_host_port, default=("127.0.0.1", 8765))
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--text", help="input as Latin-1 text")
    g.add_argument("--tokens", help="comma separated byte ids")
    s.add_argument("--request-id", type=int, default=0)
    s.add_argument("--timeout", type=float, default=10.0)
    s.set_defaults(func=cmd_client)

    s = sub.add_parser("inspect", help="describe a checkpoint file")
    s.add_argument("path")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .numeric import NumericError, ShapeError
    from .serving.client import RemoteError
    from .training import TrainingDiverged

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        _setup_logging()
        return args.func(args)
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RemoteError as exc:
        print(f"remote error: {exc}", file=sys.stderr)
        return EXIT_REMOTE
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
