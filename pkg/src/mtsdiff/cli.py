"""Command-line entry point: ``mtsdiff <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
Failures print a single JSON line ``{"error": ..., "code": ..., "detail": ...}``
on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dataio import DatasetManifest, FormatError, denormalize, gen_toy, ingest_csv, read_dataset, write_dataset
from .diffusion import MODES, SamplerConfig, sample
from .evalsuite import ALL_METRICS, DEFAULT_METRICS, evaluate
from .gradcheck import run_suite
from .training import NumericFailure, TrainConfig, train, write_metrics_csv

log = logging.getLogger("mtsdiff")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_run_config(path: Path, command: str, resolved: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "version": __version__, "config": resolved}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- commands -------------------------------------------------------------------------------
def cmd_gen_toy(args) -> int:
    out = Path(args.out)
    _write_run_config(out / "run_config.json", "gen-toy", {"out": str(out), "n": args.n, "seq_len": args.seq_len,
                                                           "seed": args.seed})
    gen_toy(out, args.n, args.seq_len, args.seed)
    print(f"wrote {args.n} sequences to {out}")
    return EXIT_OK


def cmd_ingest_csv(args) -> int:
    out = Path(args.out)
    _write_run_config(out / "run_config.json", "ingest-csv", {"csv": args.csv, "mapping": args.mapping,
                                                              "out": str(out)})
    manifest, batch = ingest_csv(args.csv, args.mapping)
    write_dataset(out, manifest, batch)
    print(f"wrote {manifest.n} sequences to {out}")
    return EXIT_OK


def _load_train_config(args) -> TrainConfig:
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as e:
            raise FormatError(f"config {args.config} is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise FormatError("config must be a JSON object")
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        return TrainConfig.from_dict(d)
    except KeyError as e:
        raise UsageError(e.args[0]) from None
    except TypeError as e:
        raise UsageError(f"bad config value: {e}") from None


def cmd_train(args) -> int:
    cfg = _load_train_config(args)
    out = Path(args.out)
    _write_run_config(out / "run_config.json", "train", {"data": args.data, "out": str(out), "train": cfg.to_dict()})
    manifest, data = read_dataset(args.data)
    if manifest.normalization is not None:
        data.numerical = denormalize(data.numerical, manifest.normalization).astype(np.float32)
        manifest.normalization = None
    t0 = time.monotonic()

    def report(rec):
        log.info("step %d loss_num %.4f loss_emb %.4f ema_loss %.4f (%.0fs)", rec["step"], rec["loss_num"],
                 rec["loss_emb"], rec["ema_loss"], time.monotonic() - t0)

    res = train(manifest, data, cfg, on_log=report)
    save_checkpoint(res.state, out / "model.ckpt")
    write_metrics_csv(res.history, out / "metrics.csv")
    print(f"best ema_loss {res.best_ema_loss:.6g} at step {res.best_step}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_sample(args) -> int:
    try:
        scfg = SamplerConfig(steps=args.steps, w_num=args.w_num, w_cat=args.w_cat, mode=args.mode, seed=args.seed,
                             chunk=args.chunk)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if args.n < 1:
        raise UsageError("--n must be positive")
    out = Path(args.out)
    _write_run_config(out / "run_config.json", "sample", {"ckpt": args.ckpt, "n": args.n, "out": str(out),
                                                          "sampler": scfg.to_dict()})
    state = load_checkpoint(args.ckpt)
    batch = sample(state, scfg, args.n)
    if not np.all(np.isfinite(batch.numerical)):
        raise FloatingPointError("sampler produced non-finite values")
    manifest = DatasetManifest.from_dict(state.data_manifest)
    manifest.n = args.n
    manifest.seed = args.seed
    manifest.normalization = None
    write_dataset(out, manifest, batch)
    print(f"wrote {args.n} samples to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    metrics = list(DEFAULT_METRICS) if args.metrics is None else [m.strip() for m in args.metrics.split(",") if m]
    bad = sorted(set(metrics) - set(ALL_METRICS))
    if bad:
        raise UsageError(f"unknown metrics {bad}; choose from {','.join(ALL_METRICS)}")
    if any(m in ("tstr", "trtr") for m in metrics) and not args.real_test:
        raise UsageError("tstr/trtr need --real-test")
    out = Path(args.out)
    _write_run_config(out.with_name(out.stem + ".run_config.json"), "eval",
                      {"real": args.real, "synth": args.synth, "real_test": args.real_test, "out": str(out),
                       "metrics": metrics, "seed": args.seed, "n_seeds": args.n_seeds})
    mr, real = read_dataset(args.real)
    ms, synth = read_dataset(args.synth)
    for key in ("seq_len", "numerical", "categorical", "label"):
        if getattr(mr, key) != getattr(ms, key):
            raise FormatError(f"real and synthetic datasets differ in {key}")
    real_test = None
    if args.real_test:
        mt, real_test = read_dataset(args.real_test)
        if mt.categorical != mr.categorical or mt.numerical != mr.numerical:
            raise FormatError("real test set has a different feature layout")
    rep = evaluate(real, synth, mr.cardinalities, mr.n_labels, metrics, seed=args.seed, real_test=real_test,
                   n_seeds=args.n_seeds)
    out.parent.mkdir(parents=True, exist_ok=True)
    rep.save(out)
    for k, v in rep.metrics.items():
        print(f"{k}\t{v:.6g}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = run_suite(double=args.double, seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        raise FloatingPointError(f"gradient check failed for {', '.join(failed)}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtsdiff", description="Mixed-type time-series diffusion toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-toy", help="write the synthetic regime-switching dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=4000)
    g.add_argument("--seq-len", type=int, default=24)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_toy)

    c = sub.add_parser("ingest-csv", help="convert long-format CSV to a dataset directory")
    c.add_argument("--csv", required=True)
    c.add_argument("--mapping", required=True, help="JSON column/feature mapping")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_ingest_csv)

    t = sub.add_parser("train", help="fit a generator")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON object of training options")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, help="overrides the config seed")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw synthetic sequences from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--mode", choices=MODES, default="uncond")
    s.add_argument("--w-num", type=float, default=2.0)
    s.add_argument("--w-cat", type=float, default=2.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--chunk", type=int, default=1024)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="compare a synthetic dataset to a real one")
    e.add_argument("--real", required=True)
    e.add_argument("--synth", required=True)
    e.add_argument("--out", required=True, help="report path (JSON)")
    e.add_argument("--metrics", help=f"comma-separated subset of {','.join(ALL_METRICS)}")
    e.add_argument("--real-test", help="held-out real dataset for tstr/trtr")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--n-seeds", type=int, default=5)
    e.set_defaults(func=cmd_eval)

    k = sub.add_parser("grad-check", help="verify gradients against finite differences")
    k.add_argument("--double", action="store_true", help="exhaustive float64 finite-difference suite")
    k.add_argument("--seed", type=int, default=0)
    k.set_defaults(func=cmd_grad_check)
    return p


def _fail(kind: str, code: int, detail: str) -> int:
    print(json.dumps({"error": kind, "code": code, "detail": " ".join(str(detail).split())}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as e:
        return _fail("usage", EXIT_USAGE, e)
    except (CheckpointError, FormatError, json.JSONDecodeError, FileNotFoundError, IsADirectoryError,
            NotADirectoryError) as e:
        return _fail("data", EXIT_DATA, e)
    except (NumericFailure, FloatingPointError) as e:
        return _fail("numeric", EXIT_NUMERIC, e)
    except ValueError as e:
        return _fail("usage", EXIT_USAGE, e)


if __name__ == "__main__":
    sys.exit(main())
