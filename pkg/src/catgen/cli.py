"""Command-line interface: ``catgen <command> [options]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from .checkpoint import CheckpointError
from .density import POSTERIOR_KINDS
from .train_eval import (
    EVAL_SEED,
    MODEL_KINDS,
    Checkpoint,
    ConfigError,
    TrainConfig,
    TrainingDiverged,
    build_model,
    evaluate,
    pmf_report,
    train,
    write_metrics,
    write_pgm,
    write_pmf_csv,
)
from .verify import run_checks


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--posterior", choices=POSTERIOR_KINDS + ("softplus-threshold",))
    p.add_argument("--dataset", metavar="PATH", help="dataset file ('K D n seed' header)")
    p.add_argument("--out", metavar="PATH")
    p.add_argument("--seed", type=int)
    p.add_argument("--T", type=int, help="diffusion steps")
    p.add_argument("--iwbo-samples", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="catgen", description="Argmax flows and multinomial diffusion on toy categorical data.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--metrics", metavar="CSV", help="per-epoch metrics file")

    p = sub.add_parser("sample", help="draw samples in the dataset file format")
    _common(p)
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("-n", type=int, default=16)

    p = sub.add_parser("eval", help="report a likelihood bound on a dataset")
    _common(p)
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--metric", choices=("elbo", "iwbo", "bpd"), default="elbo")

    p = sub.add_parser("denoise", help="corrupt a text line and restore it in one pass")
    _common(p)
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--text", help="line to corrupt (default: a sample from the corpus)")
    p.add_argument("--rate", type=float, default=0.05)

    p = sub.add_parser("make-data", help="generate a toy dataset file")
    _common(p)
    p.add_argument("--kind", choices=("eight_gaussians", "char_corpus"))
    p.add_argument("-n", type=int)
    p.add_argument("--split", choices=("train", "val"), default="train")

    p = sub.add_parser("verify", help="run the brute-force oracle checks")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", action="append", metavar="CHECK")

    p = sub.add_parser("pmf", help="write a pmf grid (CSV and PGM) for 2-d data or a model")
    _common(p)
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("-n", type=int, default=100000, help="samples for diffusion models")
    return parser


def _config(args, **extra) -> TrainConfig:
    """Config file values, overridden by any flags given on the command line."""
    text = Path(args.config).read_text() if args.config else ""
    overrides = {
        "model": getattr(args, "model", None),
        "posterior": getattr(args, "posterior", None),
        "seed": getattr(args, "seed", None),
        "T": getattr(args, "T", None),
        "iwbo_samples": getattr(args, "iwbo_samples", None),
    }
    overrides.update(extra)
    if getattr(args, "dataset", None) and getattr(args, "command", "") == "train":
        x, K, _ = datamod.load_dataset(args.dataset)
        base = TrainConfig.from_text(text)
        explicit = {line.split("=", 1)[0].strip() for line in text.splitlines() if "=" in line.split("#", 1)[0]}
        for key, val in (("K", K), ("D", x.shape[1])):
            if key in explicit and getattr(base, key) != val:
                raise ConfigError(f"config sets {key}={getattr(base, key)} but {args.dataset} has {key}={val}")
            overrides[key] = val
        overrides["dataset_path"] = args.dataset
    return TrainConfig.from_text(text, **overrides)


def _emit(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_train(args) -> int:
    config = _config(args, epochs=args.epochs)
    ckpt = train(config, metrics_path=args.metrics, log=lambda s: print(s, flush=True))
    out = args.out or "model.ckpt"
    ckpt.save(out)
    if ckpt.flagged:
        print("warning: smoothed training loss increased during training", file=sys.stderr)
    print(f"saved {out}")
    return 0


def cmd_sample(args) -> int:
    if args.checkpoint:
        ckpt = Checkpoint.load(args.checkpoint)
        model, seed = ckpt.model, args.seed if args.seed is not None else ckpt.config.seed
    else:
        config = _config(args)
        model, seed = build_model(config), config.seed
    if args.n < 0:
        raise UsageError("-n must be non-negative")
    x = model.sample(args.n, np.random.default_rng(seed))
    _emit(datamod.format_dataset(x, model.K, seed), args.out)
    return 0


def _dataset_or_val(args, ckpt: Checkpoint):
    if args.dataset:
        x, K, _ = datamod.load_dataset(args.dataset)
        if K != ckpt.config.K or x.shape[1] != ckpt.config.D:
            raise ConfigError(f"dataset has K={K}, D={x.shape[1]}; checkpoint expects K={ckpt.config.K}, D={ckpt.config.D}")
        return x
    return ckpt.config.dataset_spec().generate()[1]


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    x = _dataset_or_val(args, ckpt)
    S = args.iwbo_samples or ckpt.config.iwbo_samples
    report = evaluate(ckpt, x, args.metric, S=S, seed=args.seed if args.seed is not None else EVAL_SEED)
    print(report)
    if args.out:
        write_metrics(args.out, [(len(ckpt.losses), "eval", f"{args.metric}_nats", report.nll_nats),
                                 (len(ckpt.losses), "eval", f"{args.metric}_se_nats", report.se_nats),
                                 (len(ckpt.losses), "eval", f"{args.metric}_bpd", report.bpd)])
    return 0


def cmd_denoise(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    model = ckpt.model
    if not hasattr(model, "denoise_once"):
        raise ConfigError("denoise needs a multinomial-diffusion checkpoint")
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    if args.text is not None:
        original = datamod.encode_text(args.text)[None, :]
        if original.shape[1] != model.D:
            raise ConfigError(f"text has length {original.shape[1]}, model expects {model.D}")
    else:
        original = _dataset_or_val(args, ckpt)[:1]
    corrupted = datamod.corrupt(original, args.rate, rng, model.K)
    restored = model.denoise_once(corrupted)
    for label, row in (("original", original), ("corrupted", corrupted), ("restored", restored)):
        print(f"{label:<10} {datamod.decode_text(row[0])!r}")
    return 0


def cmd_make_data(args) -> int:
    extra = {}
    if args.kind:
        extra["dataset"] = args.kind
        if args.kind == "char_corpus":
            text = Path(args.config).read_text() if args.config else ""
            keys = {line.split("=", 1)[0].strip() for line in text.splitlines() if "=" in line}
            extra.setdefault("K", None if "K" in keys else len(datamod.ALPHABET))
            extra.setdefault("D", None if "D" in keys else 24)
    if args.n is not None:
        extra["n_train" if args.split == "train" else "n_val"] = args.n
    config = _config(args, **{"data_seed": args.seed, **extra})
    train_x, val_x = config.dataset_spec().generate()
    x = train_x if args.split == "train" else val_x
    _emit(datamod.format_dataset(x, config.K, config.data_seed), args.out)
    return 0


def cmd_verify(args) -> int:
    results = run_checks(quick=args.quick, seed=args.seed, names=args.only)
    for r in results:
        print(r.line(), flush=True)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_pmf(args) -> int:
    if args.checkpoint:
        ckpt = Checkpoint.load(args.checkpoint)
        S = args.iwbo_samples or 100
        grid = pmf_report(ckpt, n_samples=args.n, S=S, seed=args.seed if args.seed is not None else EVAL_SEED)
    elif args.dataset:
        x, K, _ = datamod.load_dataset(args.dataset)
        grid = pmf_report(x, K)
    else:
        raise UsageError("pmf needs --checkpoint or --dataset")
    out = args.out or "pmf"
    write_pmf_csv(out + ".csv", grid)
    write_pgm(out + ".pgm", grid)
    print(f"pmf sum {grid.sum():.4f}; wrote {out}.csv and {out}.pgm")
    return 0


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "denoise": cmd_denoise,
    "make-data": cmd_make_data,
    "verify": cmd_verify,
    "pmf": cmd_pmf,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        parser.error(str(exc))
    except (OSError, CheckpointError, TrainingDiverged, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
