"""Command line: ``tpt {gen,train,eval,gradcheck,ablate}``.

Configuration precedence: preset < ``--config`` file < ``--set key=value`` < dedicated flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, format_config, load_config_file, run_config_from
from .data import TASKS, ManifestError, SynthParams, dataset_info, gen_synthetic, load_examples
from .heads import REGIMES
from .model import CheckpointError
from .tensor import TensorError


class UsageError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--preset", choices=("paper", "tiny"), help="base model configuration (default: paper)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--precision", choices=("float32", "float64"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tpt", description="Temporal pyramid VideoQA: data, training, evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic dataset (manifest + features)")
    _add_common(g)
    g.add_argument("--task", choices=TASKS, required=True)
    g.add_argument("--size", type=int, default=256)
    g.add_argument("--features", choices=("file", "recipe"), default="file")
    g.add_argument("--vocab-from", type=Path, help="reuse vocab.txt from another dataset directory")
    g.add_argument("--world", type=int, default=0, help="seed of the shared motif/class vectors")

    t = sub.add_parser("train", help="train on a manifest")
    _add_common(t)
    t.add_argument("--data", type=Path, required=True, help="manifest.jsonl")
    t.add_argument("--val-data", type=Path, help="separate validation manifest")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    _add_common(e)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    _add_common(c)
    c.add_argument("--regime", choices=REGIMES + ("all",), default="all")
    c.add_argument("--entries", type=int, default=6, help="sampled entries per tensor (0 = all)")
    c.add_argument("--tolerance", type=float, default=1e-4)

    a = sub.add_parser("ablate", help="train a grid of variants over several seeds")
    _add_common(a)
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--test-data", type=Path)
    a.add_argument("--levels", type=int, nargs="*", default=[], help="full-pyramid variants by N")
    a.add_argument("--fixed-levels", type=int, nargs="*", default=[], help="single-level variants by L")
    a.add_argument("--drop-qt", action="store_true")
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--epochs", type=int)
    a.add_argument("--lr", type=float)
    a.add_argument("--batch-size", type=int)
    return parser


def resolve_run(args, default_preset: str = "paper") -> RunConfig:
    values: dict = {}
    if args.config:
        values.update(load_config_file(args.config))
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    if args.preset:
        values["preset"] = args.preset
    values.setdefault("preset", default_preset)
    for flag, key in (("seed", "seed"), ("precision", "precision"), ("out", "out_dir"), ("epochs", "epochs"),
                      ("lr", "lr"), ("batch_size", "batch_size")):
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = str(v) if isinstance(v, Path) else v
    return run_config_from(values)


def cmd_gen(args) -> int:
    run = resolve_run(args, "tiny")
    if not args.out:
        raise UsageError("gen needs --out")
    from .text import Vocab
    vocab = Vocab.load(args.vocab_from / "vocab.txt") if args.vocab_from else None
    ds = gen_synthetic(args.task, args.size, run.seed, run.model, SynthParams(world=args.world), out_dir=args.out,
                       features=args.features, vocab=vocab)
    print(f"wrote {len(ds.examples)} {args.task} examples to {args.out / 'manifest.jsonl'}")
    return 0


def cmd_train(args) -> int:
    from .train import train
    run = resolve_run(args)
    if not run.out_dir:
        raise UsageError("train needs --out (or out_dir in the config file)")
    examples = load_examples(args.data)
    vocab_size, n_answers = dataset_info(args.data, examples)
    val = load_examples(args.val_data) if args.val_data else None
    Path(run.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(run.out_dir) / "config.txt").write_text(format_config(run), encoding="utf-8")
    res = train(run, examples, vocab_size, n_answers, run.out_dir, val_examples=val)
    print(f"best epoch {res.best_epoch}: {res.best_metric:.4f}; checkpoints in {run.out_dir}")
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate
    config = None
    if args.config or args.set or args.preset or args.precision:
        config = resolve_run(args).model
    res = evaluate(args.checkpoint, load_examples(args.data), config)
    summary = {"loss": res.loss, "accuracy": res.accuracy, "mse": res.mse, "mse_raw": res.mse_raw,
               "confusion": res.confusion}
    print(json.dumps(summary, indent=2, sort_keys=True))
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "eval.json").write_text(json.dumps(summary, sort_keys=True), encoding="utf-8")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_model_gradients
    args.precision = "float64"
    run = resolve_run(args, "tiny")
    regimes = REGIMES if args.regime == "all" else (args.regime,)
    worst_all = 0.0
    for regime in regimes:
        report: dict = {}
        worst = check_model_gradients(run.model, regime, seed=run.seed, max_entries=args.entries or None, report=report)
        worst_all = max(worst_all, worst)
        name = max(report, key=report.get) if report else "-"
        print(f"{regime:<13} worst relative error {worst:.3e} ({name})")
    ok = worst_all < args.tolerance
    print("PASS" if ok else "FAIL", f"tolerance {args.tolerance:g}")
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    from .train import AblationGrid, ablate, format_ablation
    run = resolve_run(args, "tiny")
    examples = load_examples(args.data)
    vocab_size, n_answers = dataset_info(args.data, examples)
    test = load_examples(args.test_data) if args.test_data else None
    grid = AblationGrid(args.levels, args.fixed_levels, args.drop_qt)
    rows = ablate(run, examples, vocab_size, n_answers, grid, args.seeds, test, run.out_dir)
    print(format_ablation(rows))
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"tpt {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ManifestError, CheckpointError, TensorError, ValueError, OSError) as exc:
        print(f"tpt {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
