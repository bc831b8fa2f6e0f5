"""
Command-line entry point.

Commands:
    gen-synth   write a synthetic CCFB bundle with planted signal patches
    train       fine-tune the patch MLP and global adapter on one bundle
    eval        accuracy and alignment report of a checkpoint, as JSON
    trace       export T-I-T / I-T-I traces, similarity maps and anchor overlay
    bench       seeded multi-episode benchmark, optionally against a CE-only baseline
    sweep       (lambda1, lambda2) grid search

Human-readable output goes to stderr, machine-readable output (JSON/CSV) to stdout or files.
Exit codes: 0 success, 2 usage, 3 divergence, 4 input format error, 5 I/O.

Usage:
    python main.py gen-synth --C 5 --d 64 --M 16 --A 2 --shots 5 --queries 15 --seed 7 --out ep.ccfb
    python main.py train --bundle ep.ccfb --lambda1 3.0 --lambda2 2.0 --k 10 --ckpt ep.ccpm --history ep.csv
    python main.py eval --bundle ep.ccfb --ckpt ep.ccpm --prototype
"""
import json
import logging
import os
import sys
from argparse import ArgumentParser, Namespace

from config import DATASET_PRESETS, DEFAULT_GRID, CliConfig, resolve_config
from csvhandler import CSVHandler, render_csv
from episode import load_bundle, save_bundle
from errors import CycleError, DivergenceDetected, IoFailure
from metrics import evaluation_report, export_trace
from synth import gen_synthetic
from trainer import run_benchmark, run_grid_search, train_episode
from transform import init_params, load_params, save_params

logger = logging.getLogger("main")

SETTING_FLAGS = {name for name in CliConfig.field_types()}


def _add_objective_flags(parser: ArgumentParser) -> None:
    group = parser.add_argument_group("objective")
    group.add_argument("--lambda1", type=float, help="weight of the text-image-text cycle loss")
    group.add_argument("--lambda2", type=float, help="weight of the image-text-image cycle loss")
    group.add_argument("--k", type=int, help="top-k budget per image-view and class (default 10)")
    group.add_argument("--tau", type=float, help="classification temperature")
    group.add_argument("--tau-soft", dest="tau_soft", type=float, help="soft reconstruction temperature")
    group.add_argument("--retrieval", choices=["cross_view", "intra_image", "all_images"])
    group.add_argument("--tit-mode", dest="tit_mode", choices=["soft", "hard_metric_only"])
    group.add_argument(
        "--no-semantic-anchor",
        dest="semantic_anchor",
        action="store_const",
        const=False,
        help="skip the augment and shrink phases (ablation)",
    )
    group.add_argument("--preset", choices=sorted(DATASET_PRESETS), help="per-dataset (lambda1, lambda2)")


def _add_optimizer_flags(parser: ArgumentParser) -> None:
    group = parser.add_argument_group("optimizer")
    group.add_argument("--epochs", type=int)
    group.add_argument("--lr", type=float)
    group.add_argument("--momentum", type=float)
    group.add_argument("--hidden", type=int, help="MLP hidden width (default d)")
    group.add_argument("--expect-A", dest="expect_A", type=int, help="warn if the bundle has a different A")
    group.add_argument("--seed", type=int)
    group.add_argument("--log-every", dest="log_every", type=int)


def _add_synth_flags(parser: ArgumentParser, with_seed: bool = True) -> None:
    group = parser.add_argument_group("synthetic episode")
    group.add_argument("--C", type=int, help="classes")
    group.add_argument("--d", type=int, help="embedding dimension")
    group.add_argument("--M", type=int, help="patches per view")
    group.add_argument("--A", type=int, help="augmented views per support image")
    group.add_argument("--shots", type=int, help="support samples per class")
    group.add_argument("--queries", type=int, help="query samples per class")
    group.add_argument("--signal-patches", dest="signal_patches", type=int)
    group.add_argument("--strength", type=float)
    group.add_argument("--noise", type=float)
    group.add_argument("--overlap", type=float)
    group.add_argument("--jitter", type=float)
    if with_seed:
        group.add_argument("--seed", type=int)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(description="Cycle-consistency regularisation on few-shot episode embeddings")
    parser.add_argument("--verbose", "-v", action="count", default=0)
    parser.add_argument("--quiet", "-q", action="store_true")
    parser.add_argument("--config", type=str, help="flat key = value configuration file")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-synth", help="write a synthetic bundle")
    _add_synth_flags(gen)
    gen.add_argument("--out", required=True)

    train = sub.add_parser("train", help="train on one bundle")
    train.add_argument("--bundle", required=True)
    _add_objective_flags(train)
    _add_optimizer_flags(train)
    train.add_argument("--ckpt", help="checkpoint output path")
    train.add_argument("--history", help="history CSV output path")

    evaluate = sub.add_parser("eval", help="accuracy and alignment report")
    evaluate.add_argument("--bundle", required=True)
    evaluate.add_argument("--ckpt", help="checkpoint (default: fresh parameters)")
    evaluate.add_argument("--seed", type=int)
    evaluate.add_argument("--prototype", action="store_true", help="add prototype-classification accuracy")

    trace = sub.add_parser("trace", help="export cycle traces and similarity maps")
    trace.add_argument("--bundle", required=True)
    trace.add_argument("--ckpt")
    trace.add_argument("--out", required=True, help="output directory")
    trace.add_argument("--pgm", action="store_true", help="also write PGM similarity maps")
    _add_objective_flags(trace)
    trace.add_argument("--seed", type=int)

    bench = sub.add_parser("bench", help="multi-episode benchmark")
    bench.add_argument("--bundles", help="directory of .ccfb bundles (default: synthetic episodes)")
    bench.add_argument("--episodes", type=int)
    bench.add_argument("--compare", action="store_true", help="pair every episode with a CE-only run")
    bench.add_argument("--workers", type=int)
    bench.add_argument("--csv", help="write per-episode rows here instead of stdout")
    _add_objective_flags(bench)
    _add_optimizer_flags(bench)
    _add_synth_flags(bench, with_seed=False)

    sweep = sub.add_parser("sweep", help="(lambda1, lambda2) grid search")
    sweep.add_argument("--bundles", help="directory of .ccfb bundles (default: synthetic episodes)")
    sweep.add_argument("--episodes", type=int)
    sweep.add_argument("--workers", type=int)
    sweep.add_argument("--lambda1-grid", dest="lambda1_grid", help="comma-separated values")
    sweep.add_argument("--lambda2-grid", dest="lambda2_grid", help="comma-separated values")
    sweep.add_argument("--csv", help="write the grid here instead of stdout")
    _add_objective_flags(sweep)
    _add_optimizer_flags(sweep)
    _add_synth_flags(sweep, with_seed=False)
    return parser


def _settings(args: Namespace) -> CliConfig:
    overrides = {key: value for key, value in vars(args).items() if key in SETTING_FLAGS}
    return resolve_config(args.config, overrides)


def _params_for(bundle, cfg: CliConfig, ckpt):
    return load_params(ckpt) if ckpt else init_params(bundle.d, cfg.hidden or bundle.d, cfg.seed)


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_bundle_dir(directory: str) -> list:
    try:
        names = sorted(n for n in os.listdir(directory) if n.endswith(".ccfb"))
    except OSError as e:
        raise IoFailure(f"cannot list {directory}: {e}") from e
    if not names:
        raise IoFailure(f"no .ccfb bundles in {directory}")
    return [load_bundle(os.path.join(directory, n)) for n in names]


def cmd_gen_synth(args: Namespace) -> int:
    cfg = _settings(args)
    bundle = gen_synthetic(cfg.to_synth_spec())
    save_bundle(bundle, args.out)
    planted = bundle.metadata["planted"]["support"]
    logger.info(f"planted positions of the first support images: {planted[:3]}")
    _emit(
        {
            "out": args.out,
            "C": bundle.C,
            "d": bundle.d,
            "M": bundle.M,
            "A": bundle.A,
            "n_support": bundle.n_support,
            "n_query": bundle.n_query,
            "H": bundle.H,
            "signal_patches_per_image": cfg.signal_patches,
        }
    )
    return 0


def cmd_train(args: Namespace) -> int:
    cfg = _settings(args)
    bundle = load_bundle(args.bundle)
    logger.info(f"training with lambda1={cfg.lambda1}, lambda2={cfg.lambda2}, k={cfg.k}, preset={cfg.preset}")
    try:
        params, history = train_episode(bundle, cfg.to_train_config())
    except DivergenceDetected as e:
        if args.history and e.history is not None:
            e.history.save_csv(args.history)
        raise
    if args.ckpt:
        save_params(params, args.ckpt)
    if args.history:
        history.save_csv(args.history)
    final = history.records[-1] if len(history) else {}
    _emit(
        {
            "lambda1": cfg.lambda1,
            "lambda2": cfg.lambda2,
            "k": cfg.k,
            "preset": cfg.preset,
            "retrieval": cfg.retrieval,
            "epochs": cfg.epochs,
            "final": final,
        }
    )
    return 0


def cmd_eval(args: Namespace) -> int:
    cfg = _settings(args)
    bundle = load_bundle(args.bundle)
    params = _params_for(bundle, cfg, args.ckpt)
    _emit(evaluation_report(bundle, params, prototype=args.prototype))
    return 0


def cmd_trace(args: Namespace) -> int:
    cfg = _settings(args)
    bundle = load_bundle(args.bundle)
    params = _params_for(bundle, cfg, args.ckpt)
    _emit(export_trace(bundle, params, cfg.to_cycle_config(), args.out, pgm=args.pgm))
    return 0


def _write_table(df, path) -> None:
    if path:
        CSVHandler(path).save_csv(df)
    else:
        sys.stdout.write(render_csv(df))


def cmd_bench(args: Namespace) -> int:
    cfg = _settings(args)
    source = _load_bundle_dir(args.bundles) if args.bundles else cfg.to_synth_spec()
    summary = run_benchmark(source, cfg.to_train_config(), cfg.episodes, compare=args.compare, workers=cfg.workers)
    sys.stderr.write(summary.table() + "\n")
    _write_table(summary.rows, args.csv)
    return 0


def _parse_grid(text) -> tuple:
    if not text:
        return DEFAULT_GRID
    return tuple(float(v) for v in text.split(","))


def cmd_sweep(args: Namespace) -> int:
    cfg = _settings(args)
    source = _load_bundle_dir(args.bundles) if args.bundles else cfg.to_synth_spec()
    grid = run_grid_search(
        source,
        cfg.to_train_config(),
        _parse_grid(args.lambda1_grid),
        _parse_grid(args.lambda2_grid),
        cfg.episodes,
        workers=cfg.workers,
    )
    _write_table(grid, args.csv)
    return 0


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "trace": cmd_trace,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s - %(levelname)s - %(message)s", stream=sys.stderr)

    try:
        return COMMANDS[args.command](args)
    except CycleError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except ValueError as e:
        logger.error(f"invalid argument: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
