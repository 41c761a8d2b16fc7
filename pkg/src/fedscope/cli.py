"""Command-line entry point: ``fedscope <subcommand>``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ._errors import FedscopeError
from .config import ExperimentConfig
from .datagen import REAL, SYNTHETIC, UNSEEN, DomainSpec, generate_dataset, load_dataset, make_unseen_testset, save_dataset
from .harness import (
    TEST_SETS,
    aggregate_tables,
    evaluate_models,
    format_table,
    make_seed_data,
    parse_table,
    run_experiment,
    strategy_specs,
    train_options,
    write_run_artifacts,
)
from .nn import init_params, load_weights, save_weights
from .strategies import STRATEGY_KINDS, Datasets, StrategyRunner

DOMAINS = {"real": REAL, "synthetic": SYNTHETIC, "unseen": UNSEEN}


def _load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_file(path) if path else ExperimentConfig.from_text("")


def cmd_generate_data(args) -> int:
    if args.domain_spec:
        spec = DomainSpec.from_json(Path(args.domain_spec).read_text())
    else:
        spec = DOMAINS[args.domain]
    if args.domain == "unseen" and not args.domain_spec:
        samples = make_unseen_testset(args.seed, n_annotated=args.n, n_background=args.backgrounds,
                                      n_grid_backgrounds=args.backgrounds // 2)
    else:
        samples = generate_dataset(spec, args.n, class_balance=args.balance, seed=args.seed)
    root = save_dataset(samples, args.out, spec)
    print(f"wrote {len(samples)} samples to {root}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    if args.real or args.synthetic:
        if not (args.real and args.synthetic):
            raise FedscopeError("bad-arguments", "--real and --synthetic must be given together")
        real, synthetic = load_dataset(args.real), load_dataset(args.synthetic)
        val_real = load_dataset(args.val_real) if args.val_real else None
        val_synthetic = load_dataset(args.val_synthetic) if args.val_synthetic else None
        data = Datasets(real, synthetic, val_real, val_synthetic)
    else:
        data = make_seed_data(cfg, seed).train
    runner = StrategyRunner(data, init_params(seed), train_options(cfg, seed), strategy_specs(cfg))
    outcome = runner.run(args.strategy)
    save_weights(args.out, outcome.models)
    print(f"saved {len(outcome.models)} model(s) for {args.strategy} to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    models = load_weights(args.weights)
    samples = load_dataset(args.testset)
    report = evaluate_models(models, samples, cfg)
    sys.stdout.write(format_table([(args.name, report)], args.format))
    return 0


def cmd_report(args) -> int:
    root = Path(args.run_dir)
    ext = "csv"
    for test_set in args.test_set or TEST_SETS:
        files = sorted(root.glob(f"seed_*/{test_set}.{ext}"))
        if not files:
            raise FedscopeError("no-results", f"no per-seed {test_set} tables under {root}")
        mean = aggregate_tables([parse_table(f.read_text(), "csv") for f in files])
        print(f"{test_set} (mean over {len(files)} seeds)")
        sys.stdout.write(format_table(mean, args.format))
        print()
    return 0


def cmd_run_all(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out or cfg.output_dir)
    report = run_experiment(cfg, jobs=args.jobs)
    write_run_artifacts(report, cfg, out)
    print((out / "report.md").read_text())
    failed = [s.seed for s in report.seeds if s.error is not None]
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedscope", description="Desk-scale federated object-detection simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="render a dataset directory")
    g.add_argument("--domain", choices=sorted(DOMAINS), default="real")
    g.add_argument("--domain-spec", help="JSON DomainSpec overriding --domain presets")
    g.add_argument("--n", type=int, default=100, help="number of (annotated) images")
    g.add_argument("--backgrounds", type=int, default=16, help="background-only probes for the unseen domain")
    g.add_argument("--balance", action="store_true", help="class-balanced object sampling")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train one strategy and save its weights")
    t.add_argument("--strategy", required=True, choices=STRATEGY_KINDS)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--real", help="real training set directory (default: generate from seed)")
    t.add_argument("--synthetic", help="synthetic training set directory")
    t.add_argument("--val-real")
    t.add_argument("--val-synthetic")
    t.add_argument("--out", required=True, help="output .npz weights file")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score saved weights on a test set directory")
    e.add_argument("--weights", required=True)
    e.add_argument("--testset", required=True)
    e.add_argument("--config")
    e.add_argument("--name", default="model", help="row label")
    e.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="mean tables from a run-all output directory")
    r.add_argument("--run-dir", required=True)
    r.add_argument("--test-set", action="append", choices=TEST_SETS)
    r.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    r.set_defaults(func=cmd_report)

    a = sub.add_parser("run-all", help="every strategy on every seed, then write reports")
    a.add_argument("--config")
    a.add_argument("--out", help="output directory (default: output_dir from the config)")
    a.add_argument("--jobs", type=int, help="parallel seeds (default: jobs from the config)")
    a.set_defaults(func=cmd_run_all)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FedscopeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
