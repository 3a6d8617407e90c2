"""Command-line interface.

Subcommands: search, eval, ablate, analyze, transfer, calibrate, sanity,
plot, synth-data. Commands that take --config read the versioned JSON run
configuration; flags win over file values. Failures print a single
machine-parseable line `error <ErrorClass>: <message>` and exit with a
class-specific code. Report-style commands write matplotlib figures next
to CSV/JSONL outputs under --out.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .accountant import (
    PrivacyBudget,
    RdpLedger,
    calibrate_sigma,
    compose,
    steps_until_budget,
    to_eps_delta,
)
from .config import (
    apply_overrides,
    canonical_json,
    make_eval_config,
    make_search_config,
    parse_run_config,
    resolve_architecture,
    resolve_data_root,
)
from .controller import load_controller
from .data import generate_synthetic, load_dataset, split_train_val
from .errors import (
    BudgetExhaustedError,
    CalibrationError,
    CheckpointIntegrityError,
    ConfigError,
    ControllerDivergedError,
    DpnasError,
    IngestionError,
    NotFoundError,
    PoolVersionError,
    TrainingDivergedError,
    ValidationError,
)
from .eval_analysis import (
    ablation_component,
    append_record,
    init_sanity_check,
    op_frequency_stats,
    read_records,
    train_final,
    transfer_eval,
)
from .search_engine import run_search
from .search_space import save_architecture

EXIT_CODES = (
    ((ConfigError, ValidationError), 3),
    ((IngestionError, NotFoundError), 4),
    ((CalibrationError, BudgetExhaustedError), 5),
    ((PoolVersionError, CheckpointIntegrityError), 6),
    ((TrainingDivergedError, ControllerDivergedError), 7),
    ((DpnasError,), 1),
)


def _exit_code(exc: Exception) -> int:
    for classes, code in EXIT_CODES:
        if isinstance(exc, classes):
            return code
    return 1


def _load_bundle(run_cfg):
    return load_dataset(run_cfg.dataset, resolve_data_root(run_cfg))


def _subset_bundle(bundle, n, seed):
    if n is None:
        return bundle
    import numpy as np

    idx = np.random.default_rng(seed).permutation(len(bundle.train_x))[:n]
    bundle.train_x = bundle.train_x[idx]
    bundle.train_y = bundle.train_y[idx]
    return bundle


def _config_overrides(args, keys):
    return {k: getattr(args, k, None) for k in keys}


def cmd_calibrate(args) -> int:
    budget = PrivacyBudget(args.epsilon, args.delta)
    sigma = calibrate_sigma(budget, args.sample_rate, args.steps)
    ledger = compose(RdpLedger(q=args.sample_rate, sigma=sigma), args.steps)
    realized, alpha = to_eps_delta(ledger, args.delta)
    cap = steps_until_budget(budget, args.sample_rate, sigma)
    print(f"sigma={sigma:.6g}")
    print(f"alpha={alpha}")
    print(f"epsilon={realized.epsilon:.6g}")
    print(f"delta={args.delta:g}")
    print(f"step_cap={cap.steps}")
    return 0


def cmd_search(args) -> int:
    run_cfg = parse_run_config(args.config)
    run_cfg = apply_overrides(run_cfg, "search", _config_overrides(
        args, ("dataset", "seed", "data_root", "strategy")))
    search_cfg, strategy, subset = make_search_config(run_cfg)
    bundle = _subset_bundle(_load_bundle(run_cfg), subset, run_cfg.seed)
    train, val = split_train_val(bundle, search_cfg.split_ratio, run_cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(canonical_json(run_cfg))

    def progress(rec):
        print(f"epoch={rec['epoch']} phase={rec['phase']} "
              f"mean_acc={rec['mean_acc']:.4f} "
              f"entropy={rec['controller_entropy']:.3f}", flush=True)

    result = run_search(search_cfg, train, val, strategy=strategy,
                        out_dir=out, resume_from=args.resume,
                        progress=progress)
    if result.final_arch is not None:
        save_architecture(result.final_arch,
                          out / f"arch_searched_on_{run_cfg.dataset}.json")
        print(f"final_arch={out / f'arch_searched_on_{run_cfg.dataset}.json'}")
    print(f"log={out / 'search_log.jsonl'}")
    return 0


def _run_eval_like(args, section: str) -> int:
    run_cfg = parse_run_config(args.config)
    overrides = _config_overrides(
        args, ("dataset", "seed", "data_root", "epsilon", "delta", "epochs",
               "repeats", "train_subset"))
    if getattr(args, "arch", None) is not None:
        overrides["arch"] = args.arch
    run_cfg = apply_overrides(run_cfg, section, overrides)
    eval_cfg, extras = make_eval_config(run_cfg, section)
    bundle = _load_bundle(run_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(canonical_json(run_cfg))
    results_path = out / "results.jsonl"

    if section == "eval":
        arch = resolve_architecture(extras.get("arch", "fixture"),
                                    run_cfg.dataset)
        records = [train_final(arch, eval_cfg, bundle)]
    elif section == "ablate":
        base = extras.get("base", "small_cnn")
        if base != "small_cnn":
            base = resolve_architecture(base, run_cfg.dataset)
        components = extras.get("components")
        if not components:
            raise ConfigError("ablate needs a nonempty 'components' list")
        records = ablation_component(base, components, eval_cfg, bundle)
    elif section == "transfer":
        search_dataset = extras.get("search_dataset")
        store_dir = extras.get("store_dir")
        if not search_dataset or not store_dir:
            raise ConfigError("transfer needs 'search_dataset' and 'store_dir'")
        records = [transfer_eval(search_dataset, run_cfg.dataset, eval_cfg,
                                 bundle, store_dir)]
    else:
        raise ConfigError(f"unknown section {section!r}")

    for rec in records:
        append_record(results_path, rec, config=run_cfg.to_json())
        label = rec.component or rec.arch_id
        std = f"{rec.std_accuracy:.4f}" if rec.std_accuracy is not None else "n/a"
        print(f"component={label} mean_acc={rec.mean_accuracy:.4f} "
              f"std={std} sigma={rec.sigma:.4g} steps={rec.steps} "
              f"epsilon={rec.realized_epsilon}")
    print(f"results={results_path}")
    return 0


def cmd_eval(args) -> int:
    return _run_eval_like(args, "eval")


def cmd_ablate(args) -> int:
    return _run_eval_like(args, "ablate")


def cmd_transfer(args) -> int:
    return _run_eval_like(args, "transfer")


def cmd_sanity(args) -> int:
    run_cfg = parse_run_config(args.config)
    run_cfg = apply_overrides(run_cfg, "sanity", _config_overrides(
        args, ("dataset", "seed", "data_root")))
    section = run_cfg.sections.get("sanity", {})
    arch = resolve_architecture(
        args.arch or section.get("arch", "fixture"), run_cfg.dataset)
    from .eval_analysis import EvalConfig

    eval_cfg = EvalConfig(dataset=run_cfg.dataset, budget=None, epochs=1,
                          repeats=int(section.get("repeats", 10)),
                          noise_multiplier=1.0, seed=run_cfg.seed,
                          stage_channels=section.get("stage_channels"))
    bundle = _load_bundle(run_cfg)
    res = init_sanity_check(arch, eval_cfg, bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    append_record(out / "sanity.jsonl", {
        "kind": "init_sanity", "dataset": run_cfg.dataset,
        "mean_accuracy": res.mean_accuracy, "std_accuracy": res.std_accuracy,
        "accuracies": res.accuracies, "chance": res.chance,
        "flagged": res.flagged,
    }, config=run_cfg.to_json())
    print(f"mean_acc={res.mean_accuracy:.4f} std={res.std_accuracy} "
          f"chance={res.chance} flagged={res.flagged}")
    return 0


def cmd_analyze(args) -> int:
    import torch

    from .plots import plot_frequencies

    controller, _baseline, _gen = load_controller(args.controller)
    table = op_frequency_stats(controller, args.samples,
                               torch.Generator().manual_seed(args.seed))
    out = Path(args.out)
    written = plot_frequencies(table, out)
    for name, freqs in (("activation", table.activations),
                        ("pooling", table.poolings)):
        for op, f in sorted(freqs.items(), key=lambda kv: -kv[1]):
            print(f"{name} {op} {f:.4f}")
    for p in written:
        print(f"wrote={p}")
    return 0


def cmd_plot(args) -> int:
    from .plots import plot_budget_curves, plot_search_curves

    out = Path(args.out)
    if args.kind == "search":
        logs = {}
        for item in args.log:
            label, _, path = item.partition("=")
            if not path:
                raise ConfigError("--log expects label=path")
            logs[label] = read_records(path)
        written = plot_search_curves(logs, out)
    elif args.kind == "budget":
        records = []
        for path in args.results:
            records.extend(read_records(path))
        written = plot_budget_curves(records, out)
    else:
        raise ConfigError(f"unknown plot kind {args.kind!r}")
    for p in written:
        print(f"wrote={p}")
    return 0


def cmd_synth_data(args) -> int:
    base = generate_synthetic(args.root, args.dataset, args.train, args.test,
                              args.seed)
    print(f"wrote={base}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpnas",
        description="Differentially private neural architecture search")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--dataset", help="override dataset id")
        p.add_argument("--seed", type=int, help="override seed")
        p.add_argument("--data-root", dest="data_root",
                       help="dataset root (or DPNAS_DATA_ROOT)")

    p = sub.add_parser("calibrate", help="noise multiplier for a budget")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--sample-rate", dest="sample_rate", type=float,
                   required=True)
    p.add_argument("--steps", type=int, required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("search", help="run the architecture search")
    common(p)
    p.add_argument("--strategy", choices=("rl", "random"))
    p.add_argument("--resume", help="checkpoint file to resume from")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="budgeted from-scratch training")
    common(p)
    p.add_argument("--arch", help="fixture[:dataset] or architecture JSON path")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--train-subset", dest="train_subset", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="activation/pooling component sweeps")
    common(p)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--train-subset", dest="train_subset", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("transfer", help="evaluate a stored arch cross-dataset")
    common(p)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--train-subset", dest="train_subset", type=int)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("sanity", help="accuracy at initialization")
    common(p)
    p.add_argument("--arch")
    p.set_defaults(func=cmd_sanity)

    p = sub.add_parser("analyze", help="operation frequency statistics")
    p.add_argument("--controller", required=True, help="controller checkpoint")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("plot", help="render figures from logs/results")
    p.add_argument("kind", choices=("search", "budget"))
    p.add_argument("--log", action="append", default=[],
                   help="label=path to a search log (kind=search)")
    p.add_argument("--results", action="append", default=[],
                   help="results JSONL path (kind=budget)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("synth-data", help="write a synthetic stand-in dataset")
    p.add_argument("--root", required=True)
    p.add_argument("--dataset", required=True,
                   choices=("mnist", "fashionmnist", "cifar10"))
    p.add_argument("--train", type=int, default=60000)
    p.add_argument("--test", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DpnasError as exc:
        print(f"error {type(exc).__name__}: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
