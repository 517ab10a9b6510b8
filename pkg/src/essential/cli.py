"""Config-driven experiment front end.

Commands: run, ablate, sweep-memory, sweep-expansion, report. Exit codes:
0 success, 1 usage/config error, 2 data error, 3 training failure. The
dataset root comes from the config or the ESSENTIAL_DATA_DIR variable.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import metrics, reporting
from .datamodel import (EXPANSION_VARIANTS, RunConfig, SELECTORS, SIMILARITIES)
from .exceptions import ConfigError, DataError, TrainingError
from .sessions import run_experiment

_AXES = {
    "selector": ("selector", SELECTORS),
    "similarity": ("similarity", SIMILARITIES),
    "expansion_variant": ("expansion_variant", EXPANSION_VARIANTS),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="essential", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def _common(p):
        p.add_argument("--config", required=True, help="plain-text key=value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--run-dir", default=None, help="output directory for this invocation")

    run_p = sub.add_parser("run", help="run one full experiment")
    _common(run_p)

    ablate_p = sub.add_parser("ablate", help="run an ablation grid over method axes")
    _common(ablate_p)
    ablate_p.add_argument("--axes", required=True,
                          help="comma list from: selector,similarity,expansion_variant")

    mem_p = sub.add_parser("sweep-memory", help="accuracy versus memory budget")
    _common(mem_p)
    mem_p.add_argument("--sizes", required=True, help="comma list of memory budgets")

    exp_p = sub.add_parser("sweep-expansion", help="accuracy per expansion variant")
    _common(exp_p)
    exp_p.add_argument("--variants", default=",".join(EXPANSION_VARIANTS),
                       help="comma list of expansion variants")

    rep_p = sub.add_parser("report", help="re-emit summary and plots for a finished run")
    rep_p.add_argument("--run-dir", required=True)
    return parser


def _load_config(args) -> RunConfig:
    config = RunConfig.from_file(args.config)
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if overrides:
        config = config.with_overrides(overrides)
    return config


def _default_run_dir(config: RunConfig, suffix: str = "") -> str:
    cfg = config.resolve()
    stem = (f"{cfg.dataset}_{cfg.composition}_{cfg.selector}_{cfg.similarity}_"
            f"{cfg.expansion_variant}_s{cfg.seed}{suffix}")
    base = os.path.join(cfg.output_dir, stem)
    path, n = base, 1
    while os.path.exists(path):
        path = f"{base}-{n}"
        n += 1
    return path


def _print_summary(rows, reference=None):
    human, _ = reporting.format_summary_table(rows, reference)
    print(human, end="")


def cmd_run(args) -> int:
    config = _load_config(args)
    run_dir = args.run_dir or _default_run_dir(config)
    reports = run_experiment(config, run_dir=run_dir)
    _print_summary([reporting.summary_rows("ours", reports[-1].accuracies)])
    print(f"run directory: {run_dir}")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    axes = [a.strip() for a in args.axes.split(",") if a.strip()]
    for axis in axes:
        if axis not in _AXES:
            raise ConfigError(f"unknown ablation axis {axis!r}; pick from {sorted(_AXES)}")
    root = args.run_dir or _default_run_dir(config, suffix="_ablate")
    os.makedirs(root, exist_ok=True)

    base_cfg = config.resolve()
    reference_dir = os.path.join(root, "ours")
    reports = run_experiment(base_cfg, run_dir=reference_dir)
    reference = reporting.summary_rows("ours", reports[-1].accuracies)
    rows = [reference]
    for axis in axes:
        key, values = _AXES[axis]
        for value in values:
            if value == getattr(base_cfg, key):
                continue
            cell_cfg = base_cfg.with_overrides({key: value})
            cell_dir = os.path.join(root, f"{key}={value}")
            cell_reports = run_experiment(cell_cfg, run_dir=cell_dir)
            rows.append(reporting.summary_rows(
                f"{key}={value}", cell_reports[-1].accuracies))

    human, tsv = reporting.format_summary_table(rows, reference)
    with open(os.path.join(root, "ablation_summary.txt"), "w") as fh:
        fh.write(human)
    with open(os.path.join(root, "ablation_summary.tsv"), "w") as fh:
        fh.write(tsv)
    print(human, end="")
    print(f"grid directory: {root}")
    return 0


def cmd_sweep_memory(args) -> int:
    config = _load_config(args)
    sizes = []
    for token in args.sizes.split(","):
        token = token.strip()
        if not token:
            continue
        size = int(token)
        if size <= 0:
            raise ConfigError(f"memory size must be positive, got {size}")
        if size not in sizes:
            sizes.append(size)
    if not sizes:
        raise ConfigError("no memory sizes given")
    root = args.run_dir or _default_run_dir(config, suffix="_memsweep")
    os.makedirs(root, exist_ok=True)
    rows = []
    finals = []
    for size in sizes:
        cfg = config.with_overrides({"memory_size": str(size)})
        reports = run_experiment(cfg, run_dir=os.path.join(root, f"m{size}"))
        rows.append(reporting.summary_rows(f"m={size}", reports[-1].accuracies))
        finals.append(reports[-1].accuracy)
    human, tsv = reporting.format_summary_table(rows)
    with open(os.path.join(root, "memory_sweep.txt"), "w") as fh:
        fh.write(human)
    with open(os.path.join(root, "memory_sweep.tsv"), "w") as fh:
        fh.write(tsv)
    metrics.plot_sweep(sizes, finals, "memory size",
                       os.path.join(root, "memory_sweep.png"))
    print(human, end="")
    print(f"sweep directory: {root}")
    return 0


def cmd_sweep_expansion(args) -> int:
    config = _load_config(args)
    variants = []
    for token in args.variants.split(","):
        token = token.strip()
        if not token:
            continue
        if token not in EXPANSION_VARIANTS:
            raise ConfigError(f"unknown expansion variant {token!r}")
        if token not in variants:
            variants.append(token)
    if not variants:
        raise ConfigError("no expansion variants given")
    root = args.run_dir or _default_run_dir(config, suffix="_expsweep")
    os.makedirs(root, exist_ok=True)
    rows, finals = [], []
    for variant in variants:
        cfg = config.with_overrides({"expansion_variant": variant})
        reports = run_experiment(cfg, run_dir=os.path.join(root, variant))
        rows.append(reporting.summary_rows(variant, reports[-1].accuracies))
        finals.append(reports[-1].accuracy)
    human, tsv = reporting.format_summary_table(rows)
    with open(os.path.join(root, "expansion_sweep.txt"), "w") as fh:
        fh.write(human)
    with open(os.path.join(root, "expansion_sweep.tsv"), "w") as fh:
        fh.write(tsv)
    metrics.plot_sweep(variants, finals, "expansion variant",
                       os.path.join(root, "expansion_sweep.png"))
    print(human, end="")
    print(f"sweep directory: {root}")
    return 0


def cmd_report(args) -> int:
    reports = reporting.load_reports(args.run_dir)
    if not reports:
        raise DataError(f"no session reports under {args.run_dir}")
    final = reports[-1]
    _print_summary([reporting.summary_rows("ours", final.accuracies)])
    plots = os.path.join(args.run_dir, "plots")
    os.makedirs(plots, exist_ok=True)
    metrics.plot_accuracy_curve({"ours": final.accuracies},
                                os.path.join(plots, "accuracy_vs_session.png"))
    metrics.plot_confusion(final.confusion, final.classes,
                           os.path.join(plots, "confusion_final.png"))
    curves = [r.uncertainty_per_epoch for r in reports]
    metrics.plot_uncertainty(curves, os.path.join(plots, "uncertainty_vs_epoch.png"))
    bias = [r.misclassified_as_base_per_epoch for r in reports]
    if any(bias):
        metrics.plot_bias(bias, os.path.join(plots, "bias_vs_epoch.png"))
    print(f"plots written under {plots}")
    return 0


_COMMANDS = {
    "run": cmd_run,
    "ablate": cmd_ablate,
    "sweep-memory": cmd_sweep_memory,
    "sweep-expansion": cmd_sweep_expansion,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
