"""Command-line front end: attack/defense runs, probes, sweeps, reports.

Exit codes: 0 success, 1 usage error, 2 runtime or numerical failure,
3 threshold failure in `suite --check`.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from .data import save_idx
from .harness import (
    ExperimentConfig,
    aggregate_reports,
    default_suite_cells,
    evaluate,
    load_source_datasets,
    prepare_data,
    run_defense,
    run_suite,
    smoothness_for_model,
    train_backdoor,
    write_manifest,
    write_metrics_csv,
)
from .hessian import write_density_csv, write_summary_text
from .model import load_checkpoint, save_checkpoint
from .purification import write_trace_csv


class CliParser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> CliParser:
    parser = CliParser(prog="backdoorlab",
                       description="backdoor poisoning, sharpness probes, and head purification")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    def common(p):
        p.add_argument("-c", "--config", help="experiment config file (ini sections)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--outdir", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="data seed (overrides config)")

    p = sub.add_parser("gen-data", help="generate the configured dataset and export IDX files")
    common(p)

    p = sub.add_parser("train", help="train a classifier on the configured data")
    common(p)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--attack", action="store_true", help="poison the training set (default)")
    mode.add_argument("--benign", action="store_true", help="train on clean data")

    p = sub.add_parser("purify", help="run a defense on a trained checkpoint")
    common(p)
    p.add_argument("--model", required=True, help="checkpoint to purify")
    p.add_argument("--method", choices=["ngf", "sgd", "adagrad", "rmsprop", "adam", "sam", "none"])
    p.add_argument("--scope", choices=["head", "full"])

    p = sub.add_parser("eval", help="evaluate a checkpoint's clean accuracy and attack success")
    common(p)
    p.add_argument("--model", required=True)

    p = sub.add_parser("smoothness", help="estimate lambda_max, trace, and spectral density")
    common(p)
    p.add_argument("--model", required=True)

    p = sub.add_parser("suite", help="run the desk-scale experiment matrix")
    common(p)
    p.add_argument("--check", action="store_true",
                   help="evaluate per-cell thresholds; exit 3 on failure")

    p = sub.add_parser("report", help="aggregate per-cell metrics under a directory")
    p.add_argument("--outdir", required=True)
    p.add_argument("--out", default="report.csv", help="aggregate CSV filename")
    return parser


def _usage_error(message: str) -> SystemExit:
    print(f"backdoorlab: error: {message}", file=sys.stderr)
    return SystemExit(1)


def load_config(args) -> ExperimentConfig:
    if args.config and not Path(args.config).exists():
        raise _usage_error(f"config file not found: {args.config}")
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    for item in getattr(args, "set", []):
        key, sep, value = item.partition("=")
        if not sep:
            raise _usage_error(f"--set needs SECTION.KEY=VALUE, got {item!r}")
        try:
            config.apply_override(key.strip(), value.strip())
        except (KeyError, ValueError) as exc:
            raise _usage_error(str(exc))
    if getattr(args, "seed", None) is not None:
        config.data.seed = args.seed
    if getattr(args, "outdir", None):
        config.outdir = args.outdir
    return config


def _outdir(config: ExperimentConfig) -> Path:
    out = Path(config.outdir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    config = load_config(args)
    out = _outdir(config)
    train, test = load_source_datasets(config)
    save_idx(train, out / "train-images.idx", out / "train-labels.idx")
    save_idx(test, out / "test-images.idx", out / "test-labels.idx")
    config.save(out / "config.ini")
    write_manifest(out / "manifest.txt", config,
                   {name: out / name for name in
                    ("train-images.idx", "train-labels.idx",
                     "test-images.idx", "test-labels.idx")},
                   {}, 0.0)
    print(f"wrote {train.n} train / {test.n} test samples to {out}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args)
    if args.benign:
        config.attack.enabled = False
    out = _outdir(config)
    start = time.perf_counter()
    result = train_backdoor(config)
    runtime = time.perf_counter() - start
    ckpt = out / "model.ckpt"
    save_checkpoint(result.net, ckpt)
    write_metrics_csv({"initial": result.metrics}, out / "metrics.csv")
    config.save(out / "config.ini")
    write_manifest(out / "manifest.txt", config,
                   {"checkpoint": ckpt, "metrics": out / "metrics.csv"},
                   {"initial": result.metrics}, runtime)
    kind = "benign" if not config.attack.enabled else f"attack[{config.attack.trigger}]"
    print(f"{kind}: ACC={result.metrics.acc:.4f} ASR={result.metrics.asr:.4f} -> {ckpt}")
    return 0


def cmd_purify(args) -> int:
    config = load_config(args)
    if args.method:
        config.defense.method = args.method
    if args.scope:
        config.defense.scope = args.scope
    out = _outdir(config)
    net = load_checkpoint(args.model)
    bundle = prepare_data(config)
    result = run_defense(config, net, bundle)
    ckpt = out / "purified.ckpt"
    save_checkpoint(result.net, ckpt)
    write_trace_csv(result.trace, out / "trace.csv")
    metrics = {"before": result.before, "after": result.after}
    write_metrics_csv(metrics, out / "metrics.csv")
    config.save(out / "config.ini")
    write_manifest(out / "manifest.txt", config,
                   {"checkpoint": ckpt, "trace": out / "trace.csv",
                    "metrics": out / "metrics.csv"},
                   metrics, result.runtime_seconds)
    print(f"{config.defense.method}[{config.defense.scope}]: "
          f"ASR {result.before.asr:.4f} -> {result.after.asr:.4f}, "
          f"ACC {result.before.acc:.4f} -> {result.after.acc:.4f} "
          f"({result.runtime_seconds:.1f}s)")
    return 0


def cmd_eval(args) -> int:
    config = load_config(args)
    net = load_checkpoint(args.model)
    bundle = prepare_data(config)
    record = evaluate(net, bundle.clean_test, bundle.poison_test, config.attack.target)
    out = _outdir(config)
    write_metrics_csv({"eval": record}, out / "metrics.csv")
    print(f"ACC={record.acc:.4f} ASR={record.asr:.4f} "
          f"(n_clean={record.n_clean} n_poison={record.n_poison})")
    return 0


def cmd_smoothness(args) -> int:
    config = load_config(args)
    net = load_checkpoint(args.model)
    bundle = prepare_data(config)
    report = smoothness_for_model(config, net, bundle)
    out = _outdir(config)
    write_density_csv(report, out / "density.csv")
    write_summary_text(report, out / "smoothness.txt")
    print(f"lambda_max={report.lambda_max:.6g} (converged={report.lambda_max_converged}) "
          f"trace={report.trace:.6g}+-{report.trace_stderr:.3g} n={report.n_samples}")
    return 0


def cmd_suite(args) -> int:
    config = load_config(args)
    cells = default_suite_cells(include_checks=args.check)
    results = run_suite(config, cells, config.outdir, check=args.check)
    width = max(len(r.name) for r in results)
    for r in results:
        if not r.ok:
            print(f"{r.name:<{width}}  ERROR {r.error}")
        else:
            flag = "" if not args.check else ("  [pass]" if r.checks_passed else "  [FAIL]")
            print(f"{r.name:<{width}}  ASR {r.asr_before:.3f}->{r.asr_after:.3f}  "
                  f"ACC {r.acc_before:.3f}->{r.acc_after:.3f}{flag}")
    print(f"suite results in {Path(config.outdir) / 'suite.csv'}")
    if any(not r.ok for r in results):
        return 2
    if args.check and any(not r.checks_passed for r in results):
        return 3
    return 0


def cmd_report(args) -> int:
    out = Path(args.outdir)
    n = aggregate_reports(out, out / args.out)
    print(f"aggregated {n} metric rows into {out / args.out}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "purify": cmd_purify,
    "eval": cmd_eval,
    "smoothness": cmd_smoothness,
    "suite": cmd_suite,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except SystemExit:
        raise
    except Exception as exc:  # runtime or numerical failure
        print(f"backdoorlab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
