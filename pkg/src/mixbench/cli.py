"""Command-line entry point: ``mixbench {ingest,select,fit,bench,ledger,synth}``.

Exit codes: 0 success, 1 configuration or input error, 2 a model failed.
"""

import argparse
import ast
import configparser
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from . import feature_selection as fs
from .panel_data import (DEFAULT_STANDARDIZED, VOICE_FEATURES, SchemaError, SplitSpec, TransformSpec, load_csv,
                         split, write_csv)

EXIT_OK, EXIT_CONFIG, EXIT_MODEL = 0, 1, 2

log = logging.getLogger("mixbench")


def _parse_value(text: str):
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _int_list(text) -> list:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    text = str(text).strip()
    if not text:
        return []
    if "-" in text and "," not in text and not text.startswith("-"):
        a, b = text.split("-")
        return list(range(int(a), int(b) + 1))
    return [int(v) for v in text.replace(",", " ").split()]


def read_config(path) -> tuple:
    """Parse an INI config into ``(run settings, per-model overrides)``.

    ``[run]`` holds ``data``, ``split``, ``fraction``, ``seeds``, ``models``,
    ``output`` and ``workers``; ``[model.<name>]`` sections override preset
    options with Python literals (``hidden_layer_sizes = (3, 2)``).
    """
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise bench.ConfigError(f"cannot read config file {path}")
    run = dict(cp["run"]) if cp.has_section("run") else {}
    overrides = {}
    for sec in cp.sections():
        if sec.startswith("model."):
            overrides[sec[len("model."):]] = {k: _parse_value(v) for k, v in cp[sec].items()}
        elif sec != "run":
            raise bench.ConfigError(f"unknown config section [{sec}]")
    return run, overrides


def build_run_config(args) -> bench.RunConfig:
    run, overrides = read_config(args.config) if getattr(args, "config", None) else ({}, {})
    data = args.data or run.get("data")
    mode = args.split or run.get("split", "last_row")
    fraction = args.fraction if args.fraction is not None else float(run.get("fraction", 0.0))
    seeds = _int_list(args.seeds) if args.seeds is not None else _int_list(run.get("seeds", "0-9"))
    models = args.models or [m.strip() for m in run.get("models", ",".join(bench.TABLE_ORDER)).split(",") if m.strip()]
    workers = args.workers or int(run.get("workers", 1))
    output = args.out or run.get("output")
    for kv in getattr(args, "set", None) or []:
        key, _, value = kv.partition("=")
        model, _, opt = key.partition(".")
        if not opt:
            raise bench.ConfigError(f"--set expects model.option=value, got {kv!r}")
        overrides.setdefault(model, {})[opt] = _parse_value(value)
    try:
        spec = SplitSpec(mode, fraction)
    except ValueError as exc:
        raise bench.ConfigError(str(exc)) from None
    cfg = bench.RunConfig(data, spec, models, seeds, output, workers, overrides)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# subcommands

def cmd_ingest(args) -> int:
    data = load_csv(args.data)
    print(f"rows={data.n_rows} subjects={len(data.subjects)}")
    sizes = data.group_sizes()
    if sizes:
        print(f"rows per subject: min={min(sizes.values())} max={max(sizes.values())}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_csv(data, out)
        print(f"wrote {out} and {out}.provenance")
    return EXIT_OK


def cmd_select(args) -> int:
    data = load_csv(args.data)
    spec = TransformSpec(standardize_features=True, columns=tuple(DEFAULT_STANDARDIZED)).fit(data)
    std = spec.apply(data)
    y = np.log(std.response) if args.log_response else std.response
    candidates = ["age", "sex", "test_time", *VOICE_FEATURES]
    path = fs.lasso_select(std, y, candidates, folds=args.folds, seed=args.seed)
    trace = fs.stepwise_backward(path.selected, std, ("intercept",), response=y)
    lines = [f"lasso lambda={path.lambda_chosen:.6g} ({path.lambda_choice_rule})",
             "lasso selected: " + ",".join(path.selected), "", "stepwise (ML AIC):", trace.report().rstrip()]
    if len(trace.final_terms) >= 2:
        lines += ["", "VIF:", fs.vif_data(std, trace.final_terms).report().rstrip()]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "selection.txt").write_text(text, encoding="utf-8")
        (out / "terms.txt").write_text("\n".join(trace.final_terms) + "\n", encoding="utf-8")
    return EXIT_OK


def _print_report(report: bench.BenchReport) -> None:
    print(report.body_text(), end="")
    for r in report.rows:
        if r.failed:
            print(f"{r.model}: {r.status}", file=sys.stderr)


def cmd_fit(args) -> int:
    args.models = [args.model]
    cfg = build_run_config(args)
    report = bench.run_benchmark(cfg)
    _print_report(report)
    if args.plots and cfg.output_dir:
        res = next((r for r in report.results if r.error is None), None)
        if res is not None and not isinstance(res.fit, tuple):
            data = load_csv(cfg.data_path)
            train, _ = split(data, cfg.split)
            spec = res.fit.extra.get("transform") if hasattr(res.fit, "extra") else None
            spec = spec or TransformSpec(standardize_features=True, log_response=True).fit(train)
            bench.emit_plot_data({args.model: res.fit}, Path(cfg.output_dir) / "plots", spec.apply(train))
    return EXIT_MODEL if report.any_failed else EXIT_OK


def cmd_bench(args) -> int:
    cfg = build_run_config(args)
    report = bench.run_benchmark(cfg)
    _print_report(report)
    return EXIT_MODEL if report.any_failed else EXIT_OK


def cmd_ledger(args) -> int:
    data = load_csv(args.data)
    start = fs.PRESET_TERMS if args.preset else None
    ledger = bench.refinement_ledger(data, folds=args.folds, seed=args.seed, log_start_terms=start)
    text = ledger.report()
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ledger.txt").write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import telemonitoring_like
    data = telemonitoring_like(n_subjects=args.subjects, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(data, out)
    print(f"wrote {data.n_rows} rows for {len(data.subjects)} subjects to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def _run_options(p, with_models=True):
    p.add_argument("data", nargs="?", help="dataset CSV (UCI telemonitoring layout)")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--split", choices=["last_row", "last_fraction"])
    p.add_argument("--fraction", type=float)
    p.add_argument("--seeds", help="e.g. '0-9' or '1,2,3'")
    if with_models:
        p.add_argument("--models", nargs="+", choices=bench.TABLE_ORDER)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", metavar="MODEL.OPTION=VALUE", help="override a preset option")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixbench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a dataset and rewrite it with a provenance sidecar")
    p.add_argument("data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("select", help="LASSO + backward AIC selection + VIF")
    p.add_argument("data")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-response", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("fit", help="fit one model preset on the configured split")
    p.add_argument("model", choices=bench.TABLE_ORDER)
    _run_options(p, with_models=False)
    p.add_argument("--plots", action="store_true", help="also write plot-ready CSVs")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("bench", help="run the full model comparison")
    _run_options(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ledger", help="AIC refinement ledger")
    p.add_argument("data")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", action="store_true", help="start the log-response stage from the five-term preset")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ledger)

    p = sub.add_parser("synth", help="write a synthetic dataset with the same schema")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, default=42)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (bench.ConfigError, SchemaError, FileNotFoundError, configparser.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
