"""Benchmark harness: presets, seeded runs, metrics, reports and the AIC refinement ledger."""

import csv
import hashlib
import logging
import math
import os
import platform
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from scipy.stats import norm

from . import feature_selection as fs
from . import gamm, gnmm, lmm, nme
from .panel_data import (DEFAULT_STANDARDIZED, NETWORK_INPUTS, VOICE_FEATURES, PanelDataset, ResponseScaling,
                         SplitSpec, TransformSpec, apply_transforms, design_matrices, load_csv, network_data,
                         split)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics

class Metrics(NamedTuple):
    mse: float
    mae: float
    n: int


def metrics(pred, truth) -> Metrics:
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.size != truth.size:
        raise ValueError(f"length mismatch: {pred.size} predictions, {truth.size} targets")
    if pred.size == 0:
        raise ValueError("empty input")
    d = pred - truth
    return Metrics(float(np.mean(d * d)), float(np.mean(np.abs(d))), int(d.size))


# ---------------------------------------------------------------------------
# presets

@dataclass(frozen=True)
class ModelPreset:
    name: str
    kind: str  # lmm, gamm, gnmm, nme
    options: dict = field(default_factory=dict)

    @property
    def stochastic(self) -> bool:
        return self.kind in ("gnmm", "nme")


PRESETS = {
    "lmm_final": ModelPreset("lmm_final", "lmm", {
        "fixed_terms": fs.FINAL_MODEL_TERMS, "random_terms": fs.FINAL_RANDOM_TERMS,
        "criterion": "reml", "log_response": True, "lognormal_correction": False}),
    "gamm_final": ModelPreset("gamm_final", "gamm", {
        "linear_terms": ("age", "hnr"), "random_terms": fs.FINAL_RANDOM_TERMS, "K": 10,
        "log_response": True, "lognormal_correction": False}),
    "gnmm_1layer": ModelPreset("gnmm_1layer", "gnmm", {
        "hidden_layer_sizes": (3,), "ridge_lambda": 0.001, "learning_rate": 0.005,
        "epochs": 500, "batch_size": 64, "random_intercept": True}),
    "gnmm_2layer": ModelPreset("gnmm_2layer", "gnmm", {
        "hidden_layer_sizes": (3, 2), "ridge_lambda": 0.002, "learning_rate": 0.005,
        "epochs": 500, "batch_size": 64, "random_intercept": True}),
    "nme_mlp": ModelPreset("nme_mlp", "nme", {
        "hidden_layer_sizes": (32, 16), "person_specific_groups": ("output.bias",),
        "epochs": 4000, "batch_size": 512, "learning_rate": 1e-3}),
    "ann_baseline": ModelPreset("ann_baseline", "gnmm", {
        "hidden_layer_sizes": (3,), "ridge_lambda": 0.001, "learning_rate": 0.001,
        "epochs": 500, "batch_size": 64, "random_intercept": False}),
}
TABLE_ORDER = ["lmm_final", "gamm_final", "gnmm_1layer", "gnmm_2layer", "nme_mlp", "ann_baseline"]


def resolve_preset(name: str, overrides: Optional[dict] = None) -> ModelPreset:
    if name not in PRESETS:
        raise ConfigError(f"unknown model {name!r}; choose from {', '.join(TABLE_ORDER)}")
    p = PRESETS[name]
    if overrides:
        unknown = set(overrides) - set(p.options)
        if unknown:
            raise ConfigError(f"{name}: unknown option(s) {sorted(unknown)}")
        p = replace(p, options={**p.options, **overrides})
    return p


@dataclass
class RunConfig:
    data_path: Optional[str] = None
    split: SplitSpec = field(default_factory=SplitSpec)
    models: list = field(default_factory=lambda: list(TABLE_ORDER))
    seeds: list = field(default_factory=lambda: list(range(10)))
    output_dir: Optional[str] = None
    workers: int = 1
    overrides: dict = field(default_factory=dict)  # model name -> option overrides

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if not self.models:
            raise ConfigError("no models configured")
        for m in self.models:
            resolve_preset(m, self.overrides.get(m))
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def presets(self) -> list:
        return [resolve_preset(m, self.overrides.get(m)) for m in self.models]

    def describe(self) -> str:
        lines = [f"data={self.data_path}", f"split={self.split.describe()}",
                 f"models={','.join(self.models)}", f"seeds={','.join(map(str, self.seeds))}"]
        for p in self.presets():
            lines.append(f"{p.name}=" + ";".join(f"{k}:{v}" for k, v in sorted(p.options.items())))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# single runs

class RunResult(NamedTuple):
    model: str
    seed: Optional[int]
    metrics: Optional[Metrics]
    predictions: Optional[np.ndarray]
    fit: object
    error: Optional[str]
    seconds: float


def _transform(opts, standardize=True):
    return TransformSpec(standardize_features=standardize, log_response=opts.get("log_response", False),
                         columns=tuple(DEFAULT_STANDARDIZED),
                         lognormal_correction=opts.get("lognormal_correction", False))


def fit_predict(preset: ModelPreset, train: PanelDataset, test: PanelDataset, seed: int = 0):
    """Fit one preset on ``train`` and return ``(predictions on test, fit object)``."""
    o = preset.options
    if preset.kind == "lmm":
        tr, te, spec = apply_transforms(train, test, _transform(o))
        fit = lmm.fit(design_matrices(tr, list(o["fixed_terms"]), list(o["random_terms"])), o["criterion"])
        fit.extra["transform"] = spec
        return lmm.predict(fit, te, spec), fit
    if preset.kind == "gamm":
        tr, te, spec = apply_transforms(train, test, _transform(o))
        design = gamm.gamm_design(tr, o["linear_terms"], o["random_terms"], K=o["K"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", gamm.LambdaBoundaryWarning)
            _, fit = gamm.select_lambda(design)
        return gamm.predict(fit, te, spec), fit
    tr, te, spec = apply_transforms(train, test, _transform(o))
    scaling = ResponseScaling.fit(tr.response)
    nd = network_data(tr, NETWORK_INPUTS, scaling.scale(tr.response))
    nt = network_data(te, NETWORK_INPUTS, scaling.scale(te.response), subjects=nd.subjects)
    if np.any(nt.seg < 0):
        raise KeyError("test set contains subjects unseen in training")
    if preset.kind == "gnmm":
        cfg = gnmm.GnmmConfig(input_dim=len(NETWORK_INPUTS), seed=seed, **o)
        state = gnmm.train(cfg, nd)
        return gnmm.predict(state, nt, scaling), (state, cfg)
    if preset.kind == "nme":
        cfg = nme.NmeConfig(input_dim=len(NETWORK_INPUTS), seed=seed, **o)
        state = nme.train(cfg, nd)
        return nme.predict(state, nt, scaling), (state, cfg)
    raise ConfigError(f"unknown model kind {preset.kind!r}")


def _task(args) -> RunResult:
    preset, train, test, seed = args
    t0 = time.perf_counter()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", lmm.ConvergenceWarning)
            pred, fit = fit_predict(preset, train, test, seed if seed is not None else 0)
        return RunResult(preset.name, seed, metrics(pred, test.response), pred, fit, None,
                         time.perf_counter() - t0)
    except Exception as exc:  # a failed model must not abort the others
        log.exception("model %s (seed %s) failed", preset.name, seed)
        return RunResult(preset.name, seed, None, None, None, f"{type(exc).__name__}: {exc}",
                         time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# report

@dataclass
class ReportRow:
    model: str
    mse_mean: float
    mse_std: float
    mae_mean: float
    mae_std: float
    seeds: list
    split: str
    wall_seconds: float
    status: str = "ok"
    per_seed: list = field(default_factory=list)  # (seed, Metrics)
    n_runs: int = 1

    @property
    def failed(self) -> bool:
        return self.status != "ok"


@dataclass
class BenchReport:
    rows: list
    metadata: dict
    results: list = field(default_factory=list)

    def row(self, model: str) -> ReportRow:
        for r in self.rows:
            if r.model == model:
                return r
        raise KeyError(model)

    @property
    def any_failed(self) -> bool:
        return any(r.failed for r in self.rows)

    def body_text(self) -> str:
        """Aligned table; wall times are kept out so bodies are reproducible."""
        head = f"{'model':<14}{'MSE':>12}{'MSE sd':>12}{'MAE':>10}{'MAE sd':>10}{'runs':>6}  {'split':<12}status"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.model:<14}{r.mse_mean:>12.4f}{r.mse_std:>12.4f}{r.mae_mean:>10.4f}{r.mae_std:>10.4f}"
                         f"{r.n_runs:>6}  {r.split:<12}{r.status}")
        return "\n".join(lines) + "\n"

    def body_csv(self) -> str:
        out = ["model,mse_mean,mse_std,mae_mean,mae_std,n_runs,seeds,split,status"]
        for r in self.rows:
            nums = ",".join(repr(float(v)) for v in (r.mse_mean, r.mse_std, r.mae_mean, r.mae_std))
            out.append(f"{r.model},{nums},{r.n_runs},{' '.join(map(str, r.seeds))},{r.split},\"{r.status}\"")
        return "\n".join(out) + "\n"


def _sd(x):
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def _row(preset: ModelPreset, results, split_mode: str) -> ReportRow:
    ok = [r for r in results if r.error is None]
    wall = float(sum(r.seconds for r in results))
    seeds = [r.seed for r in results if r.seed is not None]
    if len(ok) < len(results):
        msg = "; ".join(f"seed {r.seed}: {r.error}" if r.seed is not None else r.error
                        for r in results if r.error)
        return ReportRow(preset.name, math.nan, math.nan, math.nan, math.nan, seeds, split_mode, wall,
                         f"failed: {msg}", n_runs=len(results))
    mse = [r.metrics.mse for r in ok]
    mae = [r.metrics.mae for r in ok]
    return ReportRow(preset.name, float(np.mean(mse)), _sd(mse), float(np.mean(mae)), _sd(mae), seeds,
                     split_mode, wall, "ok", [(r.seed, r.metrics) for r in ok], len(results))


def run_benchmark(config: RunConfig, data: Optional[PanelDataset] = None) -> BenchReport:
    """Fit every configured model on the configured split and collect metrics.

    Deterministic models run once; stochastic ones once per seed.  Failures
    are recorded in the model's row and never stop the other models.
    """
    config.validate()
    if data is None:
        if not config.data_path:
            raise ConfigError("no dataset path configured")
        data = load_csv(config.data_path)
    train, test = split(data, config.split)
    presets = config.presets()
    tasks = []
    for p in presets:
        for seed in (config.seeds if p.stochastic else [None]):
            tasks.append((p, train, test, seed))
    t0 = time.perf_counter()
    if config.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_task, tasks))
    else:
        results = [_task(t) for t in tasks]
    rows = [_row(p, [r for r in results if r.model == p.name], config.split.mode) for p in presets]
    meta = {"n_train": train.n_rows, "n_test": test.n_rows, "subjects": len(data.subjects),
            "python": platform.python_version(), "numpy": np.__version__,
            "wall_seconds": time.perf_counter() - t0, "source": data.provenance.source}
    report = BenchReport(rows, meta, results)
    if config.output_dir:
        write_outputs(report, config, data, test)
    return report


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_predictions(path, test: PanelDataset, pred) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "test_time", "truth", "prediction"])
        for s, t, y, p in zip(test.subject_ids, test.col("test_time"), test.response, pred):
            w.writerow([int(s), repr(float(t)), repr(float(y)), repr(float(p))])


def _save_fit(result: RunResult, out: Path) -> None:
    stem = result.model if result.seed is None else f"{result.model}_seed{result.seed}"
    fit = result.fit
    if isinstance(fit, lmm.LmmFit):
        lmm.write_keyvalue(lmm.to_keyvalue(fit), out / f"{stem}.fit")
        (out / f"{stem}.txt").write_text(lmm.report_text(fit), encoding="utf-8")
    elif isinstance(fit, gamm.GammFit):
        (out / f"{stem}.txt").write_text(gamm.report_text(fit), encoding="utf-8")
    elif isinstance(fit, tuple) and isinstance(fit[0], gnmm.GnmmState):
        gnmm.save_state(fit[0], fit[1], out / f"{stem}.params")
    elif isinstance(fit, tuple) and isinstance(fit[0], nme.NmeState):
        nme.save_state(fit[0], fit[1], out / f"{stem}.params")


def write_outputs(report: BenchReport, config: RunConfig, data: PanelDataset, test: PanelDataset) -> None:
    out = Path(config.output_dir)
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    (out / "fits").mkdir(exist_ok=True)
    (out / "report.txt").write_text(report.body_text(), encoding="utf-8")
    (out / "report.csv").write_text(report.body_csv(), encoding="utf-8")
    with open(out / "timing.txt", "w", encoding="utf-8") as fh:
        for r in report.rows:
            fh.write(f"{r.model}={r.wall_seconds:.3f}\n")
        for k, v in report.metadata.items():
            fh.write(f"meta.{k}={v}\n")
    for r in report.results:
        if r.error is not None:
            continue
        stem = r.model if r.seed is None else f"{r.model}_seed{r.seed}"
        write_predictions(out / "predictions" / f"{stem}.csv", test, r.predictions)
        _save_fit(r, out / "fits")
    cfg_text = config.describe()
    manifest = [f"config_sha256={hashlib.sha256(cfg_text.encode()).hexdigest()}"]
    if config.data_path and os.path.exists(config.data_path):
        manifest.append(f"dataset_sha256={_sha256_file(config.data_path)}")
    else:
        manifest.append(f"dataset_sha256={hashlib.sha256(data.values.tobytes()).hexdigest()}")
    manifest.append(f"dataset_source={data.provenance.source}")
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    (out / "config.txt").write_text(cfg_text, encoding="utf-8")


# ---------------------------------------------------------------------------
# plot data

def emit_plot_data(fits: dict, output_dir, train: Optional[PanelDataset] = None) -> list:
    """Write plot-ready CSVs for the fits present.

    ``fits`` maps names to fitted objects; a :class:`gamm.GammFit` yields the
    200-point smooth, and with ``train`` (on the model's scale) the first
    mixed fit also yields per-subject trajectories and residual quantiles.
    """
    if not fits:
        raise ValueError("no fits supplied: need a GAMM or LMM fit to emit plot data")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    gfit = next((f for f in fits.values() if isinstance(f, gamm.GammFit)), None)
    if gfit is not None:
        p = out / "gamm_smooth.csv"
        gamm.write_smooth_csv(gfit, p)
        written.append(p)
    if train is not None:
        mixed = next((f for f in fits.values() if isinstance(f, (lmm.LmmFit, gamm.GammFit))), None)
        if mixed is None:
            raise ValueError("trajectory data needs an LMM or GAMM fit")
        fitted = (lmm.predict_linear(mixed, train) if isinstance(mixed, lmm.LmmFit)
                  else gamm.predict_linear(mixed, train))
        p = out / "trajectories.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["subject", "test_time", "observed", "fitted"])
            for s, t, y, f in zip(train.subject_ids, train.col("test_time"), train.response, fitted):
                w.writerow([int(s), repr(float(t)), repr(float(y)), repr(float(f))])
        written.append(p)
        resid = train.response - fitted
        order = np.argsort(resid)
        q = norm.ppf((np.arange(1, resid.size + 1) - 0.5) / resid.size)
        p = out / "residuals.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["fitted", "residual", "sorted_residual", "normal_quantile"])
            for f, r, sr, qq in zip(fitted, resid, resid[order], q):
                w.writerow([repr(float(f)), repr(float(r)), repr(float(sr)), repr(float(qq))])
        written.append(p)
    if not written:
        raise ValueError("no GAMM fit for the smooth CSV and no training data for trajectories")
    return written


# ---------------------------------------------------------------------------
# refinement ledger

class LedgerStep(NamedTuple):
    step: str
    regime: str  # likelihood scale; AICs are comparable only within a regime
    fixed_terms: tuple
    random_terms: tuple
    aic: float


@dataclass
class RefinementLedger:
    steps: list
    lasso: Optional[fs.LassoPath] = None
    stepwise: Optional[fs.StepwiseTrace] = None
    log_stepwise: Optional[fs.StepwiseTrace] = None
    vif: Optional[fs.VifReport] = None
    interactions: list = field(default_factory=list)
    preset_interactions: list = field(default_factory=list)

    def regimes(self) -> dict:
        out = {}
        for s in self.steps:
            out.setdefault(s.regime, []).append(s.aic)
        return out

    @property
    def monotone(self) -> bool:
        return all(all(b < a for a, b in zip(v, v[1:])) for v in self.regimes().values())

    @property
    def final_terms(self) -> tuple:
        return self.steps[-1].fixed_terms

    def report(self) -> str:
        lines = [f"{'step':<28}{'regime':<8}{'AIC':>14}  terms"]
        for s in self.steps:
            lines.append(f"{s.step:<28}{s.regime:<8}{s.aic:>14.4f}  {','.join(s.fixed_terms)} | "
                         f"random={','.join(s.random_terms)}")
        lines.append(f"strictly decreasing within each regime: {self.monotone}")
        if self.preset_interactions:
            lines.append("interaction scan on the preset terms (log response):")
            for r in self.preset_interactions:
                lines.append(f"  {r.pair[0]}:{r.pair[1]:<20}{r.aic:>14.4f}  delta={r.delta:+.4f}")
        return "\n".join(lines) + "\n"


def refinement_ledger(data: PanelDataset, candidates=None, folds: int = 10, seed: int = 0,
                      log_start_terms=None) -> RefinementLedger:
    """Full model -> LASSO -> stepwise + VIF -> log response -> interaction -> random slope.

    AICs come from ML fits.  The raw-response and log-response stages form
    two likelihood regimes whose AICs are not comparable with each other.
    ``log_start_terms`` replaces the stepwise result as the starting set of
    the log-response stage (e.g. :data:`feature_selection.PRESET_TERMS`).
    """
    candidates = list(candidates or ["age", "sex", "test_time", *VOICE_FEATURES])
    spec = TransformSpec(standardize_features=True, columns=tuple(c for c in DEFAULT_STANDARDIZED))
    std = spec.fit(data).apply(data)
    raw = std.response
    logy = np.log(raw)
    ri = ("intercept",)
    steps = []

    steps.append(LedgerStep("full model", "raw", tuple(candidates), ri, fs.ml_aic(std, candidates, ri)))
    path = fs.lasso_select(std, raw, candidates, folds=folds, seed=seed)
    selected = path.selected or candidates[:1]
    steps.append(LedgerStep("lasso", "raw", tuple(selected), ri, fs.ml_aic(std, selected, ri)))
    trace = fs.stepwise_backward(selected, std, ri)
    kept = trace.final_terms
    vif = fs.vif_data(std, kept) if len(kept) >= 2 else None
    steps.append(LedgerStep("stepwise + vif", "raw", tuple(kept), ri, trace.aics[-1]))

    start = list(log_start_terms) if log_start_terms is not None else kept
    log_trace = fs.stepwise_backward(start, std, ri, response=logy)
    terms = log_trace.final_terms
    steps.append(LedgerStep("log response", "log", tuple(terms), ri, log_trace.aics[-1]))

    scan, base_aic, _ = fs.interaction_scan(terms, std, ri, response=logy)
    if scan and scan[0].aic < base_aic:
        terms = terms + [f"{scan[0].pair[0]}:{scan[0].pair[1]}"]
        steps.append(LedgerStep("interaction", "log", tuple(terms), ri, scan[0].aic))
    slope = ("intercept", "test_time")
    steps.append(LedgerStep("random slope", "log", tuple(terms), slope, fs.ml_aic(std, terms, slope, logy)))

    preset_scan, _, _ = fs.interaction_scan(list(fs.PRESET_TERMS), std, ri, response=logy)
    return RefinementLedger(steps, path, trace, log_trace, vif, scan, preset_scan)
