"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .conformal import AdaptiveConformalFactuality, CalibrationError, load_predictor
from .data import (
    DataError,
    PipelineConfig,
    SplitSpec,
    dump_longform_dataset,
    dump_mcqa_dataset,
    parse_longform_dataset,
    parse_mcqa_dataset,
    split_dataset,
)
from .evaluation import calibration_error, coverage_by_group, dolan_more, removed_fraction
from .quantile import MLPQuantileRegressor, TrainConfig, TrainingError
from .synthetic import METHODS, SyntheticCategorySpec, gen_longform, gen_mcqa, run_coverage_trials

log = logging.getLogger("adaptive_conformal")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class ConfigError(ValueError):
    pass


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


class Manifest:
    """Run manifest; input digests are taken at construction."""

    def __init__(self, command: str, config: dict, inputs, seed):
        self.payload = {
            "tool": "adaptive-conformal",
            "version": __version__,
            "command": command,
            "config": config,
            "seed": seed,
            "inputs": {str(p): _digest(p) for p in inputs},
            "artifacts": [],
        }

    def add(self, path: Path) -> None:
        self.payload["artifacts"].append(str(path))

    def write(self, out_dir: Path) -> None:
        _atomic_write(out_dir / "manifest.json", _dumps(self.payload))


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return payload


PIPELINE_KEYS = {"task", "alpha", "beta", "transform_mode", "pca_dim", "tau_floor", "seed", "split", "train"}


def load_run_config(path, args=None) -> tuple[str, PipelineConfig, TrainConfig]:
    """Read a pipeline config file and apply CLI overrides."""
    raw = _read_json(path) if path else {}
    unknown = set(raw) - PIPELINE_KEYS
    if unknown:
        raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
    task = raw.get("task", "longform")
    mode = raw.get("transform_mode", "multiplicative")
    alpha = raw.get("alpha", 0.2)
    seed = raw.get("seed", 0)
    if args is not None:
        task = args.task or task
        if args.alpha is not None:
            alpha = args.alpha
        if args.seed is not None:
            seed = args.seed
        if args.mode == "original":
            mode = "none"
        elif args.mode == "adaptive" and mode == "none":
            mode = "multiplicative"
    if task not in ("longform", "mcqa"):
        raise ConfigError(f"task must be 'longform' or 'mcqa', got {task!r}")
    try:
        split = SplitSpec(tuple(raw.get("split", (0.3, 0.4, 0.3))), seed)
        cfg = PipelineConfig(
            alpha=float(alpha),
            beta=raw.get("beta", 1.0),
            transform_mode=mode,
            pca_dim=int(raw.get("pca_dim", 32)),
            tau_floor=float(raw.get("tau_floor", 1e-3)),
            seed=int(seed),
            split=split,
        )
        train = dict(raw.get("train", {}))
        train.setdefault("seed", int(seed))
        train_cfg = TrainConfig(**train)
    except (DataError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return task, cfg, train_cfg


def _config_snapshot(task, cfg: PipelineConfig, train_cfg: TrainConfig) -> dict:
    snap = asdict(cfg)
    snap["split"] = list(cfg.split.proportions)
    snap["task"] = task
    snap["train"] = asdict(train_cfg)
    return snap


def _load_dataset(path, task):
    parser = parse_longform_dataset if task == "longform" else parse_mcqa_dataset
    try:
        with open(path) as fh:
            return parser(fh)
    except FileNotFoundError:
        raise DataError(f"dataset not found: {path}") from None
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def build_predictor(task, cfg: PipelineConfig, train_cfg: TrainConfig) -> AdaptiveConformalFactuality:
    reg = MLPQuantileRegressor(
        hidden_dim=train_cfg.hidden_dim,
        epochs=train_cfg.epochs,
        batch_size=train_cfg.batch_size,
        learning_rate=train_cfg.learning_rate,
        weight_init_scale=train_cfg.weight_init_scale,
    )
    return AdaptiveConformalFactuality(
        task=task,
        alpha=cfg.alpha,
        transform_mode=cfg.transform_mode,
        pca_dim=cfg.pca_dim,
        tau_floor=cfg.tau_floor,
        regressor=reg,
        random_state=train_cfg.seed,
    )


def _method_name(mode: str) -> str:
    return "original" if mode == "none" else f"adaptive-{mode}"


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    raw = _read_json(args.config)
    for key in ("categories", "n_per_category"):
        if key not in raw:
            raise ConfigError(f"synth config missing field '{key}'")
    task = args.task or raw.get("task", "longform")
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    try:
        specs = [SyntheticCategorySpec.from_dict(c) for c in raw["categories"]]
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    except DataError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    manifest = Manifest("synth", {**raw, "task": task, "seed": seed}, [args.config], seed)
    buf = io.StringIO()
    if task == "longform":
        dump_longform_dataset(gen_longform(specs, int(raw["n_per_category"]), seed), buf)
    elif task == "mcqa":
        dump_mcqa_dataset(gen_mcqa(specs, int(raw["n_per_category"]), seed), buf)
    else:
        raise ConfigError(f"task must be 'longform' or 'mcqa', got {task!r}")
    target = out / f"{task}.jsonl"
    _atomic_write(target, buf.getvalue())
    manifest.add(target)
    manifest.write(out)
    print(target)
    return 0


def cmd_calibrate(args) -> int:
    task, cfg, train_cfg = load_run_config(args.config, args)
    manifest = Manifest("calibrate", _config_snapshot(task, cfg, train_cfg), [args.data], cfg.seed)
    records = _load_dataset(args.data, task)
    cal1, cal2, test = split_dataset(records, cfg.split)
    pred = build_predictor(task, cfg, train_cfg).fit(cal1, cal2)
    pred.metadata_ = {
        "split": {"proportions": list(cfg.split.proportions), "seed": cfg.split.seed},
        "n_records": len(records),
    }
    out = Path(args.out)
    predictor_path = out / "predictor.json"
    split_path = out / "split.json"
    _atomic_write(predictor_path, pred.dumps())
    _atomic_write(
        split_path,
        _dumps({"cal1": [r.id for r in cal1], "cal2": [r.id for r in cal2], "test": [r.id for r in test]}),
    )
    manifest.add(predictor_path)
    manifest.add(split_path)
    manifest.write(out)
    print(f"threshold {pred.threshold_!r} from {pred.calibration_size_} calibration records -> {predictor_path}")
    return 0


def _load_predictor(path) -> AdaptiveConformalFactuality:
    try:
        return load_predictor(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"predictor not found: {path}") from None
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: not a predictor file ({exc})") from None


def _select(records, pred, which: str):
    if which == "all":
        return records
    meta = getattr(pred, "metadata_", {}).get("split")
    if meta is None:
        raise ConfigError("predictor has no recorded split; use --split all")
    _, _, test = split_dataset(records, SplitSpec(tuple(meta["proportions"]), meta["seed"]))
    return test


def _load_for_predictor(path, pred):
    try:
        return _load_dataset(path, pred.task)
    except DataError as exc:
        raise DataError(f"{exc} (task mismatch? predictor task is {pred.task})") from None


def cmd_filter(args) -> int:
    pred = _load_predictor(args.predictor)
    records = _select(_load_for_predictor(args.data, pred), pred, args.split)
    taus = pred.tau(records)
    outputs = pred.predict(records)
    lines = []
    for r, tau, kept in zip(records, taus, outputs):
        row = {"id": r.id, "category": r.category, "tau": float(tau)}
        if pred.task == "longform":
            keep_ids = {id(c) for c in kept}
            row["retained"] = [j for j, c in enumerate(r.claims) if id(c) in keep_ids]
            row["removed_fraction"] = removed_fraction(r, kept)
        else:
            row["set"] = sorted(kept)
        lines.append(json.dumps(row, sort_keys=True))
    out = Path(args.out)
    _atomic_write(out, "".join(line + "\n" for line in lines))
    print(out)
    return 0


def evaluate_records(pred, records):
    """Coverage report of ``pred`` on ``records``."""
    if not records:
        raise DataError("empty evaluation split")
    outputs = pred.predict(records)
    results = []
    for r, kept in zip(records, outputs):
        if pred.task == "longform":
            results.append((r.category, all(c.label == 1 for c in kept), removed_fraction(r, kept)))
        else:
            results.append((r.category, r.true_class in kept, len(kept) / r.n_classes))
    return coverage_by_group(results, pred.alpha)


def cmd_evaluate(args) -> int:
    pred = _load_predictor(args.predictor)
    records = _select(_load_for_predictor(args.data, pred), pred, args.split)
    report = evaluate_records(pred, records)
    seed = getattr(pred, "metadata_", {}).get("split", {}).get("seed", 0)
    stem = f"coverage_{pred.task}_{_method_name(pred.transform_mode)}_a{pred.alpha}_s{seed}"
    out = Path(args.out)
    manifest = Manifest("evaluate", {"split": args.split}, [args.data, args.predictor], seed)
    _atomic_write(out / f"{stem}.csv", report.to_csv())
    _atomic_write(out / f"{stem}.txt", report.summary() + "\n")
    manifest.add(out / f"{stem}.csv")
    manifest.add(out / f"{stem}.txt")
    manifest.write(out)
    print(report.summary())
    return 0


def parse_alpha_grid(text: str) -> list[float]:
    """``"0.5:0.8:0.05"`` (inclusive range) or ``"0.1,0.2"``."""
    try:
        if ":" in text:
            lo, hi, step = (float(x) for x in text.split(":"))
            count = int(round((hi - lo) / step)) + 1
            grid = [round(lo + i * step, 10) for i in range(count)]
        else:
            grid = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse alpha grid {text!r}") from None
    if not grid or any(not 0 < a < 1 for a in grid):
        raise ConfigError(f"alpha grid must be non-empty and inside (0, 1): {text!r}")
    return grid


def profile_errors(datasets, task, cfg, train_cfg, alphas, seeds, modes):
    """Calibration error per (dataset:category, seed, alpha) problem and method."""
    problems, rows = [], []
    for path, records in datasets:
        for seed in seeds:
            split = SplitSpec(cfg.split.proportions, seed)
            cal1, cal2, test = split_dataset(records, split)
            for alpha in alphas:
                per_method = []
                for mode in modes:
                    run_cfg = PipelineConfig(alpha, 1.0, mode, cfg.pca_dim, cfg.tau_floor, seed, split)
                    run_train = TrainConfig(**{**asdict(train_cfg), "seed": seed})
                    pred = build_predictor(task, run_cfg, run_train).fit(cal1, cal2)
                    per_method.append(evaluate_records(pred, test))
                for cat in sorted(per_method[0].per_category):
                    problems.append(f"{Path(path).stem}:{cat}|seed={seed}|alpha={alpha}")
                    rows.append(
                        [calibration_error(rep.per_category[cat][0], alpha) for rep in per_method]
                    )
    return problems, np.array(rows)


def cmd_profile(args) -> int:
    task, cfg, train_cfg = load_run_config(args.config, args)
    alphas = parse_alpha_grid(args.alphas)
    seeds = [int(s) for s in args.seeds.split(",")]
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    mode_of = {"original": "none", "adaptive": "multiplicative", "additive": "additive"}
    if not methods or any(m not in mode_of for m in methods):
        raise ConfigError(f"--methods must be a subset of {sorted(mode_of)}")
    manifest = Manifest(
        "profile",
        {**_config_snapshot(task, cfg, train_cfg), "alphas": alphas, "seeds": seeds, "methods": methods},
        args.data,
        seeds,
    )
    datasets = [(p, _load_dataset(p, task)) for p in args.data]
    problems, errors = profile_errors(
        datasets, task, cfg, train_cfg, alphas, seeds, [mode_of[m] for m in methods]
    )
    profile = dolan_more(errors, methods=methods)
    out = Path(args.out)
    files = {
        "profile.csv": profile.to_csv(),
        "ratios.csv": profile.ratios_csv(problems),
        "errors.csv": _errors_csv(problems, methods, errors),
    }
    for name, text in files.items():
        _atomic_write(out / name, text)
        manifest.add(out / name)
    manifest.write(out)
    for m in methods:
        print(f"{m:<10} rho(1) = {profile.rho(m, 1.0):.3f} over {len(problems)} problems")
    return 0


def _errors_csv(problems, methods, errors) -> str:
    lines = [",".join(["problem", *methods])]
    for p, row in zip(problems, errors):
        lines.append(",".join([p, *(repr(float(v)) for v in row)]))
    return "\n".join(lines) + "\n"


def cmd_coverage_trials(args) -> int:
    raw = _read_json(args.config)
    if "categories" not in raw:
        raise ConfigError("coverage-trials config missing field 'categories'")
    try:
        specs = [SyntheticCategorySpec.from_dict(c) for c in raw["categories"]]
    except (TypeError, DataError) as exc:
        raise ConfigError(str(exc)) from None
    alpha = args.alpha if args.alpha is not None else raw.get("alpha", 0.2)
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    task = args.task or raw.get("task", "longform")
    method = args.method or raw.get("method", "original")
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}")
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    settings = {
        "alpha": alpha,
        "seed": seed,
        "task": task,
        "method": method,
        "n_cal2": int(raw.get("n_cal2", 199)),
        "trials": int(raw.get("trials", 20000)),
        "n_cal1": raw.get("n_cal1"),
        "pca_dim": int(raw.get("pca_dim", 32)),
    }
    manifest = Manifest("coverage-trials", {**raw, **settings}, [args.config], seed)
    report = run_coverage_trials(specs, **settings)
    out = Path(args.out)
    stem = f"trials_{task}_{method}_a{alpha}_s{seed}"
    _atomic_write(out / f"{stem}.json", report.to_json())
    _atomic_write(out / f"{stem}.csv", report.to_csv())
    manifest.add(out / f"{stem}.json")
    manifest.add(out / f"{stem}.csv")
    manifest.write(out)
    lo, hi = report.theoretical_band
    print(f"success {report.success_rate:.4f} (band [{lo:.4f}, {hi:.4f})) over {report.trials} trials")
    for name, rate in sorted(report.per_category_rates.items()):
        print(f"  {name:<20} {rate:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaptive-conformal",
        description="Prompt-adaptive conformal factuality: calibrate, filter and evaluate.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, many=False):
        if data:
            p.add_argument("--data", required=True, nargs="+" if many else None, help="JSONL dataset")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--task", choices=["longform", "mcqa"])
        p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, data=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", help="split, fit and calibrate a predictor")
    common(p)
    p.add_argument("--mode", choices=["original", "adaptive"])
    p.set_defaults(func=cmd_calibrate)

    for name, func, helptext in (
        ("filter", cmd_filter, "apply a predictor to records"),
        ("evaluate", cmd_evaluate, "per-category coverage of a predictor"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True)
        p.add_argument("--predictor", required=True)
        p.add_argument("--split", choices=["test", "all"], default="test")
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("profile", help="Dolan-More profiles over (category, seed, alpha)")
    common(p, many=True)
    p.add_argument("--mode", choices=["original", "adaptive"], help=argparse.SUPPRESS)
    p.add_argument("--alphas", default="0.5:0.8:0.05")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--methods", default="original,adaptive")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("coverage-trials", help="Monte Carlo coverage on a synthetic world")
    common(p, data=False)
    p.add_argument("--method", choices=list(METHODS))
    p.set_defaults(func=cmd_coverage_trials)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "config", None) is None and args.command in ("synth", "coverage-trials"):
        parser.error(f"{args.command} requires --config")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CalibrationError, TrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
