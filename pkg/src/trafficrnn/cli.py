"""Command-line entry point: generate, preprocess, train, evaluate, grid, stability, correlate, report.

Exit codes: 0 success, 2 usage or input error, 3 numeric divergence.
"""

import argparse
import csv
import dataclasses
import datetime as dt
import json
import logging
import os
import sys

from trafficrnn import __version__
from trafficrnn.errors import DataError, DivergenceError, ShapeError

log = logging.getLogger("trafficrnn")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 2, 3


class InputError(Exception):
    pass


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir, args, started, inputs=(), outputs=(), config=None):
    """Record what produced ``out_dir`` in ``manifest_<command>.json``.

    One file per command, so train, evaluate and report can share a run
    directory without overwriting each other's record.
    """
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": args.command,
        "arguments": {k: v for k, v in vars(args).items() if k not in ("func", "command")},
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": list(inputs),
        "outputs": sorted(outputs),
        "version": __version__,
        "started": started,
        "finished": _now(),
    }
    with open(os.path.join(out_dir, f"manifest_{args.command}.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require_dir(path, what):
    if not os.path.isdir(path):
        raise InputError(f"{what} directory not found: {path}")


def _load_json(path, what):
    if not os.path.exists(path):
        raise InputError(f"{what} not found: {path}")
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{what} {path} is not valid JSON: {exc}") from None


# --- commands --------------------------------------------------------------------

def cmd_generate(args):
    from trafficrnn.datagen import CityConfig, write_city

    started = _now()
    data = _load_json(args.config, "city config") if args.config else {}
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        cfg = CityConfig(**data)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid city config: {exc}") from None
    paths = write_city(cfg, args.out)
    write_manifest(args.out, args, started, [args.config] if args.config else [],
                   [os.path.basename(p) for p in paths], dataclasses.asdict(cfg))
    print(f"wrote {cfg.intersections} intersections over {cfg.days} days to {args.out}")


def cmd_preprocess(args):
    from trafficrnn.preprocess import prepare, save_dataset

    started = _now()
    _require_dir(args.data, "data")
    ds = prepare(args.data, args.variant, args.step, args.min_coverage)
    save_dataset(ds, args.out)
    write_manifest(args.out, args, started, [args.data],
                   ["values.csv", "calendar.csv", "channels.csv", "scaler.json", "split.json"])
    print(f"{args.variant} dataset: {ds.n_rows} rows x {ds.n_channels} channels at {ds.step_min} min -> {args.out}")


def _model_and_train_cfg(args, channels):
    from trafficrnn.models import ModelConfig
    from trafficrnn.train import TrainConfig

    model_over = _load_json(args.model_cfg, "model config") if args.model_cfg else {}
    train_over = _load_json(args.train_cfg, "training config") if args.train_cfg else {}
    seed = args.seed if args.seed is not None else train_over.get("seed", 0)
    try:
        model_cfg = ModelConfig(args.arch, args.cell, channels, args.input, args.pred, **{**model_over, "seed": seed})
        train_cfg = TrainConfig(**{**train_over, "seed": seed})
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid configuration: {exc}") from None
    return model_cfg, train_cfg


def cmd_train(args):
    from trafficrnn.models import build
    from trafficrnn.preprocess import load_dataset, make_windows, transform
    from trafficrnn.train import train

    started = _now()
    _require_dir(args.dataset, "dataset")
    ds = load_dataset(args.dataset)
    model_cfg, train_cfg = _model_and_train_cfg(args, ds.n_channels)
    scaled = transform(ds, ds.scaler)
    windows = make_windows(scaled, scaled.train_range, model_cfg.input_len, model_cfg.pred_len)
    model = build(model_cfg)
    result = train(model, windows, train_cfg,
                   callback=lambda e, loss: log.info("epoch %d/%d loss %.5f", e + 1, train_cfg.epochs, loss))
    model.save(args.out)
    with open(os.path.join(args.out, "loss.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        w.writerows(enumerate(result.history))
    with open(os.path.join(args.out, "train.json"), "w") as fh:
        json.dump({"config": dataclasses.asdict(train_cfg), "train_seconds": result.seconds,
                   "steps": result.steps}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(args.out, args, started, [args.dataset],
                   ["model.json", "params.bin", "loss.csv", "train.json"],
                   {"model": model_cfg.to_dict(), "train": dataclasses.asdict(train_cfg)})
    print(f"trained {model_cfg.label} ({model.param_count()} weights), final loss {result.history[-1]:.5f}")


def cmd_evaluate(args):
    from trafficrnn.evaluate import evaluate, write_report
    from trafficrnn.experiments import write_results
    from trafficrnn.models import load
    from trafficrnn.preprocess import load_dataset, make_windows, transform

    started = _now()
    _require_dir(args.model, "model")
    _require_dir(args.dataset, "dataset")
    out = args.out or args.model
    model = load(args.model)
    ds = load_dataset(args.dataset)
    if ds.n_channels != model.cfg.channels:
        raise InputError(f"model expects {model.cfg.channels} channels, dataset has {ds.n_channels}")
    train_seconds = 0.0
    train_info = os.path.join(args.model, "train.json")
    if os.path.exists(train_info):
        with open(train_info) as fh:
            train_seconds = json.load(fh)["train_seconds"]
    scaled = transform(ds, ds.scaler)
    windows = make_windows(scaled, scaled.test_range, model.cfg.input_len, model.cfg.pred_len)
    report = evaluate(model, windows, ds.scaler, ds.channel_labels, train_seconds)
    write_report(report, out)
    row = {"variant": ds.variant, "step_min": ds.step_min, "pred_len": model.cfg.pred_len,
           "architecture": model.cfg.architecture.value, "cell": model.cfg.cell.value,
           "input_len": model.cfg.input_len, "rmse": report.rmse, "r2": report.r2,
           "train_seconds": report.train_seconds, "infer_ms": report.infer_ms, "n_weights": report.n_weights}
    write_results([row], os.path.join(out, "results.csv"))
    write_manifest(out, args, started, [args.model, args.dataset],
                   ["report.json", "per_step.csv", "per_channel.csv", "results.csv"])
    print(f"{model.cfg.label}: RMSE {report.rmse:.2f} veh/h, R2 {report.r2:.3f} over {report.n_windows} windows")


def cmd_grid(args):
    from trafficrnn.experiments import GridSpec, enumerate_runs, run_grid

    started = _now()
    data = _load_json(args.spec, "grid spec")
    data_dir = args.data or data.pop("data_dir", None)
    data.pop("data_dir", None)
    try:
        spec = GridSpec(**data)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid grid spec: {exc}") from None
    runs = enumerate_runs(spec)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "runs.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "variant", "step_min", "pred_len", "architecture", "cell", "input_len"])
        w.writerows([r.name] + list(dataclasses.astuple(r)) for r in runs)
    if args.dry_run:
        write_manifest(args.out, args, started, [args.spec], ["runs.csv"], dataclasses.asdict(spec))
        print(f"{len(runs)} runs")
        return
    if data_dir is None:
        raise InputError("grid needs --data or a data_dir entry in the spec")
    _require_dir(data_dir, "data")
    rows = run_grid(spec, data_dir, args.out, args.workers)
    write_manifest(args.out, args, started, [args.spec, data_dir],
                   ["runs.csv", "results.csv", "failures.csv"], dataclasses.asdict(spec))
    print(f"{len(rows)} of {len(runs)} runs completed")


def cmd_stability(args):
    from trafficrnn.experiments import stability
    from trafficrnn.preprocess import load_dataset

    started = _now()
    _require_dir(args.dataset, "dataset")
    ds = load_dataset(args.dataset)
    model_cfg, train_cfg = _model_and_train_cfg(args, ds.n_channels)
    base_seed = args.seed if args.seed is not None else 0
    result = stability(ds, model_cfg, train_cfg, args.runs, base_seed, args.same_seed)
    result.write(args.out)
    write_manifest(args.out, args, started, [args.dataset],
                   ["stability_runs.csv", "stability_summary.csv"],
                   {"model": model_cfg.to_dict(), "train": dataclasses.asdict(train_cfg)})
    print(f"{args.runs} runs, {len(result.diverged)} diverged; median RMSE rises "
          f"{result.median_increase:.2f} veh/h from step 1 to {model_cfg.pred_len}")


def cmd_correlate(args):
    from trafficrnn.evaluate import correlation, write_correlation
    from trafficrnn.preprocess import load_dataset

    started = _now()
    _require_dir(args.dataset, "dataset")
    ds = load_dataset(args.dataset)
    out = args.out
    os.makedirs(out, exist_ok=True)
    write_correlation(correlation(ds.values), ds.channel_labels, os.path.join(out, "correlation.csv"))
    write_manifest(out, args, started, [args.dataset], ["correlation.csv"])
    print(f"correlation of {ds.n_channels} channels -> {os.path.join(out, 'correlation.csv')}")


def cmd_report(args):
    from trafficrnn.evaluate import (
        correlation,
        plot_correlation,
        plot_per_step,
        read_correlation,
        read_report,
        write_correlation,
    )
    from trafficrnn.preprocess import load_dataset

    started = _now()
    _require_dir(args.run, "run")
    if not os.path.exists(os.path.join(args.run, "report.json")):
        raise InputError(f"{args.run} has no report.json; run evaluate first")
    report = read_report(args.run)
    outputs = []
    corr_path = os.path.join(args.run, "correlation.csv")
    if args.dataset:
        _require_dir(args.dataset, "dataset")
        ds = load_dataset(args.dataset)
        write_correlation(correlation(ds.values), ds.channel_labels, corr_path)
        outputs.append("correlation.csv")
    print(f"RMSE {report.rmse:.2f} veh/h  R2 {report.r2:.3f}  weights {report.n_weights}  "
          f"train {report.train_seconds:.1f}s  forecast {report.infer_ms:.2f}ms")
    for step, e, r in report.per_step:
        print(f"  step {step:3d}: RMSE {e:8.2f}  R2 {r:6.3f}")
    if args.svg:
        plot_per_step({"model": [e for _, e, _ in report.per_step]},
                      os.path.join(args.run, "per_step_rmse.svg"), "RMSE per prediction step")
        outputs.append("per_step_rmse.svg")
        if os.path.exists(corr_path):
            corr, _ = read_correlation(corr_path)
            plot_correlation(corr, os.path.join(args.run, "correlation.svg"), "channel correlation")
            outputs.append("correlation.svg")
    write_manifest(args.run, args, started, [args.run], outputs + ["report.json"])


# --- parser ----------------------------------------------------------------------

def _add_model_args(p):
    p.add_argument("--dataset", required=True)
    p.add_argument("--arch", required=True, choices=["crnn", "encdec", "vecout"])
    p.add_argument("--cell", required=True, choices=["lstm", "gru"])
    p.add_argument("--pred", type=int, required=True, help="prediction length P")
    p.add_argument("--input", type=int, default=200, help="input length I")
    p.add_argument("--train-cfg", help="JSON file with training options")
    p.add_argument("--model-cfg", help="JSON file with model size options")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)


def build_parser():
    parser = argparse.ArgumentParser(prog="trafficrnn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic city as CSVs")
    p.add_argument("--config", help="CityConfig JSON (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", help="build a dataset archive")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", required=True, choices=["raw", "repaired", "aggregated"])
    p.add_argument("--step", type=int, default=1)
    p.add_argument("--min-coverage", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one model")
    _add_model_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a trained model on the test range")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid", help="train and evaluate a grid of combinations")
    p.add_argument("--spec", required=True)
    p.add_argument("--data", help="directory holding <variant>_<step> dataset archives")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--dry-run", action="store_true", help="only enumerate the runs")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("stability", help="repeat one training run with different seeds")
    _add_model_args(p)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--same-seed", action="store_true", help="use the base seed for every run")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("correlate", help="channel correlation matrix of a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("report", help="summarise an evaluated run")
    p.add_argument("--run", required=True)
    p.add_argument("--dataset", help="also compute the dataset's correlation matrix")
    p.add_argument("--svg", action="store_true", help="emit SVG plots")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InputError, DataError, ShapeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
