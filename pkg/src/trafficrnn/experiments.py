"""Train-and-evaluate runs, the architecture x data grid, and repeat-run stability."""

import csv
import dataclasses
import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from trafficrnn.errors import DataError, DivergenceError
from trafficrnn.evaluate import evaluate, write_report
from trafficrnn.layers import CellKind
from trafficrnn.models import Architecture, ModelConfig, build
from trafficrnn.preprocess import STEP_SIZES, VARIANTS, load_dataset, make_windows, transform
from trafficrnn.train import TrainConfig, train

log = logging.getLogger(__name__)

PRED_LENS = (1, 5, 20)
ALL_MODELS = tuple((a.value, c.value) for a in Architecture for c in CellKind)
RESULT_COLUMNS = ["variant", "step_min", "pred_len", "architecture", "cell", "input_len",
                  "rmse", "r2", "train_seconds", "infer_ms", "n_weights"]


def input_length_for(variant, step_min, pred_len, fine_tune=False, default=200):
    """Input length rule: 200 steps, 100 for hourly 20-step forecasts, 50 for the tuned combination."""
    if fine_tune and variant == "repaired" and step_min == 5 and pred_len == 5:
        return 50
    if step_min == 60 and pred_len == 20:
        return default // 2
    return default


@dataclasses.dataclass
class GridSpec:
    variants: list = dataclasses.field(default_factory=lambda: list(VARIANTS))
    step_sizes: list = dataclasses.field(default_factory=lambda: list(STEP_SIZES))
    pred_lens: list = dataclasses.field(default_factory=lambda: list(PRED_LENS))
    models: list = dataclasses.field(default_factory=lambda: [list(m) for m in ALL_MODELS])
    input_len: int = 200
    fine_tune: bool = False
    model: dict = dataclasses.field(default_factory=dict)
    train: dict = dataclasses.field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        bad = [v for v in self.variants if v not in VARIANTS]
        bad += [s for s in self.step_sizes if s not in STEP_SIZES]
        bad += [p for p in self.pred_lens if p not in PRED_LENS]
        for arch, cell in self.models:
            Architecture(arch)
            CellKind(cell)
        if bad:
            raise ValueError(f"grid spec contains unsupported values: {bad}")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            data = json.load(fh)
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown grid options: {sorted(unknown)}")
        return cls(**data)


@dataclasses.dataclass(frozen=True)
class RunSpec:
    variant: str
    step_min: int
    pred_len: int
    architecture: str
    cell: str
    input_len: int

    @property
    def name(self):
        return f"{self.variant}_s{self.step_min}_p{self.pred_len}_{self.architecture}_{self.cell}"


def enumerate_runs(spec):
    runs = []
    for variant, step, pred, (arch, cell) in itertools.product(
            spec.variants, spec.step_sizes, spec.pred_lens, spec.models):
        runs.append(RunSpec(variant, step, pred, arch, cell,
                            input_length_for(variant, step, pred, spec.fine_tune, spec.input_len)))
    return runs


def dataset_dir(data_dir, variant, step_min):
    return os.path.join(data_dir, f"{variant}_{step_min}")


def train_and_evaluate(ds, model_cfg, train_cfg, out_dir=None, timing_repeats=100):
    """Train on the training range of ``ds`` and score on its test range.

    ``ds`` is an unscaled, split dataset carrying a fitted scaler.
    """
    scaled = transform(ds, ds.scaler)
    train_w = make_windows(scaled, scaled.train_range, model_cfg.input_len, model_cfg.pred_len)
    test_w = make_windows(scaled, scaled.test_range, model_cfg.input_len, model_cfg.pred_len)
    model = build(model_cfg)
    result = train(model, train_w, train_cfg)
    report = evaluate(model, test_w, ds.scaler, ds.channel_labels, result.seconds, timing_repeats)
    if out_dir is not None:
        model.save(out_dir)
        write_report(report, out_dir)
        with open(os.path.join(out_dir, "loss.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss"])
            w.writerows(enumerate(result.history))
    return model, result, report


def _run_one(args):
    run, data_dir, out_dir, model_over, train_over, seed = args
    row = dataclasses.asdict(run)
    try:
        ds = load_dataset(dataset_dir(data_dir, run.variant, run.step_min))
        model_cfg = ModelConfig(run.architecture, run.cell, ds.n_channels, run.input_len, run.pred_len,
                                **{**model_over, "seed": seed})
        train_cfg = TrainConfig(**{**train_over, "seed": seed})
        _, _, report = train_and_evaluate(ds, model_cfg, train_cfg, os.path.join(out_dir, run.name))
    except (DataError, DivergenceError, ValueError, OSError) as exc:
        log.warning("run %s failed: %s", run.name, exc)
        return row, f"{type(exc).__name__}: {exc}"
    row.update(rmse=report.rmse, r2=report.r2, train_seconds=report.train_seconds,
               infer_ms=report.infer_ms, n_weights=report.n_weights)
    return row, None


def run_grid(spec, data_dir, out_dir, workers=1):
    """Train and evaluate every grid combination.

    Datasets are read from ``data_dir/<variant>_<step>``. A failing run is
    recorded in ``failures.csv`` and the grid carries on. Returns the list
    of successful result rows, also written to ``results.csv``.
    """
    runs = enumerate_runs(spec)
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(r, data_dir, out_dir, spec.model, spec.train, spec.seed) for r in runs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_one, jobs))
    else:
        outcomes = [_run_one(j) for j in jobs]
    rows = [row for row, err in outcomes if err is None]
    failures = [(row, err) for row, err in outcomes if err is not None]
    write_results(rows, os.path.join(out_dir, "results.csv"))
    with open(os.path.join(out_dir, "failures.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "error"])
        w.writerows((RunSpec(**row).name, err) for row, err in failures)
    return rows


def write_results(rows, path):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    os.replace(tmp, path)


@dataclasses.dataclass
class StabilityResult:
    seeds: list
    table: np.ndarray      # (runs, P) per-step RMSE, NaN for diverged runs
    diverged: list         # seeds whose run diverged
    median: np.ndarray     # (P,)
    iqr: np.ndarray        # (P,)

    @property
    def median_increase(self):
        return float(self.median[-1] - self.median[0])

    def write(self, directory):
        os.makedirs(directory, exist_ok=True)
        P = self.table.shape[1]
        with open(os.path.join(directory, "stability_runs.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run", "seed"] + [f"step_{p + 1}" for p in range(P)] + ["diverged"])
            for i, (seed, row) in enumerate(zip(self.seeds, self.table)):
                w.writerow([i, seed] + row.tolist() + [seed in self.diverged])
        with open(os.path.join(directory, "stability_summary.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "median_rmse", "iqr"])
            w.writerows((p + 1, m, q) for p, (m, q) in enumerate(zip(self.median, self.iqr)))


def stability(ds, model_cfg, train_cfg, n_runs, base_seed=0, same_seed=False, timing_repeats=0):
    """Train the same configuration ``n_runs`` times with seeds base..base+n-1.

    ``same_seed`` forces every run onto ``base_seed``. Diverged runs are
    flagged and excluded from the medians.
    """
    if n_runs < 2:
        raise ValueError("a stability study needs at least two runs")
    seeds = [base_seed if same_seed else base_seed + i for i in range(n_runs)]
    table = np.full((n_runs, model_cfg.pred_len), np.nan)
    diverged = []
    for i, seed in enumerate(seeds):
        mc = dataclasses.replace(model_cfg, seed=seed)
        tc = dataclasses.replace(train_cfg, seed=seed)
        try:
            _, _, report = train_and_evaluate(ds, mc, tc, timing_repeats=timing_repeats)
        except DivergenceError as exc:
            log.warning("stability run %d (seed %d) diverged: %s", i, seed, exc)
            diverged.append(seed)
            continue
        table[i] = [e for _, e, _ in report.per_step]
    ok = table[~np.isnan(table).any(axis=1)]
    if ok.shape[0] == 0:
        raise DivergenceError("every stability run diverged")
    q25, median, q75 = np.percentile(ok, [25, 50, 75], axis=0)
    return StabilityResult(seeds, table, diverged, median, q75 - q25)
