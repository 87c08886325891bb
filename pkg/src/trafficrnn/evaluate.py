"""RMSE / R², per-step and per-channel breakdowns, correlation matrices and plots."""

import csv
import dataclasses
import json
import os
import time

import numpy as np

from trafficrnn.errors import DataError, ShapeError
from trafficrnn.numeric import DTYPE
from trafficrnn.preprocess import inverse_transform


def rmse(pred, target, mask=None):
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ShapeError(f"rmse: prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    if mask is not None:
        diff = diff[mask]
    if diff.size == 0:
        raise DataError("rmse of an empty selection")
    return float(np.sqrt(np.mean(diff * diff)))


def r2(pred, target, mask=None):
    """Pooled coefficient of determination; negative when worse than the mean."""
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ShapeError(f"r2: prediction {pred.shape} and target {target.shape} differ")
    if mask is not None:
        pred, target = pred[mask], target[mask]
    if target.size == 0:
        raise DataError("r2 of an empty selection")
    ss_tot = float(np.sum((target - target.mean()) ** 2))
    if ss_tot == 0.0:
        raise DataError("r2 is undefined for a constant target")
    ss_res = float(np.sum((target - pred) ** 2))
    return 1.0 - ss_res / ss_tot


@dataclasses.dataclass
class EvalReport:
    rmse: float
    r2: float
    per_step: list      # [(step, rmse, r2)], steps numbered from 1
    per_channel: list   # [(channel label, rmse)]
    n_weights: int
    train_seconds: float = 0.0
    infer_ms: float = 0.0
    n_windows: int = 0

    def to_dict(self):
        return {
            "rmse": self.rmse,
            "r2": self.r2,
            "per_step": [{"step": s, "rmse": e, "r2": r} for s, e, r in self.per_step],
            "per_channel": [{"channel": c, "rmse": e} for c, e in self.per_channel],
            "n_weights": self.n_weights,
            "train_seconds": self.train_seconds,
            "infer_ms": self.infer_ms,
            "n_windows": self.n_windows,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["rmse"], d["r2"],
            [(p["step"], p["rmse"], p["r2"]) for p in d["per_step"]],
            [(p["channel"], p["rmse"]) for p in d["per_channel"]],
            d["n_weights"], d.get("train_seconds", 0.0), d.get("infer_ms", 0.0), d.get("n_windows", 0),
        )


def predict(model, windows, batch_size=256):
    preds = []
    for start in range(0, len(windows), batch_size):
        idx = np.arange(start, min(start + batch_size, len(windows)))
        x, _ = windows.arrays(idx)
        preds.append(model.forward(x, training=False))
    return np.concatenate(preds, axis=0)


def time_inference(model, windows, repeats=100):
    """Mean wall time in ms of a single-window eval-mode forward pass."""
    x = windows[0].inputs
    model.forward(x)
    start = time.perf_counter()
    for _ in range(repeats):
        model.forward(x)
    return (time.perf_counter() - start) * 1000.0 / repeats


def evaluate(model, windows, scaler, channel_labels=None, train_seconds=0.0, timing_repeats=100):
    """Score ``model`` on ``windows`` in veh/h.

    Predictions and targets are inverse-transformed with ``scaler`` first.
    Where the windows carry a target mask (raw variant), missing targets
    are left out of every error sum.
    """
    if len(windows) == 0:
        raise DataError("no test windows")
    pred_scaled = predict(model, windows)
    _, y_scaled = windows.arrays()
    pred = inverse_transform(pred_scaled, scaler)
    target = inverse_transform(y_scaled, scaler)
    mask = windows.target_mask()
    P, C = pred.shape[1:]
    per_step = []
    for p in range(P):
        m = None if mask is None else mask[:, p]
        per_step.append((p + 1, rmse(pred[:, p], target[:, p], m), r2(pred[:, p], target[:, p], m)))
    labels = channel_labels if channel_labels is not None else [str(c) for c in range(C)]
    per_channel = []
    for c in range(C):
        m = None if mask is None else mask[:, :, c]
        if m is not None and not m.any():
            per_channel.append((labels[c], float("nan")))
            continue
        per_channel.append((labels[c], rmse(pred[:, :, c], target[:, :, c], m)))
    return EvalReport(
        rmse=rmse(pred, target, mask),
        r2=r2(pred, target, mask),
        per_step=per_step,
        per_channel=per_channel,
        n_weights=model.param_count(),
        train_seconds=float(train_seconds),
        infer_ms=time_inference(model, windows, timing_repeats) if timing_repeats else 0.0,
        n_windows=len(windows),
    )


def correlation(values):
    """Pearson correlation between the columns of ``values`` (rows = time).

    Constant columns correlate 0 with everything else and 1 with themselves.
    """
    values = np.asarray(getattr(values, "values", values), dtype=DTYPE)
    if values.ndim != 2 or values.shape[0] < 2:
        raise DataError("correlation needs a 2-D matrix with at least two rows")
    centred = values - values.mean(axis=0)
    norms = np.sqrt(np.sum(centred * centred, axis=0))
    constant = norms == 0
    safe = np.where(constant, 1.0, norms)
    z = centred / safe
    corr = z.T @ z
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    np.clip(corr, -1.0, 1.0, out=corr)
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    return corr


# --- writers ---------------------------------------------------------------------

def write_report(report, directory):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "report.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(directory, "per_step.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "rmse", "r2"])
        w.writerows(report.per_step)
    with open(os.path.join(directory, "per_channel.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel", "rmse"])
        w.writerows(report.per_channel)


def read_report(directory):
    with open(os.path.join(directory, "report.json")) as fh:
        return EvalReport.from_dict(json.load(fh))


def write_correlation(corr, labels, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel"] + list(labels))
        for label, row in zip(labels, corr):
            w.writerow([label] + [f"{v:.6f}" for v in row])


def read_correlation(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    labels = rows[0][1:]
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]]), labels


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "trafficrnn"
    return plt


def plot_per_step(curves, path, title=None):
    """Per-step RMSE curves; ``curves`` maps a label to a list of RMSE values."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, values in curves.items():
        ax.plot(np.arange(1, len(values) + 1), values, marker="o", label=label)
    ax.set_xlabel("prediction step")
    ax.set_ylabel("RMSE [veh/h]")
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_correlation(corr, path, title=None):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5.5, 5))
    im = ax.imshow(corr, vmin=-1.0, vmax=1.0, cmap="RdBu_r", interpolation="nearest")
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_xlabel("channel")
    ax.set_ylabel("channel")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
