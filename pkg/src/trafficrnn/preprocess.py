"""Sensor ingestion, the raw / repaired / aggregated variants, scaling and windowing.

A day covers the 6am-10pm window, 960 one-minute slots. Missing slots are
NaN inside :class:`SensorSeries`; the raw variant marks them with -1.
"""

import csv
import dataclasses
import datetime as dt
import json
import os
import warnings

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from trafficrnn.errors import DataError
from trafficrnn.numeric import DTYPE

SLOTS_PER_DAY = 960
MISSING_MARKER = -1.0
STEP_SIZES = (1, 5, 15, 30, 60)
VARIANTS = ("raw", "repaired", "aggregated")
SPLIT_FRACTIONS = (0.87, 0.03)
MIN_ROWS = 100


@dataclasses.dataclass(frozen=True)
class SensorMeta:
    sensor_id: int
    intersection_id: int
    direction_id: int
    lane: int


@dataclasses.dataclass
class SensorSeries:
    """One sensor's flow in veh/h; ``values`` is ``(days, 960)`` with NaN for missing."""

    meta: SensorMeta
    start_date: dt.date
    values: np.ndarray

    @property
    def sensor_id(self):
        return self.meta.sensor_id

    @property
    def n_days(self):
        return self.values.shape[0]

    @property
    def weekdays(self):
        first = self.start_date.weekday()
        return (first + np.arange(self.n_days)) % 7

    def missing_count(self):
        return int(np.isnan(self.values).sum())


@dataclasses.dataclass
class ScalerState:
    center: np.ndarray
    scale: np.ndarray

    def to_dict(self):
        return {"center": self.center.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["center"], dtype=DTYPE), np.asarray(d["scale"], dtype=DTYPE))


@dataclasses.dataclass
class Dataset:
    variant: str
    values: np.ndarray  # (rows, channels)
    channel_ids: list
    weekday: np.ndarray
    timestamp: np.ndarray
    step_min: int = 1
    split: tuple = None  # ((a, b), (b, c), (c, N))
    scaler: ScalerState = None
    channel_labels: list = None
    # True where the raw variant had no measurement
    missing: np.ndarray = None
    scaled: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.channel_labels is None:
            self.channel_labels = [str(c) for c in self.channel_ids]

    @property
    def n_rows(self):
        return self.values.shape[0]

    @property
    def n_channels(self):
        return self.values.shape[1]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def train_range(self):
        return self._range(0)

    @property
    def val_range(self):
        return self._range(1)

    @property
    def test_range(self):
        return self._range(2)

    def _range(self, i):
        if self.split is None:
            raise DataError("dataset has not been split")
        return tuple(self.split[i])


# --- ingestion ---------------------------------------------------------------

def read_metadata(path):
    """Parse ``sensor_id,intersection_id,direction_id,lane`` into a dict keyed by sensor id."""
    meta = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["sensor_id", "intersection_id", "direction_id", "lane"]:
            raise DataError(f"{path}: line 1: expected header sensor_id,intersection_id,direction_id,lane")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                sid, inter, direction, lane = (int(v) for v in row)
            except ValueError:
                raise DataError(f"{path}: line {lineno}: malformed metadata row {row!r}") from None
            meta[sid] = SensorMeta(sid, inter, direction, lane)
    if not meta:
        raise DataError(f"{path}: no sensors listed")
    return meta


def ingest_csv(measurements_path, metadata_path):
    """Read measurement and metadata CSVs into one :class:`SensorSeries` per sensor.

    Days span the first to the last date seen. Absent (day, minute, sensor)
    triples stay missing; minutes outside [0, 959] are discarded.
    """
    meta = read_metadata(metadata_path)
    days, minutes, sensors, flows = [], [], [], []
    date_cache = {}
    with open(measurements_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["day", "minute", "sensor_id", "flow"]:
            raise DataError(f"{measurements_path}: line 1: expected header day,minute,sensor_id,flow")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{measurements_path}: line {lineno}: expected 4 fields, got {len(row)}")
            day_s, minute_s, sensor_s, flow_s = row
            day = date_cache.get(day_s)
            if day is None:
                try:
                    day = dt.date.fromisoformat(day_s).toordinal()
                except ValueError:
                    raise DataError(f"{measurements_path}: line {lineno}: bad date {day_s!r}") from None
                date_cache[day_s] = day
            try:
                minute = int(minute_s)
                sensor = int(sensor_s)
                flow = float(flow_s)
            except ValueError:
                raise DataError(f"{measurements_path}: line {lineno}: malformed row {row!r}") from None
            if not np.isfinite(flow) or flow < 0:
                raise DataError(f"{measurements_path}: line {lineno}: negative or invalid flow {flow_s!r}")
            if sensor not in meta:
                raise DataError(f"{measurements_path}: line {lineno}: unknown sensor {sensor}")
            if not 0 <= minute < SLOTS_PER_DAY:
                continue
            days.append(day)
            minutes.append(minute)
            sensors.append(sensor)
            flows.append(flow)
    if not days:
        raise DataError(f"{measurements_path}: no measurements inside the 6am-10pm window")
    days = np.asarray(days)
    first, last = int(days.min()), int(days.max())
    n_days = last - first + 1
    sensor_ids = sorted(meta)
    col = {sid: i for i, sid in enumerate(sensor_ids)}
    grid = np.full((len(sensor_ids), n_days, SLOTS_PER_DAY), np.nan, dtype=DTYPE)
    grid[np.fromiter((col[s] for s in sensors), dtype=np.int64, count=len(sensors)),
         days - first, np.asarray(minutes)] = flows
    start = dt.date.fromordinal(first)
    return [SensorSeries(meta[sid], start, grid[col[sid]]) for sid in sensor_ids]


def drop_unusable(series, min_coverage=0.5):
    """Keep sensors whose share of present, non-zero slots is at least ``min_coverage``."""
    if not 0.0 < min_coverage <= 1.0:
        raise ValueError(f"min_coverage must lie in (0, 1], got {min_coverage}")
    kept = []
    for s in series:
        v = s.values
        coverage = np.count_nonzero(~np.isnan(v) & (v != 0)) / v.size
        if coverage >= min_coverage:
            kept.append(s)
    if not kept:
        raise DataError("every sensor was dropped as unusable")
    return kept


# --- variants ----------------------------------------------------------------

def _check_aligned(series):
    if not series:
        raise DataError("no sensor series given")
    start, shape = series[0].start_date, series[0].values.shape
    for s in series:
        if s.start_date != start or s.values.shape != shape:
            raise DataError(f"sensor {s.sensor_id} is not aligned with sensor {series[0].sensor_id}")
    return start, shape[0]


def _calendar(start, n_days):
    weekday = np.repeat((start.weekday() + np.arange(n_days)) % 7, SLOTS_PER_DAY)
    timestamp = np.tile(np.arange(SLOTS_PER_DAY), n_days)
    return weekday, timestamp


def _stack(series):
    return np.stack([s.values.reshape(-1) for s in series], axis=1)


def build_raw(series):
    """Matrix of all sensors with missing slots marked -1."""
    start, n_days = _check_aligned(series)
    values = _stack(series)
    missing = np.isnan(values)
    values = np.where(missing, MISSING_MARKER, values)
    weekday, timestamp = _calendar(start, n_days)
    return Dataset("raw", values, [s.sensor_id for s in series], weekday, timestamp, missing=missing)


def repair_values(values, weekdays):
    """Fill NaNs in one sensor's ``(days, 960)`` grid.

    A missing slot takes the mean of the same sensor's present values on the
    same weekday and minute; what remains is linearly interpolated along the
    flattened time axis, with constant extension at both ends.
    """
    values = np.array(values, dtype=DTYPE)
    out = values.copy()
    for w in range(7):
        rows = weekdays == w
        if not rows.any():
            continue
        block = values[rows]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            donor_mean = np.nanmean(block, axis=0)
        fill = np.isnan(block) & ~np.isnan(donor_mean)
        block = np.where(fill, donor_mean, block)
        out[rows] = block
    flat = out.reshape(-1)
    holes = np.isnan(flat)
    if holes.all():
        raise DataError("sensor has no valid values to repair from")
    if holes.any():
        idx = np.arange(flat.size)
        known = idx[~holes]
        gaps = idx[holes]
        # nearest known neighbour on each side, clamped at the ends
        right = np.clip(np.searchsorted(known, gaps), 0, known.size - 1)
        left = np.clip(right - 1, 0, known.size - 1)
        a, b = known[left], known[right]
        fa, fb = flat[a], flat[b]
        span = np.where(b > a, b - a, 1)
        inner = fa + (fb - fa) * (gaps - a) / span
        flat[gaps] = np.where(gaps < a, fa, np.where(gaps > b, fb, inner))
    return flat.reshape(values.shape)


def build_repaired(series):
    """Matrix of all sensors with missing slots repaired (weekday mean, then interpolation)."""
    start, n_days = _check_aligned(series)
    cols = []
    for s in series:
        try:
            cols.append(repair_values(s.values, s.weekdays).reshape(-1))
        except DataError:
            raise DataError(f"sensor {s.sensor_id} has no valid values; drop it first") from None
    weekday, timestamp = _calendar(start, n_days)
    return Dataset("repaired", np.stack(cols, axis=1), [s.sensor_id for s in series], weekday, timestamp)


def build_aggregated(repaired, metadata, directions=None):
    """Average lanes per (intersection, direction) of a repaired dataset.

    ``directions`` optionally lists the (intersection, direction) pairs that
    must each receive at least one sensor.
    """
    if repaired.variant != "repaired":
        raise DataError(f"aggregation needs the repaired variant, got {repaired.variant!r}")
    groups = {}
    for col, sid in enumerate(repaired.channel_ids):
        if sid not in metadata:
            raise DataError(f"sensor {sid} has no metadata entry")
        m = metadata[sid]
        groups.setdefault((m.intersection_id, m.direction_id), []).append(col)
    keys = sorted(groups) if directions is None else sorted(directions)
    empty = [k for k in keys if k not in groups]
    if empty:
        raise DataError(f"directions without any usable sensor: {empty}")
    values = np.stack([repaired.values[:, groups[k]].mean(axis=1) for k in keys], axis=1)
    return Dataset(
        "aggregated", values, list(range(len(keys))), repaired.weekday, repaired.timestamp,
        step_min=repaired.step_min, channel_labels=[f"i{i}-d{d}" for i, d in keys],
    )


def resample(ds, step_min):
    """Average non-overlapping blocks of ``step_min`` rows.

    In the raw variant -1 markers are left out of each mean and an all-missing
    block stays -1. Calendar rows take the block's first timestamp.
    """
    step_min = int(step_min)
    if step_min < 1 or SLOTS_PER_DAY % step_min:
        raise DataError(f"step size {step_min} does not divide the {SLOTS_PER_DAY}-minute day")
    if ds.step_min != 1:
        raise DataError("resample expects one-minute data")
    if step_min == 1:
        return ds.replace()
    N, C = ds.values.shape
    if N % step_min:
        raise DataError(f"{N} rows do not split into blocks of {step_min}")
    blocks = ds.values.reshape(N // step_min, step_min, C)
    missing = None
    if ds.variant == "raw":
        present = ~ds.missing.reshape(N // step_min, step_min, C)
        counts = present.sum(axis=1)
        sums = np.where(present, blocks, 0.0).sum(axis=1)
        missing = counts == 0
        values = np.where(missing, MISSING_MARKER, sums / np.maximum(counts, 1))
    else:
        values = blocks.mean(axis=1)
    return ds.replace(
        values=values,
        weekday=ds.weekday[::step_min].copy(),
        timestamp=ds.timestamp[::step_min].copy(),
        step_min=step_min,
        missing=missing,
        split=None,
    )


# --- splitting and scaling ----------------------------------------------------

def split_sizes(n):
    train = int(np.floor(SPLIT_FRACTIONS[0] * n))
    val = int(np.floor(SPLIT_FRACTIONS[1] * n))
    return train, val, n - train - val


def split(ds):
    """Chronological 87 / 3 / 10 split by rows."""
    n = ds.n_rows
    if n < MIN_ROWS:
        raise DataError(f"{n} rows are too few to split; need at least {MIN_ROWS}")
    a, b, _ = split_sizes(n)
    return ds.replace(split=((0, a), (a, a + b), (a + b, n)))


def fit_scaler(ds, train_range=None):
    """Per-channel median and IQR on the training rows (linear-interpolated quantiles)."""
    lo, hi = train_range if train_range is not None else ds.train_range
    rows = ds.values[lo:hi]
    if rows.shape[0] == 0:
        raise DataError("empty training range")
    q25, median, q75 = np.percentile(rows, [25, 50, 75], axis=0)
    iqr = q75 - q25
    degenerate = np.flatnonzero(iqr <= 0)
    if degenerate.size:
        labels = [ds.channel_labels[i] for i in degenerate]
        raise DataError(f"degenerate channels with zero interquartile range: {labels}")
    return ScalerState(np.asarray(median, dtype=DTYPE), np.asarray(iqr, dtype=DTYPE))


def transform(ds, scaler):
    return ds.replace(values=(ds.values - scaler.center) / scaler.scale, scaler=scaler, scaled=True)


def inverse_transform(x, scaler):
    return np.asarray(x, dtype=DTYPE) * scaler.scale + scaler.center


def side_features(weekday, timestamp):
    """Weekday scaled to [0, 1] by /6 and timestamp by /959."""
    return np.stack([np.asarray(weekday, dtype=DTYPE) / 6.0,
                     np.asarray(timestamp, dtype=DTYPE) / (SLOTS_PER_DAY - 1)], axis=1)


# --- windows -------------------------------------------------------------------

@dataclasses.dataclass
class WindowBatch:
    inputs: np.ndarray   # (I, C + 2)
    targets: np.ndarray  # (P, C)
    mask: np.ndarray = None


class WindowSet:
    """Stride-1 windows over a contiguous block of rows, materialised lazily.

    ``features`` is ``(L, C + 2)`` and ``targets`` is ``(L, C)``; window ``k``
    reads inputs from rows ``[k, k+I)`` and targets from ``[k+I, k+I+P)``.
    """

    def __init__(self, features, targets, input_len, pred_len, mask=None):
        features = np.asarray(features, dtype=DTYPE)
        targets = np.asarray(targets, dtype=DTYPE)
        L = features.shape[0]
        need = input_len + pred_len
        if L < need:
            raise DataError(f"range of {L} rows is too short; windows need at least {need} rows")
        self.input_len = int(input_len)
        self.pred_len = int(pred_len)
        self.features = features
        self.targets = targets
        self.mask = mask
        self._xw = sliding_window_view(features, input_len, axis=0)
        self._yw = sliding_window_view(targets[input_len:], pred_len, axis=0)
        self._mw = None if mask is None else sliding_window_view(mask[input_len:], pred_len, axis=0)
        self.count = L - need + 1

    def __len__(self):
        return self.count

    def __getitem__(self, k):
        if not -self.count <= k < self.count:
            raise IndexError(k)
        k %= self.count
        return WindowBatch(self._xw[k].T.copy(), self._yw[k].T.copy(),
                           None if self._mw is None else self._mw[k].T.copy())

    def arrays(self, idx=None):
        """Stack windows ``idx`` (default all) into ``(B, I, C+2)`` and ``(B, P, C)``."""
        if idx is None:
            idx = np.arange(self.count)
        x = np.ascontiguousarray(self._xw[idx].transpose(0, 2, 1))
        y = np.ascontiguousarray(self._yw[idx].transpose(0, 2, 1))
        return x, y

    def target_mask(self, idx=None):
        if self._mw is None:
            return None
        if idx is None:
            idx = np.arange(self.count)
        return np.ascontiguousarray(self._mw[idx].transpose(0, 2, 1))


def make_windows(ds, row_range, input_len, pred_len):
    """Windows over ``row_range`` of a dataset; side features become channels C and C+1."""
    lo, hi = row_range
    L = hi - lo
    if L < input_len + pred_len:
        raise DataError(
            f"range of {L} rows is too short; input {input_len} + prediction {pred_len} "
            f"needs at least {input_len + pred_len}"
        )
    values = ds.values[lo:hi]
    features = np.concatenate([values, side_features(ds.weekday[lo:hi], ds.timestamp[lo:hi])], axis=1)
    mask = None if ds.missing is None else ~ds.missing[lo:hi]
    return WindowSet(features, values, input_len, pred_len, mask=mask)


# --- end-to-end preparation and archives ------------------------------------------

def prepare(data_dir, variant, step_min, min_coverage=0.5):
    """Ingest CSVs from ``data_dir`` and return a split, unscaled dataset with a fitted scaler."""
    if variant not in VARIANTS:
        raise DataError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    if int(step_min) < 1 or SLOTS_PER_DAY % int(step_min):
        raise DataError(f"step size {step_min} does not divide the {SLOTS_PER_DAY}-minute day")
    meta_path = os.path.join(data_dir, "metadata.csv")
    series = ingest_csv(os.path.join(data_dir, "measurements.csv"), meta_path)
    series = drop_unusable(series, min_coverage)
    if variant == "raw":
        ds = build_raw(series)
    else:
        ds = build_repaired(series)
        if variant == "aggregated":
            ds = build_aggregated(ds, read_metadata(meta_path))
    ds = split(resample(ds, step_min))
    return ds.replace(scaler=fit_scaler(ds))


def save_dataset(ds, directory):
    """Write values/calendar/channels CSVs plus scaler and split JSON (unscaled values)."""
    if ds.scaled:
        raise DataError("save the unscaled dataset; the scaler is stored alongside")
    os.makedirs(directory, exist_ok=True)
    np.savetxt(os.path.join(directory, "values.csv"), ds.values, fmt="%.17g", delimiter=",")
    with open(os.path.join(directory, "calendar.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["weekday", "timestamp"])
        w.writerows(zip(ds.weekday.tolist(), ds.timestamp.tolist()))
    with open(os.path.join(directory, "channels.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel_id", "label"])
        w.writerows(zip(ds.channel_ids, ds.channel_labels))
    if ds.scaler is not None:
        _write_json(os.path.join(directory, "scaler.json"), ds.scaler.to_dict())
    split_info = {"variant": ds.variant, "step_min": ds.step_min}
    if ds.split is not None:
        split_info.update(zip(("train", "val", "test"), (list(r) for r in ds.split)))
    _write_json(os.path.join(directory, "split.json"), split_info)


def load_dataset(directory):
    for name in ("values.csv", "calendar.csv", "channels.csv", "split.json"):
        if not os.path.exists(os.path.join(directory, name)):
            raise DataError(f"{directory}: missing {name}")
    values = np.loadtxt(os.path.join(directory, "values.csv"), delimiter=",", dtype=DTYPE, ndmin=2)
    cal = np.loadtxt(os.path.join(directory, "calendar.csv"), delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    with open(os.path.join(directory, "channels.csv"), newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    with open(os.path.join(directory, "split.json")) as fh:
        info = json.load(fh)
    scaler = None
    if os.path.exists(os.path.join(directory, "scaler.json")):
        with open(os.path.join(directory, "scaler.json")) as fh:
            scaler = ScalerState.from_dict(json.load(fh))
    split_ranges = None
    if "train" in info:
        split_ranges = tuple(tuple(info[k]) for k in ("train", "val", "test"))
    missing = values == MISSING_MARKER if info["variant"] == "raw" else None
    return Dataset(
        info["variant"], values, [int(r[0]) for r in rows], cal[:, 0], cal[:, 1],
        step_min=int(info["step_min"]), split=split_ranges, scaler=scaler,
        channel_labels=[r[1] for r in rows], missing=missing,
    )


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
