"""Synthetic induction-loop data for a small city.

Each driving direction follows a two-peak commuter profile; its lanes share
the direction's signal and noise and add a little lane noise of their own.
Flows are quantised to multiples of 60 veh/h, individual rows go missing at
random and whole sensors can be dead (silent or stuck at zero).
"""

import dataclasses
import datetime as dt
import io
import json
import os

import numpy as np

from trafficrnn.preprocess import SLOTS_PER_DAY, SensorMeta


@dataclasses.dataclass
class CityConfig:
    intersections: int = 12
    directions_min: int = 3
    directions_max: int = 4
    lanes_min: int = 1
    lanes_max: int = 3
    days: int = 28
    start_date: str = "2018-01-01"
    base: float = 240.0
    peak1_amp: float = 720.0
    peak1_time: float = 120.0
    peak1_width: float = 60.0
    peak2_amp: float = 600.0
    peak2_time: float = 660.0
    peak2_width: float = 90.0
    weekend_factor: float = 0.6
    # per-direction multiplier drawn from [1 - spread, 1 + spread]
    direction_spread: float = 0.4
    # per-day multiplicative level, N(1, day_sigma)
    day_sigma: float = 0.05
    noise_sigma: float = 60.0
    lane_noise_sigma: float = 20.0
    quantize: bool = True
    missing_prob: float = 0.05
    dead_prob: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("missing_prob", "dead_prob", "weekend_factor"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("base", "peak1_amp", "peak2_amp", "noise_sigma", "lane_noise_sigma",
                     "day_sigma", "peak1_width", "peak2_width"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.direction_spread < 1.0:
            raise ValueError("direction_spread must lie in [0, 1)")
        if self.intersections < 1 or self.days < 1:
            raise ValueError("need at least one intersection and one day")
        if not 1 <= self.directions_min <= self.directions_max:
            raise ValueError("invalid direction count range")
        if not 1 <= self.lanes_min <= self.lanes_max:
            raise ValueError("invalid lane count range")
        dt.date.fromisoformat(self.start_date)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            data = json.load(fh)
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown city options: {sorted(unknown)}")
        return cls(**data)


def _peak(t, amp, centre, width):
    if width == 0:
        return amp * (t == centre)
    return amp * np.exp(-((t - centre) ** 2) / (2.0 * width ** 2))


def profile(t, weekday, cfg, rng=None):
    """Expected flow at minute ``t`` (0 = 6am) on ``weekday``; noisy if ``rng`` is given."""
    t = np.asarray(t, dtype=float)
    v = (cfg.base + _peak(t, cfg.peak1_amp, cfg.peak1_time, cfg.peak1_width)
         + _peak(t, cfg.peak2_amp, cfg.peak2_time, cfg.peak2_width))
    v = v * np.where(np.asarray(weekday) >= 5, cfg.weekend_factor, 1.0)
    if rng is not None and cfg.noise_sigma > 0:
        v = v + rng.normal(0.0, cfg.noise_sigma, size=np.shape(v))
    return v


def quantize60(v):
    """Nearest non-negative multiple of 60; exact halves round up."""
    v = np.maximum(np.asarray(v, dtype=float), 0.0)
    q = (np.floor(v / 60.0 + 0.5) * 60).astype(np.int64)
    return q if q.ndim else int(q)


@dataclasses.dataclass
class City:
    sensors: list            # SensorMeta per sensor
    flows: np.ndarray        # (S, days, 960), NaN where no row is emitted
    direction_profiles: dict  # (intersection, direction) -> (days, 960) noise-free expectation
    start_date: dt.date


def simulate(cfg):
    start = dt.date.fromisoformat(cfg.start_date)
    weekdays = (start.weekday() + np.arange(cfg.days)) % 7
    t = np.arange(SLOTS_PER_DAY, dtype=float)
    shape = profile(t[None, :], weekdays[:, None], cfg)  # (days, 960)
    top = np.random.default_rng([cfg.seed, 0])
    sensors, flows, profiles = [], [], {}
    sid = 0
    for i in range(cfg.intersections):
        n_dir = int(top.integers(cfg.directions_min, cfg.directions_max + 1))
        for d in range(n_dir):
            rng = np.random.default_rng([cfg.seed, 1, i, d])
            mult = rng.uniform(1.0 - cfg.direction_spread, 1.0 + cfg.direction_spread)
            level = 1.0 + cfg.day_sigma * rng.standard_normal(cfg.days)
            expected = shape * mult * level[:, None]
            profiles[(i, d)] = expected
            shared = expected + cfg.noise_sigma * rng.standard_normal(expected.shape)
            n_lanes = int(rng.integers(cfg.lanes_min, cfg.lanes_max + 1))
            for lane in range(n_lanes):
                v = shared + cfg.lane_noise_sigma * rng.standard_normal(expected.shape)
                v = quantize60(v).astype(float) if cfg.quantize else np.maximum(v, 0.0)
                if rng.random() < cfg.dead_prob:
                    # dead sensors either never report or report only zeros
                    v = np.zeros_like(v) if rng.random() < 0.5 else np.full_like(v, np.nan)
                drop = rng.random(v.shape) < cfg.missing_prob
                v[drop] = np.nan
                sensors.append(SensorMeta(sid, i, d, lane))
                flows.append(v)
                sid += 1
    return City(sensors, np.stack(flows), profiles, start)


def generate(cfg):
    """Return ``(measurements_csv, metadata_csv)`` as strings."""
    city = simulate(cfg)
    meas = io.StringIO()
    meas.write("day,minute,sensor_id,flow\n")
    ids = [s.sensor_id for s in city.sensors]
    fmt = "{:g}" if not cfg.quantize else "{:d}"
    for day in range(cfg.days):
        date = (city.start_date + dt.timedelta(days=day)).isoformat()
        block = city.flows[:, day, :]  # (S, 960)
        lines = []
        for minute in range(SLOTS_PER_DAY):
            col = block[:, minute]
            for sid, v in zip(ids, col.tolist()):
                if v == v:  # not NaN
                    lines.append(f"{date},{minute},{sid},{fmt.format(int(v) if cfg.quantize else v)}\n")
        meas.write("".join(lines))
    meta = io.StringIO()
    meta.write("sensor_id,intersection_id,direction_id,lane\n")
    for s in city.sensors:
        meta.write(f"{s.sensor_id},{s.intersection_id},{s.direction_id},{s.lane}\n")
    return meas.getvalue(), meta.getvalue()


def write_city(cfg, out_dir):
    """Write ``measurements.csv`` and ``metadata.csv`` into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    measurements, metadata = generate(cfg)
    paths = (os.path.join(out_dir, "measurements.csv"), os.path.join(out_dir, "metadata.csv"))
    for path, text in zip(paths, (measurements, metadata)):
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return paths
