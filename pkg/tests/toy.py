"""Small deterministic datasets shared by several test modules."""

import numpy as np

from trafficrnn.preprocess import Dataset, make_windows

AMPLITUDE = 1.0


def sine_dataset(rows=300, periods=(24.0, 37.0)):
    t = np.arange(rows, dtype=float)
    values = np.stack([AMPLITUDE * np.sin(2 * np.pi * t / p + k) for k, p in enumerate(periods)], axis=1)
    return Dataset("repaired", values, list(range(len(periods))), np.zeros(rows, dtype=int), t.astype(int) % 960)


def sine_windows(rows=300, input_len=20, pred_len=5):
    ds = sine_dataset(rows)
    return make_windows(ds, (0, rows), input_len, pred_len)
