import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from toy import sine_dataset
from trafficrnn.errors import DataError, ShapeError
from trafficrnn.evaluate import (
    EvalReport,
    correlation,
    evaluate,
    plot_correlation,
    plot_per_step,
    r2,
    read_correlation,
    read_report,
    rmse,
    write_correlation,
    write_report,
)
from trafficrnn.models import PersistenceModel
from trafficrnn.preprocess import Dataset, ScalerState, fit_scaler, make_windows, split, transform
from trafficrnn.train import mse_loss

finite = st.floats(-1e3, 1e3, allow_nan=False)


class Cheat:
    """Returns the stored targets batch by batch, optionally corrupted where ``bad`` is set."""

    def __init__(self, targets, bad=None):
        self.targets = targets if bad is None else np.where(bad, 1e6, targets)
        self.pos = 0

    def forward(self, x, training=False):
        if x.ndim == 2:
            return self.targets[0]
        out = self.targets[self.pos:self.pos + len(x)]
        self.pos += len(x)
        return out

    def param_count(self):
        return 7


def test_rmse_examples():
    assert rmse([1, 2, 2], [0, 0, 0]) == pytest.approx(math.sqrt(3), abs=1e-15)
    assert rmse([4.0, 5.0], [4.0, 5.0]) == 0.0


def test_rmse_errors():
    with pytest.raises(ShapeError):
        rmse([1, 2], [1, 2, 3])
    with pytest.raises(DataError):
        rmse([], [])
    with pytest.raises(DataError):
        rmse([1.0], [2.0], mask=np.array([False]))


def test_r2_examples():
    assert r2([1, 2, 2], [1, 2, 3]) == pytest.approx(0.5, abs=1e-15)
    assert r2([1, 2, 3], [1, 2, 3]) == 1.0
    assert r2([2, 2, 2], [1, 2, 3]) == 0.0
    assert r2([3, 2, 1], [1, 2, 3]) < 0


def test_r2_constant_target():
    with pytest.raises(DataError, match="constant"):
        r2([1, 2], [5, 5])


@settings(max_examples=50, deadline=None)
@given(arrays(float, 12, elements=finite), arrays(float, 12, elements=finite), st.floats(-50, 50), st.floats(-3, 3))
def test_metric_properties(pred, target, shift, c):
    pred, target = pred.reshape(4, 3), target.reshape(4, 3)
    e = rmse(pred, target)
    assert e ** 2 == pytest.approx(mse_loss(pred, target)[0], rel=1e-9, abs=1e-9)
    assert rmse(pred + shift, target + shift) == pytest.approx(e, rel=1e-9, abs=1e-9)
    assert rmse(target + c * (pred - target), target) == pytest.approx(abs(c) * e, rel=1e-9, abs=1e-9)
    if np.ptp(target) > 1e-3:
        assert r2(pred + shift, target + shift) == pytest.approx(r2(pred, target), rel=1e-6, abs=1e-6)
        assert r2(pred, target) <= 1.0


def scaled_sine(rows=120, I=10, P=5):
    ds = split(sine_dataset(rows))
    scaler = fit_scaler(ds)
    sc = transform(ds, scaler)
    return make_windows(sc, sc.test_range if rows > 400 else (0, rows), I, P), scaler


@pytest.mark.parametrize("P", [1, 5, 20])
def test_evaluate_perfect_model(P):
    w, scaler = scaled_sine(I=10, P=P)
    _, y = w.arrays()
    rep = evaluate(Cheat(y), w, scaler, timing_repeats=100)
    assert rep.rmse == 0.0 and rep.r2 == 1.0
    assert len(rep.per_step) == P
    assert [s for s, _, _ in rep.per_step] == list(range(1, P + 1))
    assert all(e == 0.0 and r == 1.0 for _, e, r in rep.per_step)
    assert rep.n_weights == 7 and rep.infer_ms >= 0 and rep.n_windows == len(w)
    assert [c for c, _ in rep.per_channel] == ["0", "1"]


def test_evaluate_reports_veh_per_hour():
    # persistence on a ramp: every step-p forecast is off by exactly p * slope
    x = np.arange(60, dtype=float)[:, None] * np.array([[60.0, 120.0]])
    ds = Dataset("repaired", x, [0, 1], np.zeros(60, int), np.arange(60))
    scaler = ScalerState(np.array([100.0, 50.0]), np.array([10.0, 20.0]))
    w = make_windows(transform(ds, scaler), (0, 60), 5, 3)
    rep = evaluate(PersistenceModel(2, 5, 3), w, scaler, timing_repeats=0)
    for step, e, _ in rep.per_step:
        assert e == pytest.approx(step * math.sqrt((60.0 ** 2 + 120.0 ** 2) / 2), rel=1e-12)
    assert rep.per_channel[0][1] == pytest.approx(60.0 * math.sqrt((1 + 4 + 9) / 3), rel=1e-12)


def test_evaluate_masks_missing_raw_targets():
    rng = np.random.default_rng(0)
    v = rng.integers(1, 10, size=(200, 2)) * 60.0
    missing = rng.random(v.shape) < 0.2
    v[missing] = -1.0
    ds = split(Dataset("raw", v, [0, 1], np.zeros(200, int), np.arange(200), missing=missing))
    scaler = fit_scaler(ds)
    w = make_windows(transform(ds, scaler), (0, 200), 10, 4)
    _, y = w.arrays()
    bad = ~w.target_mask()
    assert bad.any()
    rep = evaluate(Cheat(y, bad), w, scaler, timing_repeats=0)
    assert rep.rmse == 0.0 and rep.r2 == 1.0
    assert all(e == 0.0 for _, e in rep.per_channel)


def test_evaluate_rejects_empty():
    _, scaler = scaled_sine()
    with pytest.raises(DataError, match="no test windows"):
        evaluate(Cheat(None), [], scaler)


def test_correlation_examples():
    x = np.linspace(0, 1, 50)
    c = correlation(np.stack([x, -x, 2 * x + 3, np.full(50, 7.0)], axis=1))
    assert c[0, 1] == -1.0 and c[0, 2] == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_array_equal(c[3], [0, 0, 0, 1])
    np.testing.assert_array_equal(np.diag(c), 1.0)


@settings(max_examples=30, deadline=None)
@given(arrays(float, (20, 4), elements=finite))
def test_correlation_properties(values):
    c = correlation(values)
    np.testing.assert_array_equal(c, c.T)
    np.testing.assert_array_equal(np.diag(c), 1.0)
    assert np.all(np.abs(c) <= 1.0)


def test_correlation_needs_two_rows():
    with pytest.raises(DataError):
        correlation(np.ones((1, 3)))


def test_report_files_round_trip(tmp_path):
    rep = EvalReport(12.5, 0.9, [(1, 10.0, 0.95), (2, 15.0, 0.85)], [("a", 11.0), ("b", 14.0)], 321, 3.5, 0.25, 40)
    write_report(rep, tmp_path)
    assert read_report(tmp_path) == rep
    assert (tmp_path / "per_step.csv").read_text().splitlines()[0] == "step,rmse,r2"
    assert (tmp_path / "per_channel.csv").read_text().splitlines()[1] == "a,11.0"


def test_correlation_file_and_plots(tmp_path):
    c = correlation(np.random.default_rng(0).normal(size=(30, 3)))
    write_correlation(c, ["x", "y", "z"], tmp_path / "c.csv")
    back, labels = read_correlation(tmp_path / "c.csv")
    assert labels == ["x", "y", "z"]
    np.testing.assert_allclose(back, c, atol=5e-7)
    plot_correlation(c, tmp_path / "c.svg")
    plot_per_step({"m": [1.0, 2.0, 3.0]}, tmp_path / "p.svg")
    for name in ("c.svg", "p.svg"):
        text = (tmp_path / name).read_text()
        assert text.lstrip().startswith("<?xml") and "<svg" in text
    first = (tmp_path / "p.svg").read_bytes()
    plot_per_step({"m": [1.0, 2.0, 3.0]}, tmp_path / "p.svg")
    assert (tmp_path / "p.svg").read_bytes() == first
