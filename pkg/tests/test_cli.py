import csv
import json

import numpy as np
import pytest

from trafficrnn.cli import main
from trafficrnn.errors import DivergenceError
from trafficrnn.preprocess import load_dataset

CITY = {"intersections": 2, "days": 7, "seed": 11}
MODEL = {"units": 4, "dense_units": 4, "filters1": 3, "filters2": 3, "kernel_size": 2, "dropout": 0.1}
TRAIN = {"epochs": 1, "steps_per_epoch": 3, "batch_size": 8}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for name, data in (("city.json", CITY), ("model.json", MODEL), ("train.json", TRAIN)):
        (root / name).write_text(json.dumps(data))
    assert main(["generate", "--config", str(root / "city.json"), "--out", str(root / "city")]) == 0
    for variant in ("raw", "repaired", "aggregated"):
        assert main(["preprocess", "--data", str(root / "city"), "--variant", variant, "--step", "15",
                     "--out", str(root / variant)]) == 0
    return root


def train_args(root, variant, out, *extra):
    return ["train", "--dataset", str(root / variant), "--arch", "encdec", "--cell", "gru", "--pred", "5",
            "--input", "10", "--model-cfg", str(root / "model.json"), "--train-cfg", str(root / "train.json"),
            "--out", str(out), *extra]


def test_generate_is_deterministic(workspace, tmp_path):
    assert main(["generate", "--config", str(workspace / "city.json"), "--out", str(tmp_path)]) == 0
    for name in ("measurements.csv", "metadata.csv"):
        assert (tmp_path / name).read_bytes() == (workspace / "city" / name).read_bytes()
    assert (tmp_path / "manifest_generate.json").exists()


def test_generate_seed_flag(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"intersections": 1, "days": 1}))
    outs = []
    for name in ("a", "b"):
        assert main(["generate", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name / "measurements.csv").read_bytes())
    assert outs[0] == outs[1]


def test_generate_default_has_twelve_intersections(tmp_path, monkeypatch):
    import trafficrnn.datagen as dg

    seen = {}
    monkeypatch.setattr(dg, "write_city", lambda cfg, out: seen.setdefault("cfg", cfg) and ())
    assert main(["generate", "--out", str(tmp_path)]) == 0
    assert seen["cfg"].intersections == 12


def test_missing_config_exits_2(tmp_path, capsys):
    assert main(["generate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err


def test_invalid_config_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"missing_prob": 3}))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "missing_prob" in capsys.readouterr().err


def test_step_not_dividing_day_exits_2(workspace, tmp_path):
    assert main(["preprocess", "--data", str(workspace / "city"), "--variant", "raw", "--step", "7",
                 "--out", str(tmp_path)]) == 2


def test_unknown_variant_is_a_usage_error(workspace, tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["preprocess", "--data", str(workspace / "city"), "--variant", "cooked", "--out", str(tmp_path)])
    assert info.value.code == 2


def test_missing_dataset_exits_2(tmp_path):
    assert main(train_args(tmp_path, "absent", tmp_path / "m")) == 2


def test_raw_archive_keeps_markers(workspace, tmp_path):
    assert main(["preprocess", "--data", str(workspace / "city"), "--variant", "raw", "--out", str(tmp_path)]) == 0
    raw = load_dataset(tmp_path)
    assert raw.step_min == 1
    assert np.any(raw.values == -1.0)
    np.testing.assert_array_equal(raw.values == -1.0, raw.missing)


def test_aggregated_has_one_channel_per_direction(workspace):
    agg = load_dataset(workspace / "aggregated")
    with open(workspace / "city" / "metadata.csv") as fh:
        directions = {(r["intersection_id"], r["direction_id"]) for r in csv.DictReader(fh)}
    assert agg.n_channels == len(directions)


def test_train_evaluate_report(workspace, tmp_path):
    run = tmp_path / "run"
    assert main(train_args(workspace, "repaired", run)) == 0
    assert main(["evaluate", "--model", str(run), "--dataset", str(workspace / "repaired")]) == 0
    assert main(["report", "--run", str(run), "--dataset", str(workspace / "repaired"), "--svg"]) == 0
    for name in ("model.json", "params.bin", "loss.csv", "report.json", "per_step.csv", "per_channel.csv",
                 "results.csv", "correlation.csv", "per_step_rmse.svg", "correlation.svg",
                 "manifest_train.json", "manifest_evaluate.json", "manifest_report.json"):
        assert (run / name).exists(), name
    report = json.loads((run / "report.json").read_text())
    assert len(report["per_step"]) == 5
    manifest = json.loads((run / "manifest_train.json").read_text())
    assert manifest["command"] == "train" and manifest["seed"] is None
    assert manifest["config"]["model"]["units"] == 4


def test_commands_are_idempotent(workspace, tmp_path):
    texts = []
    for name in ("a", "b"):
        run = tmp_path / name
        assert main(train_args(workspace, "repaired", run, "--seed", "3")) == 0
        assert main(["evaluate", "--model", str(run), "--dataset", str(workspace / "repaired")]) == 0
        texts.append({f: (run / f).read_bytes() for f in ("params.bin", "loss.csv", "per_step.csv", "per_channel.csv")})
    assert texts[0] == texts[1]


def test_report_without_evaluation_exits_2(tmp_path):
    tmp_path.joinpath("r").mkdir()
    assert main(["report", "--run", str(tmp_path / "r")]) == 2


def test_channel_mismatch_exits_2(workspace, tmp_path):
    run = tmp_path / "run"
    assert main(train_args(workspace, "repaired", run)) == 0
    assert main(["evaluate", "--model", str(run), "--dataset", str(workspace / "aggregated")]) == 2


def test_divergence_exits_3(workspace, tmp_path, monkeypatch, capsys):
    import trafficrnn.train as tr

    def explode(*a, **k):
        raise DivergenceError("training diverged at epoch 4, step 17: non-finite gradient", epoch=4, step=17)

    monkeypatch.setattr(tr, "train", explode)
    assert main(train_args(workspace, "repaired", tmp_path / "m")) == 3
    assert "epoch 4, step 17" in capsys.readouterr().err


def test_correlate(workspace, tmp_path):
    assert main(["correlate", "--dataset", str(workspace / "aggregated"), "--out", str(tmp_path)]) == 0
    rows = list(csv.reader(open(tmp_path / "correlation.csv")))
    c = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    np.testing.assert_array_equal(c, c.T)
    np.testing.assert_array_equal(np.diag(c), 1.0)


def test_grid_dry_run_enumerates_full_grid(tmp_path, capsys):
    spec = tmp_path / "grid.json"
    spec.write_text("{}")
    assert main(["grid", "--spec", str(spec), "--out", str(tmp_path / "g"), "--dry-run"]) == 0
    assert "270 runs" in capsys.readouterr().out
    assert len((tmp_path / "g" / "runs.csv").read_text().splitlines()) == 271


def test_grid_and_stability_run(workspace, tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    (data / "aggregated_15").symlink_to(workspace / "aggregated")
    spec = tmp_path / "grid.json"
    spec.write_text(json.dumps({"variants": ["aggregated"], "step_sizes": [15], "pred_lens": [1],
                                "models": [["vecout", "gru"]], "input_len": 10, "model": MODEL, "train": TRAIN}))
    assert main(["grid", "--spec", str(spec), "--data", str(data), "--out", str(tmp_path / "g")]) == 0
    assert len((tmp_path / "g" / "results.csv").read_text().splitlines()) == 2
    args = ["stability"] + train_args(workspace, "aggregated", tmp_path / "s")[1:] + ["--runs", "2", "--same-seed"]
    assert main(args) == 0
    summary = list(csv.DictReader(open(tmp_path / "s" / "stability_summary.csv")))
    assert [float(r["iqr"]) for r in summary] == [0.0] * 5
