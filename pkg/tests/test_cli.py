import csv

import numpy as np
import pytest
import yaml

from conftest import oracle_model
from toolwear.cli import main
from toolwear.config import load_config
from toolwear.formats import load_checkpoint, load_dataset, save_checkpoint, save_dataset
from toolwear.nn.train import Checkpoint
from toolwear.pipeline import partition
from toolwear.spectrogram import Spectrogram

SMOKE = {"scene": {"n_total": 10}, "spectrogram": {"frames_per_run": 16},
         "nn": {"max_epochs": 2}}


def write_config(tmp_path, data, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return str(p)


def read_csv(path):
    with open(path) as f:
        return list(csv.reader(f))


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    d = tmp_path_factory.mktemp("smoke")
    cfg = write_config(d, SMOKE)
    assert main(["synth", "--config", cfg, "--out", str(d / "a.twps"), "--workers", "1"]) == 0
    return d, cfg


def test_synth_writes_one_record_per_run(smoke):
    d, _ = smoke
    items, n_total = load_dataset(d / "a.twps")
    assert n_total == 10 and sorted(s.run_label for s in items) == list(range(1, 11))
    assert items[0].shape == (513, 16)


def test_synth_is_byte_identical(smoke):
    d, cfg = smoke
    assert main(["synth", "--config", cfg, "--out", str(d / "b.twps"), "--workers", "2"]) == 0
    assert (d / "a.twps").read_bytes() == (d / "b.twps").read_bytes()


def test_train_then_eval(smoke, capsys):
    d, cfg = smoke
    ck = d / "m.twck"
    assert main(["train", "--config", cfg, "--data", str(d / "a.twps"), "--out", str(ck)]) == 0
    rows = read_csv(d / "m.metrics.csv")
    assert rows[0] == ["epoch", "train_loss", "val_loss"] and len(rows) == 3
    best = load_checkpoint(ck)
    assert best.val_loss == min(float(r[2]) for r in rows[1:])
    assert best.epoch == [int(r[0]) for r in rows[1:] if float(r[2]) == best.val_loss][0]

    out = d / "e.csv"
    args = ["eval", "--config", cfg, "--data", str(d / "a.twps"), "--checkpoint", str(ck),
            "--out", str(out), "--svg", str(d / "e.svg")]
    assert main(args) == 0
    first = out.read_bytes(), (d / "e.plot.csv").read_bytes(), (d / "e.svg").read_bytes()
    assert main(args) == 0
    assert first == (out.read_bytes(), (d / "e.plot.csv").read_bytes(), (d / "e.svg").read_bytes())
    report = read_csv(out)
    assert report[0][0] == "run" and report[-1][0] == "max"
    assert "max |mean error|" in capsys.readouterr().out


def level_dataset(path, n_total, frames=16):
    items = [Spectrogram(np.full((513, frames), 90.0 * r / n_total, np.float32), r)
             for r in range(1, n_total + 1)]
    save_dataset(path, items, n_total)
    return items


def oracle_setup(tmp_path, n_total):
    data = {"scene": {"n_total": n_total}, "spectrogram": {"frames_per_run": 16, "augment_copies": 0},
            "nn": {"pool_kind": "avg", "norm_kind": "batch", "dropout": 0.0}}
    cfg = write_config(tmp_path, data)
    items = level_dataset(tmp_path / "lv.twps", n_total)
    model = oracle_model(load_config(cfg).architecture())
    save_checkpoint(tmp_path / "o.twck", Checkpoint(model, 1, 0.0))
    return cfg, items


def test_eval_oracle_has_zero_error(tmp_path):
    cfg, items = oracle_setup(tmp_path, 90)
    out = tmp_path / "e.csv"
    assert main(["eval", "--config", cfg, "--data", str(tmp_path / "lv.twps"),
                 "--checkpoint", str(tmp_path / "o.twck"), "--out", str(out)]) == 0
    rows = read_csv(out)
    for row in rows[1:]:
        assert all(abs(float(x)) < 1e-4 for x in row[1:])
    test_runs = {s.run_label for s in partition(items, load_config(cfg)).test}
    plot = read_csv(tmp_path / "e.plot.csv")
    assert len(plot) - 1 == len(test_runs) == len(rows) - 2


def test_predict_oracle(tmp_path, capsys):
    cfg, _ = oracle_setup(tmp_path, 350)
    base = ["predict", "--config", cfg, "--data", str(tmp_path / "lv.twps"),
            "--checkpoint", str(tmp_path / "o.twck")]
    assert main(base + ["--run", "175"]) == 0
    out = capsys.readouterr().out
    assert "rul_fraction 0.5000" in out and "pred_win5 175.0000" in out
    assert main(base + ["--run", "999"]) == 3


def test_architecture_mismatch(tmp_path, capsys):
    oracle_setup(tmp_path, 90)
    other = write_config(tmp_path, {"scene": {"n_total": 90}, "spectrogram": {"frames_per_run": 16}},
                         "other.yaml")
    code = main(["eval", "--config", other, "--data", str(tmp_path / "lv.twps"),
                 "--checkpoint", str(tmp_path / "o.twck"), "--out", str(tmp_path / "e.csv")])
    assert code == 4
    err = capsys.readouterr().err
    assert "checkpoint:" in err and "config:" in err
    assert not (tmp_path / "e.csv").exists()


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path, {"nn": {"chanels": [4]}})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
    assert "nn.chanels" in capsys.readouterr().err


def test_missing_and_corrupt_data(tmp_path):
    ck = tmp_path / "none.twck"
    assert main(["train", "--data", str(tmp_path / "nope.twps"), "--out", str(ck)]) == 1
    (tmp_path / "bad.twps").write_bytes(b"TWPS\x01\x00")
    assert main(["train", "--data", str(tmp_path / "bad.twps"), "--out", str(ck)]) == 3
    assert not ck.exists()
