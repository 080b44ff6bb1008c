import csv
import json
import os
from pathlib import Path

import numpy as np
import pytest

from stlab import archive
from stlab.cli import StackDataset, load_model, main
from stlab.config import ConfigError, SCHEMA, load_config, validate
from stlab.convnet import init_network

SMALL = {
    "dataset": {"n_sims": 2, "n_steps": 25, "pair_stride": 1},
    "train": {"epochs": 1, "batch_size": 4},
    "eval": {"T_list": [1000, 1500], "n_samples": 2, "n_steps": 21, "n_pgm": 1},
    "bound": {"n_window": 3, "n_large": 30, "large_T": 1000, "n_steps": 20},
    "mid": {"T_list": [320, 640], "n_samples": 3},
}


def _config(tmp_path, **sections):
    cfg = json.loads(json.dumps(SMALL))
    for k, v in sections.items():
        cfg.setdefault(k, {}).update(v)
    path = tmp_path / f"cfg_{len(list(tmp_path.iterdir()))}.json"
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    cfg = root / "c.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["simulate", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return root / "data", cfg


# -- archives -------------------------------------------------------------

def test_archive_roundtrip_bytes(tmp_path):
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4, 5)).astype(np.float32)
    raw = archive.to_bytes(a)
    head = raw.split(b"\n", 1)[0]
    assert json.loads(head) == {"magic": "STLAB1", "dtype": "f32", "shape": [4, 5],
                                "order": "row-major", "count": 3}
    assert len(raw) == len(head) + 1 + 3 * 20 * 4
    back = archive.from_bytes(raw)
    assert np.array_equal(back, a)
    assert archive.to_bytes(back) == raw
    p = tmp_path / "a.stla"
    digest = archive.write_archive(p, a.astype(np.float64))
    assert digest == archive.sha256_file(p)
    assert archive.read_archive(p).dtype == np.float64
    assert np.array_equal(archive.read_archive(p, mmap=True), a)


def test_archive_rejects_bad_input():
    raw = archive.to_bytes(np.zeros((2, 3), np.float32))
    with pytest.raises(archive.ArchiveError):
        archive.from_bytes(raw[:-1])
    with pytest.raises(archive.ArchiveError):
        archive.from_bytes(b'{"magic":"NOPE"}\n')
    with pytest.raises(archive.ArchiveError):
        archive.from_bytes(b"no newline")
    with pytest.raises(archive.ArchiveError):
        archive.to_bytes(np.zeros((2, 2), np.int32))


def test_pgm_export(tmp_path):
    img = np.zeros((4, 6))
    img[1, 2] = 2.0
    img[3, 5] = 1.0
    meta = archive.write_pgm(tmp_path / "x.pgm", img)
    assert meta["scale"] == 2.0
    pix = archive.read_pgm(tmp_path / "x.pgm")
    assert pix.shape == (4, 6) and pix[1, 2] == 255 and pix[3, 5] == 128
    side = json.loads((tmp_path / "x.pgm.json").read_text())
    assert side["transform"] == "identity"
    meta = archive.write_pgm(tmp_path / "y.pgm", img, log_scale=True)
    assert meta["scale"] == pytest.approx(np.log(2.001 / 0.001))


# -- configuration ---------------------------------------------------------

def test_presets_validate():
    desk = load_config(preset="desk")
    paper = load_config(preset="paper")
    assert desk["dataset"]["n_sims"] == 500 and paper["dataset"]["n_sims"] == 10000
    assert paper["train"]["learning_rate"] == 6.112e-6 and paper["train"]["batch_size"] == 32
    assert load_config(seed=9)["seeds"]["mid"] == 9
    assert set(SCHEMA["properties"]) >= {"sim", "arch", "train", "eval", "seeds"}


def test_unknown_keys_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"epochs": 1, "momentum": 0.9}}))
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        validate({"extra": {}})
    assert main(["mid", "--config", str(bad), "--out", str(tmp_path / "m.csv")]) == 2
    (tmp_path / "broken.json").write_text("{")
    assert main(["mid", "--config", str(tmp_path / "broken.json"),
                 "--out", str(tmp_path / "m.csv")]) == 2


def test_bad_thread_settings(tmp_path, monkeypatch):
    cfg = _config(tmp_path)
    monkeypatch.setenv("STLAB_THREADS", "many")
    assert main(["mid", "--config", cfg, "--out", str(tmp_path / "m.csv")]) == 2
    monkeypatch.delenv("STLAB_THREADS")
    assert main(["mid", "--config", cfg, "--threads", "1", "--out", str(tmp_path / "m.csv")]) == 0


# -- commands --------------------------------------------------------------

def test_simulate_shards(dataset):
    root, _ = dataset
    man = json.loads((root / "manifest.json").read_text())
    assert len(man["shards"]) == 2
    assert all(len(s["steps"]) == 6 for s in man["shards"])
    ds = StackDataset(root)
    assert len(ds) == 12
    x, y = ds.batch([0, 11])
    assert x.shape == (2, 20, 128, 128) and y.shape == (2, 1, 128, 128)


def test_simulate_is_byte_identical(dataset, tmp_path):
    root, cfg = dataset
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    for f in sorted(os.listdir(root)):
        assert (root / f).read_bytes() == (tmp_path / "again" / f).read_bytes()


def test_simulate_rejects_short_runs(tmp_path):
    cfg = _config(tmp_path, dataset={"n_steps": 10})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "d")]) == 2


def test_train_zero_epochs_is_initialisation(dataset, tmp_path):
    root, _ = dataset
    cfg = _config(tmp_path, train={"epochs": 0})
    assert main(["train", "--config", cfg, "--dataset", str(root),
                 "--out", str(tmp_path / "m")]) == 0
    params, meta = load_model(tmp_path / "m")
    ref = init_network(params.specs, seed=int(np.random.default_rng(0).integers(2 ** 31)))
    assert np.array_equal(params.flatten(), ref.flatten())
    assert (tmp_path / "m" / "loss.csv").read_text() == "epoch,mean_loss\n"
    assert meta["stack_depth"] == 20


def test_train_refuses_corrupt_shard(dataset, tmp_path):
    root, _ = dataset
    bad = tmp_path / "bad"
    bad.mkdir()
    for f in os.listdir(root):
        (bad / f).write_bytes((root / f).read_bytes())
    shard = bad / "sim_00001_targets.stla"
    raw = bytearray(shard.read_bytes())
    raw[-1] ^= 0xFF
    shard.write_bytes(bytes(raw))
    cfg = _config(tmp_path)
    assert main(["train", "--config", cfg, "--dataset", str(bad),
                 "--out", str(tmp_path / "m")]) == 3
    assert not (tmp_path / "m" / "model.json").exists()
    assert main(["train", "--config", cfg, "--dataset", str(tmp_path / "missing"),
                 "--out", str(tmp_path / "m")]) == 3


def test_train_nan_exits_numerically(dataset, tmp_path):
    root, _ = dataset
    cfg = _config(tmp_path, train={"epochs": 3, "learning_rate": 1e30})
    with np.errstate(all="ignore"):
        code = main(["train", "--config", cfg, "--dataset", str(root),
                     "--out", str(tmp_path / "m")])
    assert code == 4


def test_training_smoke_halves_loss(dataset, tmp_path):
    root, _ = dataset
    for seed in range(3):
        cfg = _config(tmp_path, train={"epochs": 20, "batch_size": 4})
        out = tmp_path / f"m{seed}"
        assert main(["train", "--config", cfg, "--dataset", str(root), "--seed", str(seed),
                     "--out", str(out)]) == 0
        with open(out / "loss.csv") as f:
            losses = [float(r["mean_loss"]) for r in csv.DictReader(f)]
        assert len(losses) == 20 and losses[-1] < 0.5 * losses[0]


def test_training_smoke_decreasing_first_epochs(tmp_path):
    # 20 desk-length simulations rather than 500 keep this under a minute
    cfg = _config(tmp_path, dataset={"n_sims": 20, "n_steps": 50, "pair_stride": 10},
                  train={"epochs": 5, "batch_size": 8})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
    wins = 0
    for seed in range(5):
        out = tmp_path / f"m{seed}"
        assert main(["train", "--config", cfg, "--dataset", str(tmp_path / "d"),
                     "--seed", str(seed), "--out", str(out)]) == 0
        with open(out / "loss.csv") as f:
            losses = [float(r["mean_loss"]) for r in csv.DictReader(f)]
        wins += all(b < a for a, b in zip(losses, losses[1:]))
    assert wins >= 4


def test_eval_transfer_and_bound(dataset, tmp_path):
    root, _ = dataset
    cfg = _config(tmp_path)
    assert main(["train", "--config", cfg, "--dataset", str(root),
                 "--out", str(tmp_path / "m")]) == 0
    assert main(["eval-transfer", "--config", cfg, "--model", str(tmp_path / "m"),
                 "--out", str(tmp_path / "ev")]) == 0
    with open(tmp_path / "ev" / "transfer.csv") as f:
        rows = list(csv.DictReader(f))
    assert [float(r["T_km"]) for r in rows] == [1.0, 1.5]
    assert list(rows[0]) == ["T_km", "n_samples", "mse_mean", "mse_ci95", "ospa_mean",
                             "ospa_ci95", "pad_px"]
    assert archive.read_pgm(tmp_path / "ev" / "T1500_s0_output.pgm").shape == (192, 192)
    assert main(["bound", "--config", cfg, "--model", str(tmp_path / "m"),
                 "--out", str(tmp_path / "b" / "bound.json")]) == 0
    rep = json.loads((tmp_path / "b" / "bound.json").read_text())
    assert rep["constant"] == 0.0 and rep["A"] == 128 and rep["B"] == 88
    assert rep["mode"] == "theorem"
    low = _config(tmp_path, eval={"T_list": [500]})
    assert main(["eval-transfer", "--config", low, "--model", str(tmp_path / "m"),
                 "--out", str(tmp_path / "ev2")]) == 2


def test_eval_pads_odd_windows(dataset, tmp_path):
    root, _ = dataset
    cfg = _config(tmp_path, train={"epochs": 0}, eval={"T_list": [1000, 1023.4375]})
    assert main(["train", "--config", cfg, "--dataset", str(root),
                 "--out", str(tmp_path / "m")]) == 0
    assert main(["eval-transfer", "--config", cfg, "--model", str(tmp_path / "m"),
                 "--out", str(tmp_path / "ev")]) == 0
    with open(tmp_path / "ev" / "transfer.csv") as f:
        rows = list(csv.DictReader(f))
    # 131 px pads to 132
    assert [int(r["pad_px"]) for r in rows] == [0, 1]


def test_mid_command(tmp_path):
    cfg = _config(tmp_path)
    out = tmp_path / "mid.csv"
    assert main(["mid", "--config", cfg, "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [int(r["task_agents"]) for r in rows] == [5, 20]
    first = out.read_bytes()
    assert main(["mid", "--config", cfg, "--out", str(out)]) == 0
    assert out.read_bytes() == first
    one = _config(tmp_path, mid={"n_samples": 1})
    assert main(["mid", "--config", one, "--out", str(out)]) == 0
    assert all(float(r["amtp_std_mw"]) == 0.0 for r in csv.DictReader(out.open()))
    net = _config(tmp_path, mid={"placer": "network"})
    assert main(["mid", "--config", net, "--out", str(out)]) == 2


def test_mid_network_placer_from_model(tmp_path):
    from stlab.cli import save_model
    from stlab.convnet import LayerSpec
    params = init_network([LayerSpec("encoder", 1, 2, 3, 2), LayerSpec("decoder", 2, 1, 3, 2)])
    save_model(tmp_path / "mm", params, {"stack_depth": 1})
    cfg = _config(tmp_path, mid={"placer": "network", "model": str(tmp_path / "mm"),
                                 "T_list": [320], "n_samples": 2})
    assert main(["mid", "--config", cfg, "--out", str(tmp_path / "n.csv")]) == 0
    assert Path(tmp_path / "n.csv").read_text().startswith("window_m,")
