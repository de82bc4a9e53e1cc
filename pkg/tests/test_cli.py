import csv
import json

import numpy as np
import pytest

from robustgd.cli import main
from robustgd.experiments import PRESETS, ConfigError, ExperimentConfig, VerifyConfig
from robustgd.network import load_weights
from robustgd.trainer import read_trace_csv


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_figure_preset(tmp_path):
    assert main(["gen", "--preset", "fig4", "--out", str(tmp_path)]) == 0
    data = rows(tmp_path / "dataset.csv")
    assert len(data) == 400
    assert {r["cluster"] for r in data} == {"0", "1"}
    assert json.loads((tmp_path / "config.json").read_text())["data"]["n"] == 400


def test_gen_clean_labels_and_byte_identical_rerun(tmp_path):
    args = ["gen", "--preset", "fig4", "--set", "data.rho=0"]
    assert main(args + ["--out", str(tmp_path)]) == 0
    first = {name: (tmp_path / name).read_bytes() for name in ("dataset.csv", "config.json")}
    data = rows(tmp_path / "dataset.csv")
    assert all(r["y"] == r["y_clean"] and r["corrupted"] == "0" for r in data)
    assert main(args + ["--out", str(tmp_path)]) == 0
    for name, content in first.items():
        assert (tmp_path / name).read_bytes() == content


def test_train_zero_iterations(tmp_path):
    assert main(["train", "--preset", "fig4", "--set", "train.max_iters=0", "--out", str(tmp_path)]) == 0
    assert len(rows(tmp_path / "trace.csv")) == 1
    assert load_weights(tmp_path / "weights.bin").shape == (1000, 20)


def test_train_identity_toy(tmp_path):
    sets = ["data.K=2", "data.K_bar=2", "data.n=2", "data.d=2", "data.eps0=0", "data.delta=1", "data.rho=0",
            "network.k=2", "network.activation=identity", "train.eta=0.5", "train.max_iters=2000",
            "train.record_every=100"]
    args = ["train", "--out", str(tmp_path)]
    for s in sets:
        args += ["--set", s]
    assert main(args) == 0
    assert read_trace_csv(tmp_path / "trace.csv")["loss"][-1] <= 1e-8


def test_spectrum_exact_clusters_rank_K(tmp_path):
    args = ["spectrum", "--preset", "clustered-theorem", "--set", "train.max_iters=20", "--out", str(tmp_path)]
    assert main(args) == 0
    rep = json.loads((tmp_path / "spectrum.json").read_text())
    for at in ("init", "final"):
        s = np.array(rep[at]["singular_values"])
        assert np.sum(s > 1e-8 * s[0]) <= 5
    header = (tmp_path / "spectrum_hist.csv").read_text().splitlines()[0]
    assert header == "bin_left,bin_right,init,final"


def test_spectrum_perturbed_clusters_bimodal(tmp_path):
    args = ["spectrum", "--preset", "fig4", "--set", "train.max_iters=0", "--at", "init", "--out", str(tmp_path)]
    assert main(args) == 0
    rep = json.loads((tmp_path / "spectrum.json").read_text())["init"]
    print("top-K gap ratio at init:", rep["top_K_gap"])
    assert rep["top_K_gap"] > 1.5
    assert rep["eps_minus"] < rep["alpha"]


def test_hist_loss_clean_data_has_empty_corrupted_histogram(tmp_path):
    args = ["hist-loss", "--preset", "fig4", "--set", "data.rho=0", "--iters", "0,5", "--out", str(tmp_path)]
    assert main(args) == 0
    hist = rows(tmp_path / "loss_hist_5.csv")
    assert len(hist) == 50
    assert sum(int(r["corrupted"]) for r in hist) == 0
    assert sum(int(r["clean"]) for r in hist) == 400


def test_verify_exit_codes_and_summary(tmp_path):
    assert main(["verify", "--preset", "clustered-theorem", "--out", str(tmp_path / "ok")]) == 0
    summary = rows(tmp_path / "ok" / "summary.csv")
    assert len(summary) == len(PRESETS["clustered-theorem"].verify.names)
    assert all(r["holds"] == "True" for r in summary)
    bad = ["verify", "--preset", "clustered-theorem", "--set", "verify.negative_control=true",
           "--set", 'verify.names=["noise_freeze"]', "--out", str(tmp_path / "bad")]
    assert main(bad) == 3
    assert len(rows(tmp_path / "bad" / "summary.csv")) == 1


@pytest.mark.parametrize("override", ["data.rho=2", "network.k=0", "data.mode=flip", "data.nope=1"])
def test_invalid_config_exit_code(tmp_path, override):
    assert main(["gen", "--set", override, "--out", str(tmp_path)]) == 1
    assert not (tmp_path / "dataset.csv").exists()


def test_bad_arguments_exit_code():
    with pytest.raises(SystemExit) as info:
        main(["gen", "--preset", "nope"])
    assert info.value.code == 1


def test_emit_config_round_trip(tmp_path, capsys):
    assert main(["train", "--preset", "fig4", "--set", "train.eta=0.01", "--emit-config"]) == 0
    text = capsys.readouterr().out
    cfg = ExperimentConfig.from_dict(json.loads(text))
    assert cfg.train.eta == 0.01 and cfg.network.k == 1000
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    (tmp_path / "c.json").write_text(text)
    assert main(["gen", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 0


def test_all_presets_round_trip():
    for cfg in PRESETS.values():
        assert ExperimentConfig.from_dict(json.loads(cfg.to_json())) == cfg


def test_config_validation_messages():
    with pytest.raises(ConfigError, match="unknown verifiers"):
        VerifyConfig(names=("bogus",)).validate()


def test_seed_sweep_subdirectories(tmp_path):
    assert main(["gen", "--preset", "fig4", "--seeds", "3..4", "--out", str(tmp_path)]) == 0
    a = (tmp_path / "seed_3" / "dataset.csv").read_bytes()
    b = (tmp_path / "seed_4" / "dataset.csv").read_bytes()
    assert a != b
    assert json.loads((tmp_path / "seed_4" / "config.json").read_text())["data"]["seed"] == 4
