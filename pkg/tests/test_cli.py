import json
import struct

import numpy as np
import pytest

import fedbasis as fb
from fedbasis.cli import main
from fedbasis.config import ExperimentConfig
from fedbasis.errors import ConfigError


SMALL = {
    "seed": 3,
    "dataset": {
        "domains": 2,
        "classes": 3,
        "samples_per_domain": 180,
        "input_dim": 5,
        "domain_shift": 1.0,
        "class_separation": 1.2,
    },
    "bench": {"participating_per_domain": 3, "new_per_domain": 2},
    "model": {"hidden": [8]},
    "fed": {
        "rounds": 2,
        "local_epochs": 1,
        "num_bases": 2,
        "use_major": True,
        "algorithm": "fedbasis",
    },
    "personalization": {"epochs": 2, "lr_grid": [0.05]},
}


@pytest.fixture
def workspace(tmp_path):
    config_path = tmp_path / "config.json"
    doc = dict(SMALL)
    doc["out_dir"] = str(tmp_path / "out")
    config_path.write_text(json.dumps(doc))
    return tmp_path, config_path


def run(args):
    return main([str(a) for a in args])


# --- config loading ------------------------------------------------------------


def test_unknown_config_key_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"fed": {"leraning_rate": 1}}))
    with pytest.raises(ConfigError, match="leraning_rate"):
        ExperimentConfig.load(bad)


def test_set_overrides_take_effect(workspace):
    _, config_path = workspace
    cfg = ExperimentConfig.load(
        config_path, overrides=["fed.rounds=7", "fed.algorithm=fedavg"]
    )
    assert cfg.doc["fed"]["rounds"] == 7
    assert cfg.doc["fed"]["algorithm"] == "fedavg"
    with pytest.raises(ConfigError, match="unknown config key"):
        ExperimentConfig.load(config_path, overrides=["fed.nope=1"])


def test_unknown_key_exits_with_validation_status(workspace, capsys):
    _, config_path = workspace
    code = run(["train", "--config", config_path, "--set", "fed.nope=1"])
    assert code == 1
    assert "error: validation" in capsys.readouterr().err


# --- build-bench -----------------------------------------------------------------


def test_build_bench_writes_deterministic_outputs(workspace):
    tmp, config_path = workspace
    assert run(["build-bench", "--config", config_path]) == 0
    out = tmp / "out"
    csv1 = (out / "dataset.csv").read_bytes()
    manifest1 = (out / "manifest.json").read_bytes()
    assert run(["build-bench", "--config", config_path]) == 0
    assert (out / "dataset.csv").read_bytes() == csv1
    assert (out / "manifest.json").read_bytes() == manifest1

    manifest = json.loads(manifest1)
    assert len(manifest["clients"]) == 2 * (3 + 2)
    roles = {c["role"] for c in manifest["clients"]}
    assert roles == {"participating", "new"}


def test_build_bench_default_config_client_counts(tmp_path):
    # default population: 4 domains x (20 participating + 10 new)
    assert run(["build-bench", "--out", tmp_path / "out"]) == 0
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    participating = [c for c in manifest["clients"] if c["role"] == "participating"]
    new = [c for c in manifest["clients"] if c["role"] == "new"]
    assert len(participating) == 4 * 20
    assert len(new) == 4 * 10
    assert len(manifest["domains"]) == 4


def test_default_config_smoke_train_emits_major_checkpoint(tmp_path):
    # one round on pure defaults: a single metric record and a basis-set
    # checkpoint carrying K bases plus the major basis
    assert run(
        ["train", "--out", tmp_path / "out", "--set", "fed.rounds=1",
         "--set", "dataset.samples_per_domain=400"]
    ) == 0
    lines = (tmp_path / "out" / "metrics.jsonl").read_text().strip().split("\n")
    assert len(lines) == 1
    obj = fb.checkpoint_read(tmp_path / "out" / "checkpoint.fbas")
    assert isinstance(obj, fb.BasisSet)
    assert obj.k == 4 and obj.major is not None


def test_missing_domain_column_fails_with_named_error(workspace, capsys):
    tmp, config_path = workspace
    bad_csv = tmp / "bad.csv"
    bad_csv.write_text("f0,f1,label\n0.0,0.0,0\n")
    code = run(
        [
            "build-bench", "--config", config_path,
            "--set", "dataset.kind=csv",
            "--set", f"dataset.csv_path={bad_csv}",
        ]
    )
    assert code == 2
    assert "domain" in capsys.readouterr().err


# --- train -----------------------------------------------------------------------


def test_train_smoke_single_round(workspace):
    tmp, config_path = workspace
    assert run(["train", "--config", config_path, "--set", "fed.rounds=1"]) == 0
    lines = (tmp / "out" / "metrics.jsonl").read_text().strip().split("\n")
    assert len(lines) == 1
    record = json.loads(lines[0])
    assert record["round"] == 0
    assert set(record) == {
        "round", "phase", "mean_pairwise_cosine", "mean_alpha_entropy",
        "global_loss", "mean_personalized_acc", "mean_global_acc",
        "skipped_clients",
    }


def test_train_rerun_byte_identical(workspace):
    tmp, config_path = workspace
    assert run(["train", "--config", config_path]) == 0
    out = tmp / "out"
    metrics1 = (out / "metrics.jsonl").read_bytes()
    ckpt1 = (out / "checkpoint.fbas").read_bytes()
    assert run(["train", "--config", config_path]) == 0
    assert (out / "metrics.jsonl").read_bytes() == metrics1
    assert (out / "checkpoint.fbas").read_bytes() == ckpt1


def test_checkpoint_holds_k_plus_one_arrays(workspace):
    tmp, config_path = workspace
    assert run(["train", "--config", config_path]) == 0
    raw = (tmp / "out" / "checkpoint.fbas").read_bytes()
    assert raw[:4] == b"FBAS"
    num_blocks = struct.unpack("<I", raw[10:14])[0]
    pos = 14
    for _ in range(num_blocks):
        (name_len,) = struct.unpack("<I", raw[pos : pos + 4])
        pos += 4 + name_len + 16
    (array_count,) = struct.unpack("<I", raw[pos : pos + 4])
    assert array_count == SMALL["fed"]["num_bases"] + 1  # bases + major

    obj = fb.checkpoint_read(tmp / "out" / "checkpoint.fbas")
    assert isinstance(obj, fb.BasisSet) and obj.major is not None


def test_threaded_run_matches_sequential(workspace, monkeypatch):
    tmp, config_path = workspace
    assert run(["train", "--config", config_path]) == 0
    sequential = (tmp / "out" / "checkpoint.fbas").read_bytes()
    monkeypatch.setenv("FEDBASIS_THREADS", "4")
    assert run(["train", "--config", config_path]) == 0
    assert (tmp / "out" / "checkpoint.fbas").read_bytes() == sequential


# --- personalize -------------------------------------------------------------------


def test_personalize_report(workspace):
    tmp, config_path = workspace
    assert run(["train", "--config", config_path]) == 0
    assert run(["personalize", "--config", config_path]) == 0
    out = tmp / "out"
    lines = (out / "personalization.csv").read_text().strip().split("\n")
    assert lines[0] == "client_id,method,local_size,last_acc,best_acc,delta"
    methods = {line.split(",")[1] for line in lines[1:]}
    assert methods == {"uniform", "fedbasis"}
    new_clients = 2 * SMALL["bench"]["new_per_domain"]
    assert len(lines) - 1 == 2 * new_clients
    for line in lines[1:]:
        delta = float(line.split(",")[5])
        assert delta >= 0.0

    summary = json.loads((out / "personalization_summary.json").read_text())
    assert "fedbasis" in summary["trainable_params"]


def test_personalize_zero_epochs_last_equals_best(workspace):
    tmp, config_path = workspace
    assert run(["train", "--config", config_path]) == 0
    assert run(
        ["personalize", "--config", config_path, "--set", "personalization.epochs=0"]
    ) == 0
    lines = (tmp / "out" / "personalization.csv").read_text().strip().split("\n")
    for line in lines[1:]:
        cells = line.split(",")
        assert cells[3] == cells[4]
        assert float(cells[5]) == 0.0


# --- diagnose ----------------------------------------------------------------------


def test_diagnose_collapse_and_heatmap(workspace):
    tmp, config_path = workspace
    assert run(["train", "--config", config_path]) == 0
    assert run(["diagnose", "--config", config_path, "--mode", "collapse"]) == 0
    collapse = (tmp / "out" / "collapse.csv").read_text().strip().split("\n")
    assert collapse[0].startswith("algorithm,round,")
    algorithms = {line.split(",")[0] for line in collapse[1:]}
    assert algorithms == {"fedbasis_naive", "fedbasis"}

    assert run(["diagnose", "--config", config_path, "--mode", "heatmap"]) == 0
    heat = (tmp / "out" / "coefficients.csv").read_text().strip().split("\n")
    assert heat[0] == "client_id,domain,block,basis,coefficient"
    # participating clients x blocks x bases
    assert len(heat) - 1 == 6 * 2 * SMALL["fed"]["num_bases"]


def test_diagnose_compression(workspace):
    tmp, config_path = workspace
    assert run(["diagnose", "--config", config_path, "--mode", "compression"]) == 0
    rows = (tmp / "out" / "compression.csv").read_text().strip().split("\n")
    assert rows[0] == "method,k,mean_personalized_acc,explained_variance"
    methods = {line.split(",")[0] for line in rows[1:]}
    assert methods == {"original", "pca", "kmeans"}
