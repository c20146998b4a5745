import csv
import json

import pytest
import yaml

from satkit.cli import DEFAULTS, config_hash, load_config, main
from satkit.data import SaliencyStore
from satkit.errors import ConfigError
from satkit.models import load_checkpoint

TINY = {
    "seed": 1,
    "dataset": {"name": "synthetic_blobs", "classes": 2, "per_class": 8, "eval_per_class": 6},
    "teacher": {"arch": "small_cnn", "mode": "adv", "epochs": 1, "batch_size": 8},
    "saliency": {"method": "guided_backprop", "batch_size": 5},
    "train": {"arch": "small_cnn", "epochs": 1, "batch_size": 8,
              "attack": {"family": "pgd", "epsilon": "8/255", "steps": 2}},
    "eval": {"grid": [{"family": "pgd", "epsilon": "2/255", "steps": 2},
                      {"family": "saliency", "epsilon": "8/255"}]},
}


@pytest.fixture
def cfg_file(tmp_path):
    cfg = dict(TINY, output_dir=str(tmp_path / "out"))
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def test_config_precedence(cfg_file):
    cfg = load_config(cfg_file, {"train": {"epochs": 4}})
    assert cfg["train"]["epochs"] == 4
    assert cfg["train"]["batch_size"] == 8
    assert cfg["train"]["alpha10"] == DEFAULTS["train"]["alpha10"]
    assert config_hash(cfg) == config_hash(load_config(cfg_file, {"train": {"epochs": 4}}))
    assert config_hash(cfg) != config_hash(load_config(cfg_file))


def test_unknown_key_is_config_error(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("trian: {epochs: 3}\n")
    with pytest.raises(ConfigError):
        load_config(path)
    assert run("train", "--config", path) == 1


def test_malformed_and_missing_config(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: [unclosed\n")
    assert run("train", "--config", bad) == 1
    assert run("train", "--config", tmp_path / "nope.yaml") == 2
    assert "error" in capsys.readouterr().err


def test_sat_without_store_is_missing_artifact(cfg_file):
    assert run("train", "--config", cfg_file, "--mode", "sat") == 2


def test_full_pipeline(cfg_file, tmp_path, monkeypatch):
    out = tmp_path / "out"
    assert run("train-teacher", "--config", cfg_file) == 0
    teacher = out / "teacher" / "adv" / "model.zip"
    assert load_checkpoint(teacher).training_mode_tag == "adv"

    assert run("extract-saliency", "--config", cfg_file, "--checkpoint", teacher) == 0
    store = SaliencyStore.open(out / "saliency" / "guided_backprop")
    assert not store.partial and len(store) == 16
    assert store.metadata["method"] == "guided_backprop"
    assert store.metadata["teacher_id"].startswith("adv-")
    assert store.get(next(iter(store.entries))).kind == "signed"

    assert run("train", "--config", cfg_file, "--mode", "sat") == 0
    ckpt_path = out / "models" / "sat" / "model.zip"
    ckpt = load_checkpoint(ckpt_path)
    cfg = load_config(cfg_file)
    assert ckpt.metadata["config_hash"] == config_hash(cfg) and ckpt.metadata["seed"] == 1
    history = [json.loads(line) for line in (out / "models" / "sat" / "history.jsonl").read_text().splitlines()]
    assert history[0]["config_hash"] == config_hash(cfg)

    # no silent overwrite
    assert run("train", "--config", cfg_file, "--mode", "sat") == 1
    assert run("train", "--config", cfg_file, "--mode", "sat", "--force") == 0

    grid = tmp_path / "grid.yaml"
    grid.write_text(yaml.safe_dump([{"family": "pgd", "epsilon": "2/255", "steps": 2}]))
    assert run("evaluate", "--checkpoint", ckpt_path, "--grid", grid) == 0
    report = json.loads((out / "models" / "sat" / "report.json").read_text())
    assert report["n_eval"] == 12 and report["metadata"]["config_hash"] == config_hash(cfg)
    rows = list(csv.DictReader((out / "models" / "sat" / "report.csv").open()))
    assert [r["attack"] for r in rows] == ["clean", "pgd"]


def test_bbox_store_and_hybrid(cfg_file, tmp_path):
    out = tmp_path / "out"
    assert run("extract-saliency", "--config", cfg_file, "--method", "bbox") == 0
    store = out / "saliency" / "bbox"
    assert SaliencyStore.open(store).metadata["teacher_id"] == "annotation"
    assert run("train", "--config", cfg_file, "--mode", "pgd-sat", "--store", store) == 0
    assert run("train", "--config", cfg_file, "--mode", "uniform") == 0
    assert run("train-teacher", "--config", cfg_file) == 0
    assert run("extract-saliency", "--config", cfg_file, "--checkpoint",
               out / "teacher" / "adv" / "model.zip") == 0
    both = f"{store},{out / 'saliency' / 'guided_backprop'}"
    assert run("train", "--config", cfg_file, "--mode", "sat", "--store", both) == 0
    assert load_checkpoint(out / "models" / "sat" / "model.zip").metadata["saliency_stores"] == both.split(",")


def test_bbox_needs_annotations(tmp_path):
    assert run("extract-saliency", "--output-dir", tmp_path, "--method", "bbox",
               "--set", "dataset.name=digits", "--set", "dataset.per_class=5",
               "--set", "dataset.classes=[0, 1]") == 1


def test_rerun_reproduces_outputs(cfg_file, tmp_path):
    out = tmp_path / "out"
    assert run("train", "--config", cfg_file, "--mode", "pgd") == 0
    first = (out / "models" / "pgd" / "model.zip").read_bytes()
    assert run("train", "--config", cfg_file, "--mode", "pgd", "--force") == 0
    assert (out / "models" / "pgd" / "model.zip").read_bytes() == first


def test_sweep(cfg_file, tmp_path, monkeypatch):
    monkeypatch.setenv("SATKIT_OUTPUT_ROOT", str(tmp_path / "root"))
    assert run("extract-saliency", "--config", cfg_file, "--method", "bbox",
               "--output-dir", "rel") == 0
    store = tmp_path / "root" / "rel" / "saliency" / "bbox"
    assert store.exists()
    assert run("sweep", "--config", cfg_file, "--output-dir", "rel", "--store", store,
               "--param", "alpha10", "--values", "0.1,0.5,0.9", "--plot") == 0
    root = tmp_path / "root" / "rel" / "sweep-alpha10"
    reports = sorted(root.glob("value-*/report.json"))
    assert len(reports) == 3
    rows = list(csv.DictReader((root / "sweep.csv").open()))
    assert sorted({float(r["value"]) for r in rows}) == [0.1, 0.5, 0.9]
    assert (root / "sweep.png").stat().st_size > 0
    with pytest.raises(SystemExit):
        run("sweep", "--config", cfg_file, "--param", "alpha10", "--mode", "standard")


def test_sweep_rejects_bad_parameter(cfg_file):
    with pytest.raises(SystemExit):
        main(["sweep", "--config", str(cfg_file), "--param", "beta"])
