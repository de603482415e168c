import hashlib
import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import yaml

from guidevae import pipeline
from guidevae.cli import main
from guidevae.config import ConfigError, PipelineConfig, dump_config, from_dict, load_config

TINY = {
    "seed": 0,
    "data": {"fleet": {"num_users": 6, "days": 20, "seed": 3}},
    "amputation": {"n": None},
    "embedding": {"W": 6, "K": 2},
    "model": {"V": 3, "hidden_layers": 1, "hidden_width": 16},
    "train": {"max_epochs": 3, "n_mc": 2, "batch_size": 32},
    "evaluation": {"samples": 5},
}


def _write(tmp_path, overrides=None, name="cfg.yaml"):
    d = json.loads(json.dumps(TINY))
    for path, value in (overrides or {}).items():
        node = d
        *parents, leaf = path.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    path = tmp_path / name
    path.write_text(yaml.safe_dump(d))
    return str(path)


def _hashes(root: Path) -> dict:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def _run_all(cfg, out):
    for stage in ("prepare", "embed", "train", "eval"):
        assert main([stage, "--config", cfg, "--out", str(out)]) == 0


# -- config -------------------------------------------------------------------


def test_config_defaults_and_roundtrip(tmp_path):
    cfg = load_config(_write(tmp_path))
    assert cfg.model.xi == 1e-2 and cfg.model.eps == 1e-4 and cfg.amputation.b == 10
    assert cfg.split.ratios == [8.0, 2.0, 2.0]
    again = from_dict(yaml.safe_load(dump_config(cfg)))
    assert again == cfg
    assert again.stage_hash("eval") == cfg.stage_hash("eval")


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        load_config(_write(tmp_path, {"model.Vee": 3}))
    with pytest.raises(ConfigError, match="exactly one"):
        from_dict({"data": {}})
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, {"data.fleet.archetypes": [{"name": "a", "template": [1.0], "colour": 1}]}))


def test_stage_hashes_are_nested(tmp_path):
    cfg = load_config(_write(tmp_path))
    changed = cfg.replace(**{"model.V": 5})
    assert changed.stage_hash("embed") == cfg.stage_hash("embed")
    assert changed.stage_hash("train") != cfg.stage_hash("train")
    assert cfg.replace(seed=1).stage_hash("prepare") != cfg.stage_hash("prepare")
    assert cfg.stage_seed("kmeans") != cfg.stage_seed("lda")
    with pytest.raises(ConfigError):
        cfg.replace(**{"model.nope": 1})


def test_guided_flag():
    base = PipelineConfig(data=from_dict(TINY).data)
    assert base.guided
    assert not base.replace(**{"embedding.K": 0}).guided


# -- stages -------------------------------------------------------------------


def test_full_pipeline_and_determinism(tmp_path, capsys):
    cfg = _write(tmp_path)
    _run_all(cfg, tmp_path / "a")
    _run_all(cfg, tmp_path / "b")
    a, b = _hashes(tmp_path / "a"), _hashes(tmp_path / "b")
    assert a == b
    prep = tmp_path / "a" / "prepare"
    for name in ("train", "validation", "test", "missing"):
        assert (prep / f"{name}.csv").exists()
    manifest = json.loads((tmp_path / "a" / "embed" / "manifest.json").read_text())
    assert manifest["alpha"] == 0.5 and manifest["eta"] == pytest.approx(1 / 6)
    report = json.loads((tmp_path / "a" / "eval" / "report.json").read_text())
    assert set(report["sets"]) == {"test", "missing"}
    for stage in ("prepare", "embed", "train", "eval"):
        m = json.loads((tmp_path / "a" / stage / "manifest.json").read_text())
        assert m["config_hash"] == load_config(cfg).stage_hash(stage)


def test_unguided_embedding_is_skipped(tmp_path):
    cfg = _write(tmp_path, {"embedding.K": 0})
    _run_all(cfg, tmp_path)
    manifest = json.loads((tmp_path / "embed" / "manifest.json").read_text())
    assert manifest["mode"] == "unguided"
    assert not (tmp_path / "embed" / "gamma.csv").exists()


def test_generate_and_impute(tmp_path):
    cfg = _write(tmp_path)
    _run_all(cfg, tmp_path)
    assert main(["generate", "--config", cfg, "--out", str(tmp_path), "--user", "5", "--count", "10", "--month", "1", "--weekday", "0"]) == 0
    frame = pd.read_csv(next((tmp_path / "generate").glob("*.csv")))
    assert len(frame) == 240 and frame["kwh"].min() >= 0
    assert frame["date"].iloc[0] == "2021-01-04"
    prepared = pipeline.read_prepared(tmp_path, load_config(cfg))
    user = prepared.splits.missing.user_ids[int(np.bincount(prepared.splits.missing.user).argmax())]
    assert main(["impute", "--config", cfg, "--out", str(tmp_path), "--user", user, "--count", "5"]) == 0
    summary = json.loads((tmp_path / "impute" / f"{user}.json").read_text())
    assert len(summary["scores"]) == 5 and 0 <= summary["median_best_sample"] < 5


def test_sweep_table(tmp_path):
    cfg = _write(tmp_path)
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path), "--axis", "V", "--values", "0,2", "--repeats", "2"]) == 0
    frame = pd.read_csv(tmp_path / "sweep" / "V.csv")
    assert list(frame.columns) == ["axis_value", "seed", "test_ll", "missing_ll", "rll", "kl"]
    assert list(frame["axis_value"]) == [0, 0, 2, 2]
    assert list(frame["seed"]) == [0, 1, 0, 1]


# -- exit codes ---------------------------------------------------------------


def test_missing_config_is_input_error(tmp_path, capsys):
    assert main(["prepare", "--config", str(tmp_path / "nope.yaml")]) == 2
    assert "not found" in capsys.readouterr().err


def test_missing_csv_is_input_error(tmp_path):
    cfg = _write(tmp_path, {"data": {"csv": str(tmp_path / "none.csv")}})
    assert main(["prepare", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_missing_upstream_is_artifact_error(tmp_path, capsys):
    cfg = _write(tmp_path)
    assert main(["embed", "--config", cfg, "--out", str(tmp_path)]) == 3
    assert "prepare" in capsys.readouterr().err


def test_stale_upstream_refused_unless_forced(tmp_path, capsys):
    cfg = _write(tmp_path)
    assert main(["prepare", "--config", cfg, "--out", str(tmp_path)]) == 0
    stale = _write(tmp_path, {"amputation.b": 3.0}, name="other.yaml")
    assert main(["embed", "--config", stale, "--out", str(tmp_path)]) == 3
    assert "--force" in capsys.readouterr().err
    assert main(["embed", "--config", stale, "--out", str(tmp_path), "--force"]) == 0


def test_bad_generate_flags(tmp_path):
    cfg = _write(tmp_path)
    _run_all(cfg, tmp_path)
    base = ["generate", "--config", cfg, "--out", str(tmp_path), "--count", "2"]
    assert main(base + ["--user", "u9", "--month", "1", "--weekday", "0"]) == 2
    assert main(base + ["--user", "0", "--month", "13", "--weekday", "0"]) == 2


def test_csv_source(tmp_path):
    from guidevae.dataset import FleetSpec, export_readings_csv, generate_fleet

    export_readings_csv(generate_fleet(FleetSpec(num_users=5, days=15, seed=2)), tmp_path / "r.csv")
    cfg = _write(tmp_path, {"data": {"csv": str(tmp_path / "r.csv"), "min_days": 10}})
    assert main(["prepare", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    manifest = json.loads((tmp_path / "o" / "prepare" / "manifest.json").read_text())
    assert len(manifest["user_ids"]) == 5
