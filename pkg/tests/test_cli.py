import json
from pathlib import Path

import pytest

from causalzoo import cli, pipeline
from causalzoo.config import (config_from_dict, config_hash, config_to_dict,
                              default_config, load_config)
from causalzoo.errors import EstimationError

TINY = {
    "zoo": {"n": 10, "epochs": 2, "sampling_seed": 3, "train_seed": 5},
    "dataset": {"kind": "synthetic_shapes_16x16", "num_classes": 3, "size": 120,
                "generation_seed": 4},
    "probe_count": 4,
    "explain": {"methods": ["gradient", "grad_cam"], "smoothgrad_samples": 4,
                "ig_steps": 8, "noise_seed": 2, "grad_cam_layer": 0},
    "effects": {"hparam_keys": ["optimizer"], "kernels": ["linear", "rbf"],
                "min_group_size": 2},
    "analysis": {"percentile_edges": [0, 50, 100], "bootstrap_resamples": 40,
                 "bootstrap_seed": 6, "mediation_permutations": 2,
                 "permutation_seed": 8},
}


def write_tiny_config(tmp_path, **tweaks) -> Path:
    doc = json.loads(json.dumps(TINY))
    doc.update(tweaks)
    tmp_path.mkdir(parents=True, exist_ok=True)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_write_config_round_trips(tmp_path):
    path = tmp_path / "default.json"
    assert cli.main(["write-config", str(path)]) == 0
    assert load_config(path) == default_config()


def test_reproduce_byte_identical(tmp_path):
    cfg_path = write_tiny_config(tmp_path)
    outs = [tmp_path / "r1", tmp_path / "r2"]
    for out in outs:
        assert cli.main(["reproduce", "-c", str(cfg_path), "-o", str(out)]) == 0
    t1, t2 = tree_bytes(outs[0]), tree_bytes(outs[1])
    assert list(t1) == list(t2)
    assert all(t1[name] == t2[name] for name in t1)


def test_stagewise_equals_reproduce(tmp_path):
    cfg_path = write_tiny_config(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["reproduce", "-c", str(cfg_path), "-o", str(out_a)]) == 0
    for cmd in ("zoo-build", "explain", "effects", "analyze"):
        assert cli.main([cmd, "-c", str(cfg_path), "-o", str(out_b)]) == 0
    t1, t2 = tree_bytes(out_a), tree_bytes(out_b)
    assert t1 == t2


def test_missing_upstream_names_command(tmp_path, capsys):
    cfg_path = write_tiny_config(tmp_path)
    code = cli.main(["explain", "-c", str(cfg_path), "-o", str(tmp_path / "empty")])
    assert code == cli.EXIT_DATA
    err = capsys.readouterr().err
    assert "zoo-build" in err


def test_stale_upstream_rejected(tmp_path, capsys):
    cfg_path = write_tiny_config(tmp_path)
    out = tmp_path / "out"
    assert cli.main(["zoo-build", "-c", str(cfg_path), "-o", str(out)]) == 0
    changed = write_tiny_config(tmp_path / "c2", probe_count=3)
    code = cli.main(["explain", "-c", str(changed), "-o", str(out)])
    assert code == cli.EXIT_DATA
    assert "different configuration" in capsys.readouterr().err


def test_unknown_hparam_key_lists_valid(tmp_path, capsys):
    cfg_path = write_tiny_config(tmp_path)
    out = tmp_path / "out"
    assert cli.main(["zoo-build", "-c", str(cfg_path), "-o", str(out)]) == 0
    assert cli.main(["explain", "-c", str(cfg_path), "-o", str(out)]) == 0
    bad = json.loads(cfg_path.read_text())
    bad["effects"]["hparam_keys"] = ["optimzer"]
    bad_path = tmp_path / "bad.json"
    bad_path.write_text(json.dumps(bad))
    # same seeds but a different config hash would trip staleness first; use
    # the library call to hit the key validation itself
    with pytest.raises(Exception) as exc:
        pipeline.cmd_effects(config_from_dict(bad), out)
    assert "valid keys" in str(exc.value)
    assert "optimizer" in str(exc.value)


def test_analyze_on_empty_effects_no_partial_files(tmp_path):
    cfg_path = write_tiny_config(tmp_path)
    out = tmp_path / "out"
    assert cli.main(["zoo-build", "-c", str(cfg_path), "-o", str(out)]) == 0
    assert cli.main(["explain", "-c", str(cfg_path), "-o", str(out)]) == 0
    cfg = load_config(cfg_path)
    effects_dir = out / "effects"
    effects_dir.mkdir()
    (effects_dir / "effects_optimizer.csv").write_text(
        "instance_id,hparam_key,level,control_mode,bucket,outcome_kind,method,kernel,value\n")
    (effects_dir / "run_manifest.json").write_text(json.dumps({
        "stage": "effects", "tool_version": "0.1.0",
        "config_hash": config_hash(cfg), "config": config_to_dict(cfg)}))
    code = cli.main(["analyze", "-c", str(cfg_path), "-o", str(out)])
    assert code == cli.EXIT_DATA
    assert not (out / "analysis").exists()


def test_write_once_per_run_directory(tmp_path, capsys):
    cfg_path = write_tiny_config(tmp_path)
    out = tmp_path / "out"
    assert cli.main(["zoo-build", "-c", str(cfg_path), "-o", str(out)]) == 0
    code = cli.main(["zoo-build", "-c", str(cfg_path), "-o", str(out)])
    assert code == cli.EXIT_CONFIG
    assert "write-once" in capsys.readouterr().err


def test_bad_config_json_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["zoo-build", "-c", str(bad), "-o", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_unknown_config_field_rejected(tmp_path):
    path = write_tiny_config(tmp_path, extra_section={"x": 1})
    assert cli.main(["zoo-build", "-c", str(path), "-o", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_no_output_root(tmp_path, monkeypatch):
    monkeypatch.delenv("CAUSALZOO_OUT", raising=False)
    cfg_path = write_tiny_config(tmp_path)
    assert cli.main(["zoo-build", "-c", str(cfg_path)]) == cli.EXIT_CONFIG


def test_output_root_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv("CAUSALZOO_OUT", str(tmp_path / "envout"))
    cfg_path = write_tiny_config(tmp_path)
    assert cli.main(["zoo-build", "-c", str(cfg_path)]) == 0
    assert (tmp_path / "envout" / "zoo" / "manifest.json").exists()


def test_set_override_changes_config(tmp_path):
    cfg_path = write_tiny_config(tmp_path)
    out = tmp_path / "out"
    assert cli.main(["zoo-build", "-c", str(cfg_path), "-o", str(out),
                     "--set", "zoo.n=6"]) == 0
    manifest = json.loads((out / "zoo" / "manifest.json").read_text())
    assert len(manifest["records"]) == 6


def test_seed_flag_changes_sampled_population(tmp_path):
    cfg_path = write_tiny_config(tmp_path)
    out1, out2 = tmp_path / "s1", tmp_path / "s2"
    assert cli.main(["zoo-build", "-c", str(cfg_path), "-o", str(out1), "--seed", "1"]) == 0
    assert cli.main(["zoo-build", "-c", str(cfg_path), "-o", str(out2), "--seed", "2"]) == 0
    m1 = json.loads((out1 / "zoo" / "manifest.json").read_text())
    m2 = json.loads((out2 / "zoo" / "manifest.json").read_text())
    assert m1["sampling_seed"] != m2["sampling_seed"]
    assert m1["records"][0]["hparams"] != m2["records"][0]["hparams"]


def test_run_manifest_traceability(tmp_path):
    cfg_path = write_tiny_config(tmp_path)
    out = tmp_path / "out"
    assert cli.main(["reproduce", "-c", str(cfg_path), "-o", str(out)]) == 0
    cfg = load_config(cfg_path)
    expected = config_hash(cfg)
    for stage_dir in ("zoo", "explanations", "effects", "analysis"):
        doc = json.loads((out / stage_dir / "run_manifest.json").read_text())
        assert doc["config_hash"] == expected
        assert doc["tool_version"]
