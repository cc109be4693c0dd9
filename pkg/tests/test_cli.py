"""Command-line surface: config merging, commands, exit codes, artifacts.

A module-scoped workspace generates one tiny scene set and trains a
two-step checkpoint once; the command tests all run against it with
per-test output directories. Determinism claims are checked at the byte
level by rerunning commands and diffing files.
"""

import json
import os

import numpy as np
import pytest

from actbev import __version__
from actbev.cli import DEFAULTS, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, \
    EXIT_OK, ConfigError, RunConfig, main, model_from_config
from actbev.numcore import load_checkpoint
from actbev.selection import read_interest_map

TINY = {
    "grid": {"h": 8, "w": 8, "x_range": [-20.0, 20.0],
             "y_range": [-20.0, 20.0], "z_refs": [0.0, 1.0]},
    "model": {"c": 8, "layers": 2},
    "selection": {"c_pe": 16},
    "training": {"steps": 2, "batch": 1},
    "scenes": {"train": 2, "val": 1, "test": 2, "n_objects": 3,
               "n_agents": 2, "cams_per_agent": 1, "feat_size": 8,
               "layout": "grid"},
    "sweep": {"n_max": 2, "scenes": 2},
}


def write_config(root, name="config.json", **tweaks):
    values = json.loads(json.dumps(TINY))
    values["paths"] = {"out": str(root / "runs"),
                       "scenes": str(root / "scenes")}
    for dotted, val in tweaks.items():
        node = values
        parts = dotted.split("__")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = val
    path = root / name
    path.write_text(json.dumps(values, indent=1))
    return str(path)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root)
    assert main(["gen-scenes", "--config", cfg]) == EXIT_OK
    assert main(["train", "--config", cfg, "--baseline"]) == EXIT_OK
    return {"root": root, "cfg": cfg}


# ------------------------------------------------------------ configuration

def test_defaults_are_valid_and_split_counts_standard():
    config = RunConfig.build()
    assert config["scenes.train"] == 60
    assert config["scenes.val"] == 10
    assert config["scenes.test"] == 10
    assert config["grid.h"] == 32 and config["model.c"] == 32
    assert config["selection.epsilon"] == 0.01


def test_hash_stable_under_key_reorder(tmp_path):
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    a.write_text('{"model": {"c": 16, "layers": 2}, "seed": 3}')
    b.write_text('{"seed": 3, "model": {"layers": 2, "c": 16}}')
    ha = RunConfig.build(str(a)).hash
    hb = RunConfig.build(str(b)).hash
    assert ha == hb
    c = tmp_path / "c.json"
    c.write_text('{"seed": 4, "model": {"layers": 2, "c": 16}}')
    assert RunConfig.build(str(c)).hash != ha


def test_unknown_keys_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"modle": {"c": 16}}')
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.build(str(bad))
    nested = tmp_path / "nested.json"
    nested.write_text('{"model": {"c": 16, "bogus": 1}}')
    with pytest.raises(ConfigError, match="model.bogus"):
        RunConfig.build(str(nested))
    with pytest.raises(ConfigError, match="unknown config key"):
        RunConfig.build(None, [("model.bogus", 1)])
    with pytest.raises(ConfigError, match="unknown config key"):
        RunConfig.build(None, [("model", 1)])  # section, not a leaf


def test_precondition_violations_rejected():
    with pytest.raises(ConfigError, match="epsilon"):
        RunConfig.build(None, [("selection.epsilon", 1.5)])
    with pytest.raises(ConfigError, match="heads"):
        RunConfig.build(None, [("model.c", 9), ("model.n_head", 2)])
    with pytest.raises(ConfigError, match="steps"):
        RunConfig.build(None, [("training.steps", -1)])
    with pytest.raises(ConfigError, match="layout"):
        RunConfig.build(None, [("scenes.layout", "spiral")])
    with pytest.raises(ConfigError, match="increasing"):
        RunConfig.build(None, [("grid.x_range", [5.0, -5.0])])


def test_precedence_cli_over_file_over_defaults(tmp_path):
    path = tmp_path / "p.json"
    path.write_text('{"training": {"steps": 7}, "seed": 5}')
    from_file = RunConfig.build(str(path))
    assert from_file["training.steps"] == 7          # file beats default
    assert RunConfig.build()["training.steps"] == 150
    overridden = RunConfig.build(str(path), [("training.steps", 9),
                                             ("seed", 11)])
    assert overridden["training.steps"] == 9         # CLI beats file
    assert overridden["seed"] == 11


def test_exit_codes_distinct():
    codes = {EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED}
    assert len(codes) == 4 and EXIT_OK == 0
    assert all(c > 0 for c in codes - {EXIT_OK})


# ---------------------------------------------------------------- commands

def test_gen_scenes_deterministic_and_manifest_complete(work, tmp_path):
    first = work["root"] / "scenes"
    cfg2 = write_config(tmp_path, name="re.json")
    assert main(["gen-scenes", "--config", cfg2]) == EXIT_OK
    second = tmp_path / "scenes"
    walked = []
    for split in ("train", "val", "test"):
        names = sorted(os.listdir(first / split))
        assert names == sorted(os.listdir(second / split))
        for name in names:
            a = (first / split / name).read_bytes()
            b = (second / split / name).read_bytes()
            assert a == b
            walked.append(f"{split}/{name}")
    with open(second / "run_manifest.json") as fh:
        manifest = json.load(fh)
    assert manifest["outputs"] == sorted(walked)
    assert manifest["config_hash"] == RunConfig.build(cfg2).hash
    assert manifest["code_version"] == __version__
    assert manifest["started"] <= manifest["finished"]


def test_train_zero_steps_checkpoint_equals_init(work, tmp_path):
    out = tmp_path / "runs0"
    rc = main(["train", "--config", work["cfg"],
               "--set", "training.steps=0", "--out", str(out)])
    assert rc == EXIT_OK
    config = RunConfig.build(work["cfg"])
    fresh = model_from_config(config).named()
    saved = load_checkpoint(os.path.join(out, "checkpoint_gated.json"))
    assert sorted(saved) == sorted(fresh)
    for name, p in fresh.items():
        assert np.array_equal(saved[name], p.data)


def test_train_logs_and_dense_arm_leaves_gate_at_init(work):
    out = work["root"] / "runs"
    for arm in ("gated", "dense"):
        with open(out / f"loss_{arm}.csv") as fh:
            rows = [line.strip().split(",") for line in fh if line.strip()]
        assert rows[0] == ["step", "loss", "detection", "gate_mean"]
        assert len(rows) == 1 + TINY["training"]["steps"]
        assert all(np.isfinite(float(r[1])) for r in rows[1:])
    config = RunConfig.build(work["cfg"])
    init = model_from_config(config).named()
    dense = load_checkpoint(str(out / "checkpoint_dense.json"))
    gated = load_checkpoint(str(out / "checkpoint_gated.json"))
    gate_keys = [k for k in init if ".gate." in k]
    moved_keys = [k for k in init if k.startswith("head.")]
    assert gate_keys and moved_keys
    for k in gate_keys:
        # the dense arm never evaluates the gate, so no grad reaches it
        assert np.array_equal(dense[k], init[k].data)
    assert any(not np.array_equal(gated[k], init[k].data)
               for k in gate_keys)
    for arms in (dense, gated):
        assert any(not np.array_equal(arms[k], init[k].data)
                   for k in moved_keys)


def test_divergent_training_aborts_with_code(work, tmp_path, capsys):
    rc = main(["train", "--config", work["cfg"],
               "--set", "training.lr=1e6", "--set", "training.steps=6",
               "--out", str(tmp_path / "bomb")])
    assert rc == EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err


def test_eval_writes_both_metric_families_and_maps(work):
    cfg = work["cfg"]
    assert main(["eval", "--config", cfg]) == EXIT_OK
    out = work["root"] / "runs"
    with open(out / "metrics.json") as fh:
        doc = json.load(fh)
    for key in ("ap50", "ap70", "cd_map", "comm", "pose_bytes"):
        assert key in doc
    for key in ("n_ori", "n_act", "p_ratio", "bytes_up", "bytes_down"):
        assert key in doc["comm"]
    maps_dir = out / "interest_maps"
    with open(maps_dir / "manifest.json") as fh:
        entries = json.load(fh)["maps"]
    assert {e["layer"] for e in entries} == {0, 1}
    for e in entries:
        grid_vals = read_interest_map(str(maps_dir / e["file"]))
        assert grid_vals.shape == (8, 8)
        assert grid_vals.min() >= 0.0 and grid_vals.max() <= 1.0


def test_eval_rerun_is_byte_identical(work):
    out = work["root"] / "runs"
    before = (out / "metrics.json").read_bytes()
    maps_before = {p: (out / "interest_maps" / p).read_bytes()
                   for p in os.listdir(out / "interest_maps")}
    assert main(["eval", "--config", work["cfg"]]) == EXIT_OK
    assert (out / "metrics.json").read_bytes() == before
    for p, blob in maps_before.items():
        assert (out / "interest_maps" / p).read_bytes() == blob


def test_eval_empty_scene_set_is_an_error(work, tmp_path, capsys):
    cfg = write_config(tmp_path, name="empty.json")
    scenes = tmp_path / "scenes"
    for split in ("train", "val", "test"):
        os.makedirs(scenes / split, exist_ok=True)
    rc = main(["eval", "--config", cfg,
               "--checkpoint",
               str(work["root"] / "runs" / "checkpoint_gated.json")])
    assert rc == EXIT_CONFIG
    assert "at least one scene" in capsys.readouterr().err


def test_missing_scthan_dir_is_io_error(work, tmp_path, capsys):
    cfg = write_config(tmp_path, name="nodir.json")
    rc = main(["eval", "--config", cfg,
               "--checkpoint",
               str(work["root"] / "runs" / "checkpoint_gated.json")])
    assert rc == EXIT_IO
    assert "i/o error" in capsys.readouterr().err


def test_incompatible_checkpoint_rejected(work, tmp_path, capsys):
    rc = main(["eval", "--config", work["cfg"],
               "--set", "model.c=16",
               "--checkpoint",
               str(work["root"] / "runs" / "checkpoint_gated.json"),
               "--out", str(tmp_path / "mismatch")])
    assert rc == EXIT_CONFIG
    assert "incompatible checkpoint" in capsys.readouterr().err


def test_sweep_single_agent_row_matches_eval(work, tmp_path):
    root = tmp_path
    cfg = write_config(root, name="solo.json", scenes__n_agents=1,
                       sweep__n_max=1)
    assert main(["gen-scenes", "--config", cfg]) == EXIT_OK
    assert main(["train", "--config", cfg,
                 "--set", "training.steps=1"]) == EXIT_OK
    assert main(["eval", "--config", cfg]) == EXIT_OK
    assert main(["sweep", "--config", cfg]) == EXIT_OK
    out = root / "runs"
    with open(out / "metrics.json") as fh:
        metrics = json.load(fh)
    with open(out / "sweep.csv") as fh:
        header, row = [line.strip().split(",") for line in fh if line.strip()]
    rec = dict(zip(header, row))
    assert int(rec["n_car"]) == 1
    assert float(rec["ap50"]) == metrics["ap50"]
    assert float(rec["ap70"]) == metrics["ap70"]
    assert float(rec["cd_map"]) == metrics["cd_map"]
    with open(out / "plot_data.csv") as fh:
        plot_header, plot_row = [line.strip().split(",")
                                 for line in fh if line.strip()]
    assert plot_header == ["n_car", "pct_queries", "ap50", "ap70"]
    assert float(plot_row[1]) == float(rec["p_ratio"]) * 100.0


def test_sweep_rejects_more_cars_than_agents(work, capsys):
    rc = main(["sweep", "--config", work["cfg"], "--n-max", "3"])
    assert rc == EXIT_CONFIG
    assert "agents" in capsys.readouterr().err


def test_sweep_outputs_reproducible(work):
    cfg = work["cfg"]
    out = work["root"] / "runs"
    assert main(["sweep", "--config", cfg]) == EXIT_OK
    first = (out / "sweep.csv").read_bytes()
    assert main(["sweep", "--config", cfg]) == EXIT_OK
    assert (out / "sweep.csv").read_bytes() == first
    with open(out / "sweep.csv") as fh:
        header = fh.readline().strip().split(",")
    assert header == ["n_car", "ap50", "ap70", "cd_map", "n_ori", "n_act",
                      "p_ratio", "bytes_up", "bytes_down"]


def test_report_summarizes_and_requires_inputs(work, tmp_path, capsys):
    assert main(["report", "--config", work["cfg"]]) == EXIT_OK
    text = (work["root"] / "runs" / "report.md").read_text()
    assert RunConfig.build(work["cfg"]).hash in text
    assert "AP@0.5" in text and "Agent-count sweep" in text
    rc = main(["report", "--config", work["cfg"],
               "--out", str(tmp_path / "nothing")])
    assert rc == EXIT_IO
    assert "nothing to report" in capsys.readouterr().err


def test_thread_cap_does_not_change_results(work, tmp_path, monkeypatch):
    out_a = tmp_path / "serial"
    out_b = tmp_path / "pooled"
    ckpt = str(work["root"] / "runs" / "checkpoint_gated.json")
    assert main(["eval", "--config", work["cfg"], "--checkpoint", ckpt,
                 "--out", str(out_a)]) == EXIT_OK
    monkeypatch.setenv("ACTBEV_THREADS", "3")
    assert main(["eval", "--config", work["cfg"], "--checkpoint", ckpt,
                 "--out", str(out_b)]) == EXIT_OK
    assert (out_a / "metrics.json").read_bytes() == \
        (out_b / "metrics.json").read_bytes()


def test_named_flag_overrides_reach_outputs(work, tmp_path):
    out = tmp_path / "eps"
    ckpt = str(work["root"] / "runs" / "checkpoint_gated.json")
    assert main(["eval", "--config", work["cfg"], "--checkpoint", ckpt,
                 "--out", str(out), "--epsilon", "0.5"]) == EXIT_OK
    with open(out / "metrics.json") as fh:
        assert json.load(fh)["epsilon"] == 0.5


def test_gen_scenes_infeasible_geometry_is_config_error(tmp_path, capsys):
    cramped = write_config(tmp_path, scenes__n_agents=5,
                           scenes__world_half=4.0)
    rc = main(["gen-scenes", "--config", cramped])
    assert rc == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "config error" in err and "infeasible" in err
    # loosening the agent spacing makes the same cramped world feasible
    loose = write_config(tmp_path, name="loose.json", scenes__n_agents=3,
                         scenes__n_objects=2, scenes__world_half=5.0,
                         scenes__min_agent_dist=1.0)
    assert main(["gen-scenes", "--config", loose]) == EXIT_OK
