import copy
import json
import os

import numpy as np
import pytest

from clgraph.bench import (ConfigError, ExperimentConfig, aggregate,
                           config_from_dict, expand_sweep, run_experiment,
                           run_sweep)
from clgraph.cli import main as cli_main


def _synthetic_config(**overrides):
    base = dict(
        dataset="synthetic",
        method="bare",
        layers=1,
        hidden_dim=6,
        epochs=2,
        seed=0,
        ordering=["fan-out", "cycle"],
        synthetic_spec={"background_nodes": 40, "background_edges": 240,
                        "pattern_counts": {"fan-out": 4, "cycle": 4},
                        "seed": 7},
        extension=True,
    )
    base.update(overrides)
    return config_from_dict(base)


def _strip_volatile(record):
    out = copy.deepcopy(record)
    out.pop("wall_clock_seconds", None)
    out.pop("finished_at", None)
    return out


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config keys"):
        config_from_dict({"dataset": "synthetic", "method": "bare",
                          "widht": 3})


def test_config_enforces_study_grid_unless_extension():
    with pytest.raises(ConfigError, match="outside the study grid"):
        _synthetic_config(hidden_dim=6, extension=False)
    cfg = _synthetic_config(hidden_dim=128, layers=2, epochs=2,
                            extension=False)
    assert cfg.hidden_dim == 128


def test_config_requires_dataset_fields():
    with pytest.raises(ConfigError, match="synthetic_spec"):
        config_from_dict({"dataset": "synthetic", "method": "bare"})


def test_expand_sweep_matches_study_grid_arithmetic():
    grid = {
        "dataset": "ibm",
        "ibm_paths": {"transactions": "t.csv", "patterns": "p.txt"},
        "methods": ["bare", "ewc", "lwf", "mas", "twp", "gem"],
        "orderings": ["easy-to-hard", "hard-to-easy", "frequent-to-rare",
                      "rare-to-frequent", "fixed-random"],
        "layers": [1, 2, 3],
        "hidden_dims": [64, 128, 256],
        "epochs": [1, 2, 5, 10],
        "seeds": [0],
    }
    configs = expand_sweep(grid)
    assert len(configs) == 3 * 3 * 4 * 6 * 5  # 1080 runs per seed
    grid["seeds"] = [0, 1]
    assert len(expand_sweep(grid)) == 2160


def test_expand_sweep_single_point():
    grid = {
        "dataset": "synthetic",
        "synthetic_spec": {"background_nodes": 20, "background_edges": 60,
                           "pattern_counts": {"cycle": 2}},
        "ordering": ["cycle"],
        "methods": ["bare"],
        "layers": [1],
        "hidden_dims": [64],
        "epochs": [1],
        "seeds": [3],
    }
    configs = expand_sweep(grid)
    assert len(configs) == 1
    assert configs[0].seed == 3


def test_expand_sweep_rejects_empty_axis():
    with pytest.raises(ConfigError, match="empty"):
        expand_sweep({"dataset": "synthetic", "methods": [],
                      "synthetic_spec": {}})


def test_expand_sweep_deterministic_order():
    grid = {
        "dataset": "synthetic",
        "synthetic_spec": {"background_nodes": 20, "background_edges": 60,
                           "pattern_counts": {"cycle": 2}},
        "ordering": ["cycle"],
        "extension": True,
        "methods": ["bare", "gem"],
        "layers": [1, 2],
        "hidden_dims": [8],
        "epochs": [1],
        "seeds": [0],
    }
    a = [(c.method, c.layers) for c in expand_sweep(grid)]
    b = [(c.method, c.layers) for c in expand_sweep(grid)]
    assert a == b
    assert a == [("bare", 1), ("bare", 2), ("gem", 1), ("gem", 2)]


def test_run_record_is_deterministic(tmp_path):
    cfg = _synthetic_config(method="gem",
                            strategy_params={"memory_per_task": 5})
    rec_a = run_experiment(cfg, tmp_path / "a")
    rec_b = run_experiment(cfg, tmp_path / "b")
    assert _strip_volatile(rec_a) == _strip_volatile(rec_b)


def test_single_task_run_reports_absent_af(tmp_path):
    cfg = _synthetic_config(
        ordering=["fan-out"],
        synthetic_spec={"background_nodes": 30, "background_edges": 150,
                        "pattern_counts": {"fan-out": 4}, "seed": 2})
    record = run_experiment(cfg, tmp_path / "single")
    assert record["task_count"] == 1
    assert record["af"] is None
    assert np.isclose(record["ap"], record["matrix"][0][0], atol=1e-15)


def test_run_writes_results_heatmap_and_manifest(tmp_path):
    cfg = _synthetic_config()
    record = run_experiment(cfg, tmp_path / "run")
    assert (tmp_path / "run" / "results.json").exists()
    assert (tmp_path / "run" / "manifest.txt").exists()
    heatmap = (tmp_path / "run" / "heatmap.csv").read_text().splitlines()
    assert heatmap[0] == "i,j,value"
    assert len(heatmap) == 1 + 3  # k=2 lower triangle
    stored = json.loads((tmp_path / "run" / "results.json").read_text())
    assert _strip_volatile(stored) == _strip_volatile(record)
    # the full strategy config, defaults included, is in the record
    assert set(stored["config"]["strategy"]) >= {
        "method", "epochs", "reg_strength", "distill_weight", "temperature",
        "topology_weight", "memory_per_task", "margin", "importance_mode"}


def test_checkpoints_deleted_unless_kept(tmp_path):
    cfg = _synthetic_config()
    run_experiment(cfg, tmp_path / "drop")
    assert not os.listdir(tmp_path / "drop" / "checkpoints")
    cfg_keep = _synthetic_config(keep_checkpoints=True)
    run_experiment(cfg_keep, tmp_path / "keep")
    assert len(os.listdir(tmp_path / "keep" / "checkpoints")) == 2


def test_resume_after_interruption_matches_uninterrupted(tmp_path):
    cfg = _synthetic_config(method="ewc", epochs=2,
                            ordering=["fan-out", "cycle", "stack"],
                            synthetic_spec={"background_nodes": 40,
                                            "background_edges": 240,
                                            "pattern_counts": {"fan-out": 4,
                                                               "cycle": 4,
                                                               "stack": 3},
                                            "seed": 11})
    full = run_experiment(cfg, tmp_path / "full")
    partial = run_experiment(cfg, tmp_path / "resumed", stop_after_task=1)
    assert partial is None
    resumed = run_experiment(cfg, tmp_path / "resumed", resume=True)
    assert _strip_volatile(full) == _strip_volatile(resumed)


def test_two_disjoint_tasks_bare_shows_positive_forgetting(tmp_path):
    # ten epochs of fine-tuning on a disjoint second task must cost task 1
    cfg = _synthetic_config(
        method="bare", epochs=10, negatives="first-task-only",
        ordering=["fan-out", "cycle"],
        synthetic_spec={"background_nodes": 60, "background_edges": 400,
                        "pattern_counts": {"fan-out": 12, "cycle": 12},
                        "seed": 3})
    record = run_experiment(cfg, tmp_path / "forget")
    assert record["af"] > 0.0


def test_joint_near_zero_forgetting_on_balanced_tasks(tmp_path):
    # balanced classes: the union keeps every class trainable, so the
    # upper-bound baseline forgets (almost) nothing; median over 5 seeds
    afs = []
    for seed in range(5):
        cfg = _synthetic_config(
            method="joint", epochs=10, seed=seed, hidden_dim=16,
            learning_rate=0.02, ordering=["fan-out", "cycle"],
            synthetic_spec={"background_nodes": 60, "background_edges": 400,
                            "pattern_counts": {"fan-out": 40, "cycle": 40},
                            "pattern_sizes": {"fan-out": 4, "cycle": 4},
                            "seed": 21})
        record = run_experiment(cfg, tmp_path / f"joint{seed}")
        afs.append(record["af"])
    assert abs(float(np.median(afs))) < 0.05


def test_scored_set_switch_filters_to_laundering(tmp_path):
    cfg_all = _synthetic_config(scored_set="all")
    cfg_laundering = _synthetic_config(scored_set="laundering")
    rec_all = run_experiment(cfg_all, tmp_path / "all")
    rec_l = run_experiment(cfg_laundering, tmp_path / "laundering")
    assert rec_all["config"]["scored_set"] == "all"
    assert rec_l["config"]["scored_set"] == "laundering"
    assert rec_all["matrix"] != rec_l["matrix"]


def test_sweep_records_failures_and_continues(tmp_path):
    grid = {
        "dataset": "synthetic",
        "extension": True,
        "ordering": ["fan-out", "cycle"],
        "synthetic_spec": {"background_nodes": 40, "background_edges": 240,
                           "pattern_counts": {"fan-out": 4, "cycle": 4},
                           "seed": 7},
        "methods": ["bare", "joint"],
        "layers": [1],
        "hidden_dims": [6],
        "epochs": [1],
        "seeds": [0],
        "strategy_params": {"joint_capacity": 1},  # forces joint to fail
    }
    ok, failed = run_sweep(grid, tmp_path / "sweep")
    assert ok == 1 and failed == 1
    records = []
    for run_dir in sorted(os.listdir(tmp_path / "sweep")):
        with open(tmp_path / "sweep" / run_dir / "results.json") as fh:
            records.append(json.load(fh))
    statuses = sorted(r["status"] for r in records)
    assert statuses == ["failed", "ok"]
    failed_rec = next(r for r in records if r["status"] == "failed")
    assert "CapacityError" in failed_rec["error"]


def test_aggregate_scatter_and_tables(tmp_path):
    cfg = _synthetic_config(method="gem", epochs=2,
                            strategy_params={"memory_per_task": 5})
    run_experiment(cfg, tmp_path / "results" / "run_00000")
    paths = aggregate(tmp_path / "results", tmp_path / "agg")
    scatter = (tmp_path / "agg" / "scatter.csv").read_text().splitlines()
    assert scatter[0] == "method,epochs,layers,width,ordering,ap,af,fin,seed"
    assert len(scatter) == 2
    assert scatter[1].startswith("gem,2,1,6,")
    # byte-identical rerun
    before = {p: open(p, "rb").read() for p in paths if os.path.exists(p)}
    aggregate(tmp_path / "results", tmp_path / "agg")
    after = {p: open(p, "rb").read() for p in before}
    assert before == after


def test_aggregate_skips_corrupt_records(tmp_path, caplog):
    os.makedirs(tmp_path / "results" / "bad")
    with open(tmp_path / "results" / "bad" / "results.json", "w") as fh:
        fh.write("{not json")
    aggregate(tmp_path / "results", tmp_path / "agg")
    scatter = (tmp_path / "agg" / "scatter.csv").read_text().splitlines()
    assert len(scatter) == 1  # header only


def test_cli_round_trip(tmp_path, capsys):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps({
        "background_nodes": 40, "background_edges": 240,
        "pattern_counts": {"fan-out": 4, "cycle": 4}, "seed": 7}))
    transactions = tmp_path / "synth.csv"
    patterns = tmp_path / "synth_patterns.txt"
    assert cli_main(["gen-synthetic", "--spec", str(spec_path),
                     "--transactions", str(transactions),
                     "--patterns", str(patterns)]) == 0
    assert transactions.exists() and patterns.exists()

    run_config = tmp_path / "run.json"
    run_config.write_text(json.dumps({
        "dataset": "ibm",
        "ibm_paths": {"transactions": str(transactions),
                      "patterns": str(patterns)},
        "method": "bare",
        "layers": 1, "hidden_dim": 6, "epochs": 1, "seed": 0,
        "ordering": ["fan-out", "cycle"],
        "extension": True,
    }))
    out_dir = tmp_path / "cli_run"
    assert cli_main(["run", "--config", str(run_config),
                     "--out", str(out_dir)]) == 0
    assert (out_dir / "results.json").exists()
    assert cli_main(["aggregate", "--results", str(out_dir.parent),
                     "--out", str(tmp_path / "cli_agg")]) == 0
    captured = capsys.readouterr()
    assert "run complete" in captured.out


def test_cli_sweep_exit_code_nonzero_on_failure(tmp_path):
    grid_path = tmp_path / "grid.json"
    grid_path.write_text(json.dumps({
        "dataset": "synthetic",
        "extension": True,
        "ordering": ["fan-out", "cycle"],
        "synthetic_spec": {"background_nodes": 40, "background_edges": 240,
                           "pattern_counts": {"fan-out": 4, "cycle": 4},
                           "seed": 7},
        "methods": ["joint"],
        "layers": [1], "hidden_dims": [6], "epochs": [1], "seeds": [0],
        "strategy_params": {"joint_capacity": 1},
    }))
    assert cli_main(["sweep", "--grid", str(grid_path),
                     "--out", str(tmp_path / "sweep")]) == 1
