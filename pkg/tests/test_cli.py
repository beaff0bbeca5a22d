import json
import pytest
import yaml

from promptmine.cli import (
    ConfigError,
    ExperimentConfig,
    cmd_report,
    config_from_dict,
    config_to_dict,
    load_config,
    main,
    save_config,
    validate_config,
)


def small_config(tmp_path, **train_overrides):
    doc = {
        "dataset": {
            "layout": "synthetic",
            "labeled_fraction": 0.5,
            "val_fraction": 0.2,
            "test_fraction": 0.2,
            "seed": 3,
            "synthetic": {"n": 30, "image_size": 48},
        },
        "student": {"architecture": "tiny_ed"},
        "teacher": {
            "backend": "oracle",
            "seed": 3,
            "noise": {"boundary_jitter_px": 0, "prompt_sensitivity": True},
        },
        "train": {
            "base_lr": 3e-3,
            "min_lr": 1e-5,
            "max_epochs": 2,
            "early_stop_patience": 5,
            "seed": 3,
            **train_overrides,
        },
        "augmentation": {"resize_shortest_side": 48, "crop_size": 48},
        "output_dir": str(tmp_path / "exp"),
    }
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


def test_config_round_trip(tmp_path):
    config = ExperimentConfig()
    path = tmp_path / "c.yaml"
    save_config(config, path)
    assert load_config(path) == config
    # parse -> serialize -> parse is identity on the document level too
    doc = config_to_dict(config)
    assert config_to_dict(config_from_dict(doc)) == doc


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown top-level"):
        config_from_dict({"teachers": {}})
    with pytest.raises(ConfigError, match="unknown keys"):
        config_from_dict({"train": {"learning_rate": 1.0}})


def test_env_override(tmp_path, monkeypatch):
    path = small_config(tmp_path)
    monkeypatch.setenv("PROMPTMINE_TRAIN__BASE_LR", "0.001")
    monkeypatch.setenv("PROMPTMINE_TEACHER__BACKEND", "remote")
    monkeypatch.setenv("PROMPTMINE_TEACHER__ENDPOINT_URL", "http://h:1/x")
    config = load_config(path)
    assert config.train.base_lr == 0.001
    assert config.teacher.backend == "remote"
    assert config.teacher.endpoint_url == "http://h:1/x"


def test_validation_names_offending_field(tmp_path):
    path = small_config(tmp_path)
    doc = yaml.safe_load(path.read_text())
    doc["dataset"]["labeled_fraction"] = 1.5
    path.write_text(yaml.safe_dump(doc))
    with pytest.raises(ConfigError, match="dataset.labeled_fraction"):
        validate_config(load_config(path))
    assert main(["--config", str(path), "split"]) == 2


def test_split_writes_manifest_and_guards_overwrite(tmp_path, capsys):
    path = small_config(tmp_path)
    assert main(["--config", str(path), "split"]) == 0
    out = capsys.readouterr().out
    assert "labeled/unlabeled/val/test: 9/9/6/6" in out
    manifest = tmp_path / "exp" / "manifest.json"
    assert manifest.exists()
    assert main(["--config", str(path), "split"]) == 3  # refuses overwrite
    assert main(["--config", str(path), "--force", "split"]) == 0


def test_split_prints_paper_scale_counts(tmp_path, capsys):
    # 1000 samples at 75% labeled, 10% val, 10% test -> 600/200/100/100
    doc = {
        "dataset": {
            "layout": "synthetic",
            "labeled_fraction": 0.75,
            "val_fraction": 0.1,
            "test_fraction": 0.1,
            "seed": 7,
            "synthetic": {"n": 1000, "image_size": 16},
        },
        "output_dir": str(tmp_path / "exp1000"),
    }
    path = tmp_path / "big.yaml"
    path.write_text(yaml.safe_dump(doc))
    assert main(["--config", str(path), "split"]) == 0
    assert "labeled/unlabeled/val/test: 600/200/100/100" in capsys.readouterr().out


def test_reinit_before_pseudo_flag(tmp_path):
    path = small_config(tmp_path, reinit_before_pseudo=True)
    assert main(["--config", str(path), "split"]) == 0
    assert main(["--config", str(path), "train", "--phase", "one_time", "--warmup"]) == 0
    assert (tmp_path / "exp" / "one_time" / "summary.json").exists()


def test_train_supervised_smoke(tmp_path):
    path = small_config(tmp_path)
    assert main(["--config", str(path), "split"]) == 0
    assert main(["--config", str(path), "train", "--phase", "supervised"]) == 0
    run_dir = tmp_path / "exp" / "supervised"
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["phase"] == "supervised"
    assert summary["method"] == "supervised"
    assert summary["final_test"]["dice"]["n"] == 6
    assert (run_dir / "config.yaml").exists()
    assert (run_dir / "epochs.jsonl").exists()
    assert (run_dir / "checkpoints" / "best.pt").exists()


def test_train_one_time_requires_warm_checkpoint(tmp_path):
    path = small_config(tmp_path)
    assert main(["--config", str(path), "split"]) == 0
    assert main(["--config", str(path), "train", "--phase", "one_time"]) == 3


def test_train_continuous_with_warmup_writes_audit(tmp_path):
    path = small_config(tmp_path)
    assert main(["--config", str(path), "split"]) == 0
    assert main(["--config", str(path), "train", "--phase", "continuous", "--warmup"]) == 0
    audit = (tmp_path / "exp" / "continuous" / "audit.jsonl").read_text().strip()
    assert audit, "audit log must not be empty"
    first = json.loads(audit.splitlines()[0])
    assert {"sample_id", "pass_index", "prompt", "accepted"} <= set(first)
    summary = json.loads((tmp_path / "exp" / "continuous" / "summary.json").read_text())
    assert summary["teacher_checksum_before"] == summary["teacher_checksum_after"]


def test_mine_and_evaluate_commands(tmp_path, capsys):
    path = small_config(tmp_path)
    assert main(["--config", str(path), "split"]) == 0
    assert main(["--config", str(path), "train", "--phase", "supervised"]) == 0
    assert main(["--config", str(path), "mine"]) == 0
    out = capsys.readouterr().out
    assert "mined" in out
    assert (tmp_path / "exp" / "mine" / "pseudo_labels.json").exists()
    assert main(["--config", str(path), "evaluate"]) == 0
    assert (tmp_path / "exp" / "evaluation.json").exists()
    assert main(["--config", str(path), "evaluate", "--refine"]) == 0
    assert (tmp_path / "exp" / "evaluation_refined.json").exists()


def test_missing_manifest_is_runtime_error(tmp_path):
    path = small_config(tmp_path)
    assert main(["--config", str(path), "train", "--phase", "supervised"]) == 3


def test_lock_file_blocks_concurrent_use(tmp_path):
    path = small_config(tmp_path)
    assert main(["--config", str(path), "split"]) == 0
    lock = tmp_path / "exp" / ".lock"
    lock.write_text("123")
    assert main(["--config", str(path), "train", "--phase", "supervised"]) == 3
    lock.unlink()


def test_seed_override_applies_everywhere(tmp_path):
    path = small_config(tmp_path)
    from promptmine.cli import _resolve_config
    import argparse

    args = argparse.Namespace(config=str(path), seed=42, output_dir=None)
    config = _resolve_config(args)
    assert config.dataset.seed == 42
    assert config.train.seed == 42
    assert config.teacher.seed == 42


def fake_run_dir(tmp_path, name, method, frac, seed, dice, iou):
    d = tmp_path / name
    d.mkdir(parents=True)
    summary = {
        "method": method,
        "labeled_fraction": frac,
        "seed": seed,
        "final_test": {
            "dice": {"mean": dice, "std": 0.01, "n": 6},
            "iou": {"mean": iou, "std": 0.01, "n": 6},
        },
    }
    (d / "summary.json").write_text(json.dumps(summary))
    return d


def test_report_groups_by_split_and_flags_single_runs(tmp_path, capsys):
    dirs = [
        fake_run_dir(tmp_path, "a1", "supervised", 0.75, 1, 0.722, 0.617),
        fake_run_dir(tmp_path, "a2", "supervised", 0.75, 2, 0.724, 0.619),
        fake_run_dir(tmp_path, "b1", "continuous/points_box", 0.75, 1, 0.756, 0.658),
        fake_run_dir(tmp_path, "b2", "continuous/points_box", 0.75, 2, 0.754, 0.656),
        fake_run_dir(tmp_path, "c1", "supervised", 0.5, 1, 0.680, 0.575),
    ]
    csv_path = tmp_path / "table.csv"
    assert main(["report", *map(str, dirs), "--csv", str(csv_path)]) == 0
    out = capsys.readouterr().out
    assert "Labeled/Unlabeled Split (75% Labeled)" in out
    assert "Labeled/Unlabeled Split (50% Labeled)" in out
    assert "supervised" in out and "continuous/points_box" in out
    assert "0.755 ± 0.001" in out  # mean over the two continuous runs
    assert "1*" in out  # single-run flag for the 50% row
    csv = csv_path.read_text().splitlines()
    assert csv[0].startswith("split,method")
    assert len(csv) == 4


def test_report_rejects_malformed_run_dir(tmp_path):
    d = tmp_path / "broken"
    d.mkdir()
    (d / "summary.json").write_text("{}")
    assert main(["report", str(d)]) == 3
    assert main(["report", str(tmp_path / "missing")]) == 3


def test_aggregate_mean_std_over_seeds(tmp_path, capsys):
    dirs = [
        fake_run_dir(tmp_path, f"r{i}", "continuous/points_box", 0.75, i, d, d - 0.1)
        for i, d in enumerate((0.74, 0.75, 0.76))
    ]
    assert main(["report", *map(str, dirs)]) == 0
    out = capsys.readouterr().out
    assert "0.750 ± 0.008" in out  # population std of the three means
    assert "3" in out
