import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from pddpm.cli import main
from pddpm.config import RunConfig
from pddpm.data import (
    VolumeTensor,
    generate_phantom,
    inject_anomaly,
    save_volume,
    write_manifest,
)


@pytest.fixture(scope="module")
def tiny_setup(tmp_path_factory):
    """Tiny on-disk dataset + config able to run every command in seconds."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    data_dir.mkdir()
    entries = []
    for i in range(3):
        v = generate_phantom(i, size=(4, 32, 32))
        save_volume(v, data_dir / f"train{i}.npz")
        entries.append({"id": v.subject_id, "path": f"train{i}.npz", "role": "train"})
    v = generate_phantom(50, size=(4, 32, 32))
    save_volume(v, data_dir / "val0.npz")
    entries.append({"id": v.subject_id, "path": "val0.npz", "role": "val"})
    for i in range(2):
        base = generate_phantom(100 + i, size=(4, 32, 32))
        av, gt = inject_anomaly(base, seed=200 + i, count=1, radius_range=(3, 4))
        save_volume(av, data_dir / f"anom{i}.npz")
        gt_vol = VolumeTensor(
            gt[None].astype(np.float32), np.ones_like(gt), subject_id=f"gt{i}"
        )
        save_volume(gt_vol, data_dir / f"anom{i}_gt.npz")
        entries.append(
            {
                "id": av.subject_id + f"-anom{i}",
                "path": f"anom{i}.npz",
                "role": "val_unhealthy" if i == 0 else "test_unhealthy",
                "gt_path": f"anom{i}_gt.npz",
            }
        )
    hv = generate_phantom(60, size=(4, 32, 32))
    save_volume(hv, data_dir / "healthy_test.npz")
    entries.append({"id": "ht", "path": "healthy_test.npz", "role": "test_healthy"})
    manifest = data_dir / "manifest.json"
    write_manifest(manifest, entries)

    cfg = RunConfig.from_dict(
        {
            "schedule": {"T": 50},
            "noise": {"kind": "gaussian"},
            "patching": {"patch_h": 16, "patch_w": 16, "mode": "fixed"},
            "denoiser": {
                "channel_dims": [8, 16],
                "residual_blocks_per_level": 1,
                "time_embed_dim": 16,
            },
            "train": {
                "learning_rate": 1e-3,
                "batch_size": 2,
                "max_epochs": 2,
                "steps_per_epoch": 2,
                "t_test": 25,
                "loss_mode": "patch",
                "seed": 1,
            },
            "eval": {"median_kernel": 3, "erosion_iters": 1, "min_component": 1,
                     "n_thresholds": 20},
        }
    )
    cfg_path = root / "tiny.yaml"
    cfg.to_yaml(cfg_path)
    return {"root": root, "manifest": manifest, "config": cfg_path}


def _only_run_dir(out: Path) -> Path:
    dirs = [p for p in out.iterdir() if p.is_dir()]
    assert len(dirs) == 1, f"expected one run dir, found {dirs}"
    return dirs[0]


def test_train_command(tiny_setup, tmp_path):
    out = tmp_path / "runs"
    rc = main(
        [
            "train",
            "--config", str(tiny_setup["config"]),
            "--manifest", str(tiny_setup["manifest"]),
            "--out", str(out),
        ]
    )
    assert rc == 0
    run_dir = _only_run_dir(out)
    assert (run_dir / "checkpoint.pt").exists()
    assert (run_dir / "resolved_config.yaml").exists()
    with open(run_dir / "training_curve.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "train_loss"]
    assert len(rows) == 1 + 4  # 2 epochs x 2 steps
    # snapshot round-trips to the exact configuration
    snap = RunConfig.from_yaml(run_dir / "resolved_config.yaml")
    assert snap.to_dict() == RunConfig.from_yaml(tiny_setup["config"]).to_dict()


def test_train_missing_manifest_no_partial_run_dir(tiny_setup, tmp_path, capsys):
    out = tmp_path / "runs"
    rc = main(
        [
            "train",
            "--config", str(tiny_setup["config"]),
            "--manifest", str(tmp_path / "nope.json"),
            "--out", str(out),
        ]
    )
    assert rc != 0
    assert not out.exists() or not any(out.iterdir())
    assert "error:" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained_checkpoint(tiny_setup, tmp_path_factory):
    out = tmp_path_factory.mktemp("train_out")
    rc = main(
        [
            "train",
            "--config", str(tiny_setup["config"]),
            "--manifest", str(tiny_setup["manifest"]),
            "--out", str(out),
        ]
    )
    assert rc == 0
    return _only_run_dir(out) / "checkpoint.pt"


def test_evaluate_command(tiny_setup, trained_checkpoint, tmp_path):
    out = tmp_path / "runs"
    rc = main(
        [
            "evaluate",
            "--config", str(tiny_setup["config"]),
            "--checkpoint", str(trained_checkpoint),
            "--val-manifest", str(tiny_setup["manifest"]),
            "--test-manifest", str(tiny_setup["manifest"]),
            "--out", str(out),
        ]
    )
    assert rc == 0
    run_dir = _only_run_dir(out)
    report = json.loads((run_dir / "report.json").read_text())
    assert 0.0 <= report["dice_mean"] <= 1.0
    assert 0.0 <= report["auprc_mean"] <= 1.0
    assert (run_dir / "per_sample.csv").exists()
    assert list((run_dir / "anomaly_maps").glob("*.npz"))
    assert list((run_dir / "error_maps").glob("*.png"))


def test_evaluate_deterministic(tiny_setup, trained_checkpoint, tmp_path):
    reports = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        rc = main(
            [
                "evaluate",
                "--config", str(tiny_setup["config"]),
                "--checkpoint", str(trained_checkpoint),
                "--val-manifest", str(tiny_setup["manifest"]),
                "--out", str(out),
            ]
        )
        assert rc == 0
        reports.append((_only_run_dir(out) / "report.json").read_text())
    assert reports[0] == reports[1]


def test_evaluate_thresh_baseline_needs_no_model(tiny_setup, tmp_path):
    out = tmp_path / "runs"
    rc = main(
        [
            "evaluate",
            "--config", str(tiny_setup["config"]),
            "--baseline", "thresh",
            "--val-manifest", str(tiny_setup["manifest"]),
            "--out", str(out),
        ]
    )
    assert rc == 0
    report = json.loads((_only_run_dir(out) / "report.json").read_text())
    assert np.isfinite(report["dice_mean"])


def test_evaluate_missing_checkpoint_fails_cleanly(tiny_setup, tmp_path, capsys):
    out = tmp_path / "runs"
    rc = main(
        [
            "evaluate",
            "--config", str(tiny_setup["config"]),
            "--checkpoint", str(tmp_path / "missing.pt"),
            "--val-manifest", str(tiny_setup["manifest"]),
            "--out", str(out),
        ]
    )
    assert rc != 0
    assert not out.exists() or not any(out.iterdir())


def test_ablate_single_cell_matches_evaluate(tiny_setup, trained_checkpoint, tmp_path):
    out_eval = tmp_path / "eval"
    main(
        [
            "evaluate",
            "--config", str(tiny_setup["config"]),
            "--checkpoint", str(trained_checkpoint),
            "--val-manifest", str(tiny_setup["manifest"]),
            "--test-manifest", str(tiny_setup["manifest"]),
            "--out", str(out_eval),
        ]
    )
    report = json.loads((_only_run_dir(out_eval) / "report.json").read_text())

    out_abl = tmp_path / "ablate"
    rc = main(
        [
            "ablate",
            "--config", str(tiny_setup["config"]),
            "--checkpoint", str(trained_checkpoint),
            "--val-manifest", str(tiny_setup["manifest"]),
            "--test-manifest", str(tiny_setup["manifest"]),
            "--patch-sizes", "16",
            "--t-tests", "25",
            "--out", str(out_abl),
        ]
    )
    assert rc == 0
    run_dir = _only_run_dir(out_abl)
    with open(run_dir / "sweep.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 1
    assert float(rows[0]["dice"]) == pytest.approx(report["dice_mean"], abs=1e-9)
    assert (run_dir / "dice_vs_t_test.png").exists()
    assert (run_dir / "dice_vs_patch_size.png").exists()


def test_ablate_empty_grid_rejected(tiny_setup, trained_checkpoint, tmp_path, capsys):
    rc = main(
        [
            "ablate",
            "--config", str(tiny_setup["config"]),
            "--checkpoint", str(trained_checkpoint),
            "--val-manifest", str(tiny_setup["manifest"]),
            "--patch-sizes", "",
            "--t-tests", "25",
            "--out", str(tmp_path / "runs"),
        ]
    )
    assert rc != 0


def test_noise_viz(tiny_setup, tmp_path):
    out = tmp_path / "runs"
    rc = main(
        [
            "noise-viz",
            "--config", str(tiny_setup["config"]),
            "--out", str(out),
        ]
    )
    assert rc == 0
    run_dir = _only_run_dir(out)
    assert (run_dir / "noise_levels.png").exists()


def test_resume_reproduces_curve(tiny_setup, tmp_path):
    base_cfg = RunConfig.from_yaml(tiny_setup["config"])
    long_cfg_path = tmp_path / "long.yaml"
    d = base_cfg.to_dict()
    d["train"]["max_epochs"] = 4
    RunConfig.from_dict(d).to_yaml(long_cfg_path)

    out_full = tmp_path / "full"
    main(["train", "--config", str(long_cfg_path),
          "--manifest", str(tiny_setup["manifest"]), "--out", str(out_full)])
    full_curve = (_only_run_dir(out_full) / "training_curve.csv").read_text()

    out_half = tmp_path / "half"
    main(["train", "--config", str(tiny_setup["config"]),
          "--manifest", str(tiny_setup["manifest"]), "--out", str(out_half)])
    ckpt = _only_run_dir(out_half) / "checkpoint.pt"

    out_res = tmp_path / "res"
    rc = main(["train", "--config", str(long_cfg_path),
               "--manifest", str(tiny_setup["manifest"]),
               "--resume", str(ckpt), "--out", str(out_res)])
    assert rc == 0
    res_curve = (_only_run_dir(out_res) / "training_curve.csv").read_text()
    assert res_curve == full_curve


def test_cli_rejects_unknown_config_key(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"train": {"lr_typo": 1}}))
    rc = main(["noise-viz", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert rc != 0
    assert "lr_typo" in capsys.readouterr().err
