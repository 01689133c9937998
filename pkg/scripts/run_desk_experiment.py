"""End-to-end desk-scale experiment: data, training, evaluation, ablation.

Runs the whole pipeline on synthetic phantoms with the CPU-friendly desk
profile.  Expect roughly 15-20 minutes of training on a 2-core CPU box plus
a few minutes of evaluation and ablation.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
from make_phantom_dataset import build_dataset

from pddpm.cli import main as pddpm_main
from pddpm.config import desk_profile


def run(out_root: Path, seed: int = 0, quick: bool = False) -> None:
    out_root.mkdir(parents=True, exist_ok=True)
    data_dir = out_root / "data"
    manifest = build_dataset(
        data_dir,
        n_train=8 if quick else 64,
        n_val=2 if quick else 8,
        n_val_unhealthy=4 if quick else 16,
        n_test_unhealthy=4 if quick else 16,
        n_test_healthy=2 if quick else 8,
        seed=seed,
    )
    cfg = desk_profile(seed=seed)
    if quick:
        from dataclasses import replace

        cfg.train = replace(cfg.train, max_epochs=2, steps_per_epoch=25)
    cfg_path = out_root / "desk_config.yaml"
    cfg.to_yaml(cfg_path)

    rc = pddpm_main(
        ["train", "--config", str(cfg_path), "--manifest", str(manifest),
         "--out", str(out_root / "train")]
    )
    if rc != 0:
        raise SystemExit(rc)
    checkpoint = next((out_root / "train").glob("*/checkpoint.pt"))

    for name, extra in (
        ("evaluate-pddpm", ["--baseline", "pddpm"]),
        ("evaluate-ddpm", ["--baseline", "ddpm"]),
        ("evaluate-thresh", ["--baseline", "thresh"]),
    ):
        rc = pddpm_main(
            ["evaluate", "--config", str(cfg_path),
             "--checkpoint", str(checkpoint),
             "--val-manifest", str(manifest), "--test-manifest", str(manifest),
             "--out", str(out_root / name)] + extra
        )
        if rc != 0:
            raise SystemExit(rc)

    rc = pddpm_main(
        ["ablate", "--config", str(cfg_path), "--checkpoint", str(checkpoint),
         "--val-manifest", str(manifest),
         "--patch-sizes", "32,48,64",
         "--t-tests", "100,300,500,700,900" if quick else
         "100,200,300,400,500,600,700,800,900",
         "--out", str(out_root / "ablate")]
    )
    if rc != 0:
        raise SystemExit(rc)

    rc = pddpm_main(
        ["noise-viz", "--config", str(cfg_path), "--out", str(out_root / "noise-viz")]
    )
    if rc != 0:
        raise SystemExit(rc)
    print(f"\nall runs complete under {out_root}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/desk-experiment")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--quick", action="store_true", help="tiny smoke-test variant")
    args = ap.parse_args()
    run(Path(args.out), seed=args.seed, quick=args.quick)
