"""Generate a phantom dataset with train/val/unhealthy splits and a manifest.

Volumes are written as .npz containers with JSON sidecars; anomalous volumes
get a paired ground-truth volume and a manifest entry pointing at it.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from pddpm.data import VolumeTensor, generate_phantom, inject_anomaly, save_volume, write_manifest


def build_dataset(
    out_dir: Path,
    n_train: int = 64,
    n_val: int = 8,
    n_val_unhealthy: int = 16,
    n_test_unhealthy: int = 0,
    n_test_healthy: int = 0,
    size=(8, 64, 64),
    seed: int = 0,
    anomaly_count: int = 3,
    radius_range=(4.0, 8.0),
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    counter = 0

    def next_seed():
        nonlocal counter
        counter += 1
        return seed * 1_000_003 + counter

    for role, n in (("train", n_train), ("val", n_val), ("test_healthy", n_test_healthy)):
        for _ in range(n):
            v = generate_phantom(next_seed(), size=size)
            name = f"{role}_{v.subject_id}"
            save_volume(v, out_dir / f"{name}.npz")
            entries.append({"id": name, "path": f"{name}.npz", "role": role})

    for role, n in (("val_unhealthy", n_val_unhealthy), ("test_unhealthy", n_test_unhealthy)):
        for _ in range(n):
            base = generate_phantom(next_seed(), size=size)
            av, gt = inject_anomaly(
                base, seed=next_seed(), count=anomaly_count, radius_range=radius_range
            )
            name = f"{role}_{base.subject_id}"
            save_volume(av, out_dir / f"{name}.npz")
            gt_vol = VolumeTensor(
                gt[None].astype(np.float32),
                np.ones_like(gt),
                subject_id=f"{name}_gt",
            )
            save_volume(gt_vol, out_dir / f"{name}_gt.npz")
            entries.append(
                {
                    "id": name,
                    "path": f"{name}.npz",
                    "role": role,
                    "gt_path": f"{name}_gt.npz",
                }
            )

    manifest = out_dir / "manifest.json"
    write_manifest(manifest, entries)
    return manifest


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--n-train", type=int, default=64)
    ap.add_argument("--n-val", type=int, default=8)
    ap.add_argument("--n-val-unhealthy", type=int, default=16)
    ap.add_argument("--n-test-unhealthy", type=int, default=0)
    ap.add_argument("--n-test-healthy", type=int, default=0)
    ap.add_argument("--size", type=int, nargs=3, default=(8, 64, 64), metavar=("D", "H", "W"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--anomaly-count", type=int, default=3)
    args = ap.parse_args()
    manifest = build_dataset(
        Path(args.out),
        n_train=args.n_train,
        n_val=args.n_val,
        n_val_unhealthy=args.n_val_unhealthy,
        n_test_unhealthy=args.n_test_unhealthy,
        n_test_healthy=args.n_test_healthy,
        size=tuple(args.size),
        seed=args.seed,
        anomaly_count=args.anomaly_count,
    )
    print(f"manifest written to {manifest}")


if __name__ == "__main__":
    main()
