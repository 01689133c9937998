"""Synthetic phantoms, anomaly injection, volume I/O, and preprocessing.

Phantoms stand in for brain volumes at desk scale: an ellipsoidal support
with concentric intensity structure, a few nested interior ellipsoids, and a
smooth low-frequency texture field, all drawn deterministically per seed.
Injected anomalies are hyperintense ellipsoidal blobs with a Gaussian edge
falloff and exact ground-truth masks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .nifti import read_nifti, write_nifti


@dataclass
class VolumeTensor:
    """Channel-first volume (C, D, H, W) with a brain support mask (D, H, W)."""

    values: np.ndarray
    brain_mask: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    subject_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 4:
            raise ValueError(f"values must be (C, D, H, W), got shape {self.values.shape}")
        self.brain_mask = np.asarray(self.brain_mask).astype(bool)
        if self.brain_mask.shape != self.values.shape[1:]:
            raise ValueError(
                f"mask shape {self.brain_mask.shape} does not match volume "
                f"{self.values.shape[1:]}"
            )
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.values.shape

    def slices(self) -> np.ndarray:
        """View of the volume as a stack of (C, H, W) slices, index = depth."""
        return np.moveaxis(self.values, 1, 0)


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    val_healthy: tuple[str, ...]
    val_unhealthy: tuple[str, ...]
    test: tuple[str, ...]
    fold: int


def generate_phantom(seed: int, size=(8, 64, 64)) -> VolumeTensor:
    """Deterministic synthetic volume with elliptical support and inner structure."""
    D, H, W = (int(s) for s in size)
    if D < 4 or H < 32 or W < 32:
        raise ValueError(f"size must be at least (4, 32, 32), got {(D, H, W)}")
    rng = np.random.default_rng(seed)

    zz, yy, xx = np.meshgrid(
        np.arange(D, dtype=np.float64),
        np.arange(H, dtype=np.float64),
        np.arange(W, dtype=np.float64),
        indexing="ij",
    )
    cz = D / 2 - 0.5 + rng.uniform(-0.05, 0.05) * D
    cy = H / 2 - 0.5 + rng.uniform(-0.04, 0.04) * H
    cx = W / 2 - 0.5 + rng.uniform(-0.04, 0.04) * W
    az = D * rng.uniform(0.36, 0.44)
    ay = H * rng.uniform(0.38, 0.46)
    ax = W * rng.uniform(0.34, 0.42)
    theta = rng.uniform(0.0, np.pi)

    rho = _ellipsoid_rho(zz, yy, xx, (cz, cy, cx), (az, ay, ax), theta)
    mask = rho <= 1.0

    # concentric radial profile through smooth interpolation of control levels
    knots = np.linspace(0.0, 1.0, 6)
    levels = rng.uniform(0.30, 0.62, size=6)
    levels[-1] = rng.uniform(0.45, 0.62)  # brighter rim band
    profile = np.interp(rho, knots, levels)
    values = profile

    # nested interior ellipsoids: localized subject-specific structure the
    # model can only reconstruct from what survives the noising
    for _ in range(6):
        fz = rng.uniform(0.15, 0.5)
        fy = rng.uniform(0.08, 0.28)
        fx = rng.uniform(0.08, 0.28)
        off = (
            cz + rng.uniform(-0.3, 0.3) * az,
            cy + rng.uniform(-0.7, 0.7) * ay * 0.7,
            cx + rng.uniform(-0.7, 0.7) * ax * 0.7,
        )
        sub_rho = _ellipsoid_rho(
            zz, yy, xx, off, (az * fz, ay * fy, ax * fx), rng.uniform(0.0, np.pi)
        )
        edge = np.clip((1.0 - sub_rho) / 0.2, 0.0, 1.0)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        values = values + sign * rng.uniform(0.15, 0.3) * edge

    # smooth low-frequency texture from an upsampled coarse field
    coarse = rng.standard_normal((max(2, D // 3), max(4, H // 6), max(4, W // 6)))
    zoom = (D / coarse.shape[0], H / coarse.shape[1], W / coarse.shape[2])
    texture = ndimage.zoom(coarse, zoom, order=1)[:D, :H, :W]
    values = values + 0.06 * texture

    values = np.clip(values, 0.05, 0.65)
    values[~mask] = 0.0
    return VolumeTensor(
        values=values[None].astype(np.float32),
        brain_mask=mask,
        subject_id=f"phantom-{seed}",
    )


def _ellipsoid_rho(zz, yy, xx, center, axes, theta: float) -> np.ndarray:
    """Normalized ellipsoidal radius with in-plane rotation by theta."""
    cz, cy, cx = center
    az, ay, ax = axes
    dy = yy - cy
    dx = xx - cx
    ry = dy * np.cos(theta) + dx * np.sin(theta)
    rx = -dy * np.sin(theta) + dx * np.cos(theta)
    return np.sqrt(((zz - cz) / az) ** 2 + (ry / ay) ** 2 + (rx / ax) ** 2)


def inject_anomaly(
    phantom: VolumeTensor,
    seed: int,
    count: int = 3,
    radius_range: tuple[float, float] = (4.0, 8.0),
    contrast: float = 0.3,
    max_tries: int = 50,
) -> tuple[VolumeTensor, np.ndarray]:
    """Add hyperintense blobs inside the brain mask; returns (volume, ground truth).

    Each blob is an axis-aligned ellipsoid (z semi-axis capped by the volume
    depth) holding full contrast in its core and falling off as a Gaussian
    with sigma = radius/3 toward the support edge, truncated at the edge, so
    the ground truth is exactly the set of modified voxels.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    rmin, rmax = radius_range
    if not (0 < rmin <= rmax):
        raise ValueError(f"bad radius_range {radius_range}")
    values = phantom.values.copy()
    D, H, W = phantom.brain_mask.shape
    gt = np.zeros((D, H, W), dtype=bool)
    rng = np.random.default_rng(seed)
    zz, yy, xx = np.meshgrid(
        np.arange(D, dtype=np.float64),
        np.arange(H, dtype=np.float64),
        np.arange(W, dtype=np.float64),
        indexing="ij",
    )
    for _ in range(count):
        placed = False
        for _ in range(max_tries):
            r = rng.uniform(rmin, rmax)
            rz = min(r, max(1.5, D / 4.0))
            # distance transform in blob-scaled coordinates: centers at
            # distance >= r fit the whole ellipsoid inside the mask
            edt = ndimage.distance_transform_edt(
                phantom.brain_mask, sampling=(r / rz, 1.0, 1.0)
            )
            cand = np.argwhere(edt >= r + 0.5)
            if len(cand) == 0:
                continue
            cz, cy, cx = cand[rng.integers(len(cand))]
            rho = np.sqrt(
                ((zz - cz) / rz) ** 2 + ((yy - cy) / r) ** 2 + ((xx - cx) / r) ** 2
            )
            support = rho <= 1.0
            if not support.any():
                continue
            # plateau out to rho0, Gaussian edge falloff beyond (sigma = r/3)
            sigma = 1.0 / 3.0
            rho0 = 1.0 - 2.0 * sigma
            bump = contrast * np.exp(-np.maximum(0.0, rho - rho0) ** 2 / (2 * sigma**2))
            bump[~support] = 0.0
            values += bump[None].astype(np.float32)
            gt |= support
            placed = True
            break
        if not placed:
            raise ValueError("could not place anomaly inside the brain mask")
    out = replace(phantom, values=np.minimum(values, 1.0))
    return out, gt


def save_volume(v: VolumeTensor, path) -> None:
    """Write a volume: .nii/.nii.gz for NIfTI, otherwise .npz + .json sidecar."""
    path = Path(path)
    if path.name.endswith((".nii", ".nii.gz")):
        data = np.transpose(v.values, (3, 2, 1, 0))  # (W, H, D, C): x fastest
        write_nifti(path, data, spacing=v.spacing)
        return
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    np.savez(path, values=v.values, brain_mask=v.brain_mask.astype(np.uint8))
    sidecar = {
        "subject_id": v.subject_id,
        "spacing": list(v.spacing),
        "shape": list(v.values.shape),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_volume(path) -> VolumeTensor:
    path = Path(path)
    if path.name.endswith((".nii", ".nii.gz")):
        data, spacing = read_nifti(path)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4:
            raise ValueError(f"{path}: expected a 3D/4D volume, got ndim {data.ndim}")
        values = np.transpose(data, (3, 2, 1, 0)).astype(np.float32)
        mask = np.any(values != 0.0, axis=0)
        if not mask.any():
            raise ValueError(f"{path}: volume has no nonzero support")
        spacing3 = tuple(spacing) + (1.0,) * (3 - len(spacing))
        return VolumeTensor(values, mask, spacing=spacing3[:3], subject_id=path.stem)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    try:
        with np.load(path) as z:
            values = z["values"]
            mask = z["brain_mask"].astype(bool)
    except (KeyError, OSError, ValueError) as e:
        raise ValueError(f"{path}: not a valid volume container ({e})") from e
    sidecar_path = path.with_suffix(".json")
    subject_id, spacing = path.stem, (1.0, 1.0, 1.0)
    if sidecar_path.exists():
        meta = json.loads(sidecar_path.read_text())
        subject_id = meta.get("subject_id", subject_id)
        spacing = tuple(meta.get("spacing", spacing))
    return VolumeTensor(values, mask, spacing=spacing, subject_id=subject_id)


def _pool(a: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool the last three axes by an integer factor."""
    *lead, D, H, W = a.shape
    if D % factor or H % factor or W % factor:
        raise ValueError(f"dims {(D, H, W)} not divisible by factor {factor}")
    a = a.reshape(*lead, D // factor, factor, H // factor, factor, W // factor, factor)
    return a.mean(axis=(-5, -3, -1))


def preprocess(v: VolumeTensor, downsample: int = 1, trim_slices: int = 0) -> VolumeTensor:
    """Downsample by average pooling, trim transverse extremes, renormalize to [0, 1]."""
    if downsample < 1:
        raise ValueError("downsample factor must be >= 1")
    values = v.values.astype(np.float64)
    mask = v.brain_mask.astype(np.float64)
    if downsample > 1:
        values = _pool(values, downsample)
        mask = _pool(mask, downsample)
    mask = mask >= 0.5
    D = values.shape[1]
    if trim_slices < 0 or D - 2 * trim_slices < 1:
        raise ValueError(f"trimming {trim_slices} slices from depth {D} leaves nothing")
    if trim_slices:
        values = values[:, trim_slices : D - trim_slices]
        mask = mask[trim_slices : D - trim_slices]
    if not mask.any():
        raise ValueError("brain mask empty after preprocessing")
    inside = values[:, mask]
    lo = np.quantile(inside, 0.01, method="lower")
    hi = np.quantile(inside, 0.99, method="higher")
    if hi > lo:
        values = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
        values[:, ~mask] = 0.0
    spacing = tuple(s * downsample for s in v.spacing)
    return VolumeTensor(
        values.astype(np.float32), mask, spacing=spacing, subject_id=v.subject_id
    )


def make_splits(
    ids,
    folds: int,
    seed: int,
    strata=None,
    test_fraction: float = 0.0,
) -> list[DatasetSplit]:
    """Deterministic held-out test split plus stratified K-fold partition."""
    ids = [str(i) for i in ids]
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if strata is not None and len(strata) != len(ids):
        raise ValueError("strata must align with ids")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    labels = [strata[i] for i in order] if strata is not None else [0] * len(ids)

    n_test = int(round(test_fraction * len(ids)))
    test = shuffled[:n_test]
    pool = shuffled[n_test:]
    pool_labels = labels[n_test:]
    if len(pool) < folds:
        raise ValueError(f"{len(pool)} non-test ids cannot fill {folds} folds")

    # round-robin within each stratum keeps per-fold label proportions tight
    fold_members: list[list[str]] = [[] for _ in range(folds)]
    cursor = 0
    for label in sorted(set(pool_labels), key=str):
        for sid in [s for s, l in zip(pool, pool_labels) if l == label]:
            fold_members[cursor % folds].append(sid)
            cursor += 1
    splits = []
    for f in range(folds):
        val = tuple(fold_members[f])
        train = tuple(s for g in range(folds) if g != f for s in fold_members[g])
        splits.append(
            DatasetSplit(
                train=train,
                val_healthy=val,
                val_unhealthy=(),
                test=tuple(test),
                fold=f,
            )
        )
    return splits


def write_manifest(path, entries: list[dict]) -> None:
    """Dataset manifest: list of {id, path, role, gt_path?} records."""
    for e in entries:
        missing = {"id", "path", "role"} - set(e)
        if missing:
            raise ValueError(f"manifest entry missing keys {missing}: {e}")
    Path(path).write_text(json.dumps(entries, indent=2))


def read_manifest(path) -> list[dict]:
    entries = json.loads(Path(path).read_text())
    if not isinstance(entries, list):
        raise ValueError(f"{path}: manifest must be a JSON list")
    return entries


def load_manifest_volumes(manifest_path, role: str | None = None):
    """Yield (VolumeTensor, ground_truth_or_None) for manifest entries."""
    base = Path(manifest_path).parent
    for e in read_manifest(manifest_path):
        if role is not None and e["role"] != role:
            continue
        p = Path(e["path"])
        if not p.is_absolute():
            p = base / p
        vol = load_volume(p)
        gt = None
        if e.get("gt_path"):
            g = Path(e["gt_path"])
            if not g.is_absolute():
                g = base / g
            gt = load_volume(g).values[0] > 0.5
        yield vol, gt
