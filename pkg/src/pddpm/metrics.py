"""Segmentation metrics, healthy reconstruction error, and the permutation test."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ScoreVector:
    """Per-sample scores with unique sample identifiers."""

    values: np.ndarray
    ids: tuple[str, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.ids = tuple(str(i) for i in self.ids)
        if self.values.ndim != 1 or len(self.values) != len(self.ids):
            raise ValueError("values must be 1D and aligned with ids")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("sample identifiers must be unique")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("scores must be finite")


@dataclass
class EvalReport:
    dice_mean: float
    dice_std: float
    auprc_mean: float
    auprc_std: float
    l1_healthy_mean: float
    threshold: float
    per_sample: dict[str, ScoreVector] = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {
            "dice_mean": self.dice_mean,
            "dice_std": self.dice_std,
            "auprc_mean": self.auprc_mean,
            "auprc_std": self.auprc_std,
            "l1_healthy_mean": self.l1_healthy_mean,
            "threshold": self.threshold,
        }
        d["per_sample"] = {
            name: {"ids": list(sv.ids), "values": [float(v) for v in sv.values]}
            for name, sv in self.per_sample.items()
        }
        return d

    def summary_lines(self) -> list[str]:
        """Percent-formatted summary, two decimals."""
        return [
            f"DICE [%]:  {100 * self.dice_mean:.2f} +- {100 * self.dice_std:.2f}",
            f"AUPRC [%]: {100 * self.auprc_mean:.2f} +- {100 * self.auprc_std:.2f}",
            f"l1 (1e-3): {1000 * self.l1_healthy_mean:.2f}",
            f"threshold: {self.threshold:.6g}",
        ]


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Overlap score 2|pred & gt| / (|pred| + |gt|); 1.0 when both are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def auprc(scores: np.ndarray, gt: np.ndarray) -> float:
    """Area under the precision-recall curve over all distinct score thresholds.

    Step integration sum_i (R_i - R_{i-1}) * P_i with thresholds descending,
    i.e. exactly the value obtained by enumerating every distinct score as a
    decision threshold (predict positive at score >= threshold).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    gt = np.asarray(gt).ravel().astype(bool)
    if scores.shape != gt.shape:
        raise ValueError(f"shape mismatch: {scores.shape} vs {gt.shape}")
    n_pos = int(gt.sum())
    if n_pos == 0:
        raise ValueError("ground truth has no positive voxels")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    tp = np.cumsum(gt[order].astype(np.float64))
    n_pred = np.arange(1, len(scores) + 1, dtype=np.float64)
    # keep only the last index of each run of equal scores = one PR point
    # per distinct threshold
    last = np.nonzero(np.diff(sorted_scores))[0]
    idx = np.concatenate([last, [len(scores) - 1]])
    precision = tp[idx] / n_pred[idx]
    recall = tp[idx] / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def l1_healthy(x0: np.ndarray, x_rec: np.ndarray, brain_mask: np.ndarray) -> float:
    """Mean absolute reconstruction error over brain-mask voxels."""
    x0 = np.asarray(x0, dtype=np.float64)
    x_rec = np.asarray(x_rec, dtype=np.float64)
    mask = np.asarray(brain_mask).astype(bool)
    if x0.shape != x_rec.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {x_rec.shape}")
    if x0.shape[-mask.ndim :] != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not align with {x0.shape}")
    if not mask.any():
        raise ValueError("brain mask is empty")
    return float(np.abs(x0 - x_rec)[..., mask].mean())


def permutation_test(a: ScoreVector, b: ScoreVector, n_perm: int = 10_000, seed: int = 0) -> float:
    """One-sided permutation p-value for mean(a) - mean(b).

    Pooled values are reshuffled n_perm times; p is the fraction of rounds
    whose mean difference is >= the observed one (no smoothing).
    """
    if n_perm < 1:
        raise ValueError(f"n_perm must be >= 1, got {n_perm}")
    va, vb = a.values, b.values
    if len(va) == 0 or len(vb) == 0:
        raise ValueError("score vectors must be nonempty")
    observed = va.mean() - vb.mean()
    pooled = np.concatenate([va, vb])
    na = len(va)
    rng = np.random.default_rng(seed)
    count = 0
    for _ in range(n_perm):
        perm = rng.permutation(pooled)
        stat = perm[:na].mean() - perm[na:].mean()
        if stat >= observed:
            count += 1
    return count / n_perm
