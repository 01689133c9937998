"""Independent brute-force oracles used to pin expected values in tests.

Everything here is deliberately written the slow, obvious way (explicit
loops, exhaustive enumeration) and never shares code with the package paths
it checks.
"""

from __future__ import annotations

import itertools

import numpy as np


def dice_by_counting(pred, gt) -> float:
    """Count intersection and sizes with an explicit loop."""
    p = np.asarray(pred).astype(bool).ravel()
    g = np.asarray(gt).astype(bool).ravel()
    inter = size_p = size_g = 0
    for a, b in zip(p.tolist(), g.tolist()):
        inter += a and b
        size_p += a
        size_g += b
    if size_p + size_g == 0:
        return 1.0
    return 2.0 * inter / (size_p + size_g)


def auprc_by_enumeration(scores, gt) -> float:
    """PR curve via explicit enumeration of every distinct threshold."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    gt = np.asarray(gt).astype(bool).ravel()
    n_pos = int(gt.sum())
    assert n_pos > 0
    points = []  # (recall, precision), thresholds from high to low
    for thr in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= thr
        tp = int((pred & gt).sum())
        precision = tp / int(pred.sum())
        recall = tp / n_pos
        points.append((recall, precision))
    area = 0.0
    prev_recall = 0.0
    for recall, precision in points:
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def masked_mean_abs(x0, rec, mask) -> float:
    """Per-voxel loop over the masked region."""
    x0 = np.asarray(x0, dtype=np.float64)
    rec = np.asarray(rec, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    total, count = 0.0, 0
    for idx in np.ndindex(*mask.shape):
        if mask[idx]:
            if x0.ndim == mask.ndim:
                total += abs(x0[idx] - rec[idx])
                count += 1
            else:
                for c in range(x0.shape[0]):
                    total += abs(x0[(c, *idx)] - rec[(c, *idx)])
                    count += 1
    return total / count


def permutation_test_exact(a, b) -> float:
    """Exact one-sided p over all label assignments of the pooled values."""
    a = list(map(float, a))
    b = list(map(float, b))
    observed = np.mean(a) - np.mean(b)
    pooled = a + b
    n = len(a)
    count = total = 0
    for combo in itertools.combinations(range(len(pooled)), n):
        grp_a = [pooled[i] for i in combo]
        grp_b = [pooled[i] for i in range(len(pooled)) if i not in combo]
        stat = np.mean(grp_a) - np.mean(grp_b)
        total += 1
        if stat >= observed - 1e-12:
            count += 1
    return count / total


def median_filter_by_windows(vol, k: int) -> np.ndarray:
    """3D median with reflect padding, explicit window loop."""
    vol = np.asarray(vol, dtype=np.float64)
    r = k // 2
    padded = np.pad(vol, r, mode="reflect")
    out = np.empty_like(vol)
    for z in range(vol.shape[0]):
        for y in range(vol.shape[1]):
            for x in range(vol.shape[2]):
                window = padded[z : z + k, y : y + k, x : x + k]
                out[z, y, x] = np.median(window)
    return out


def erosion_by_neighborhood(mask, iterations: int = 1) -> np.ndarray:
    """Binary erosion with a full 3x3x3 neighborhood, zero outside the volume."""
    mask = np.asarray(mask).astype(bool)
    for _ in range(iterations):
        padded = np.pad(mask, 1, mode="constant", constant_values=False)
        out = np.zeros_like(mask)
        for z in range(mask.shape[0]):
            for y in range(mask.shape[1]):
                for x in range(mask.shape[2]):
                    out[z, y, x] = padded[z : z + 3, y : y + 3, x : x + 3].all()
        mask = out
    return mask


def components_by_flood_fill(binary) -> list[set]:
    """26-connected components via explicit flood fill."""
    binary = np.asarray(binary).astype(bool)
    visited = np.zeros_like(binary)
    comps = []
    offsets = [
        (dz, dy, dx)
        for dz in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dx in (-1, 0, 1)
        if (dz, dy, dx) != (0, 0, 0)
    ]
    D, H, W = binary.shape
    for start in np.argwhere(binary):
        start = tuple(start)
        if visited[start]:
            continue
        stack = [start]
        visited[start] = True
        comp = set()
        while stack:
            v = stack.pop()
            comp.add(v)
            for dz, dy, dx in offsets:
                n = (v[0] + dz, v[1] + dy, v[2] + dx)
                if (
                    0 <= n[0] < D
                    and 0 <= n[1] < H
                    and 0 <= n[2] < W
                    and binary[n]
                    and not visited[n]
                ):
                    visited[n] = True
                    stack.append(n)
        comps.append(comp)
    return comps


def lowfreq_power_fraction(field, decile: float = 0.1) -> float:
    """Fraction of spectral power in the lowest ``decile`` of radial frequencies."""
    field = np.asarray(field, dtype=np.float64)
    power = np.abs(np.fft.fftshift(np.fft.fft2(field))) ** 2
    H, W = field.shape
    yy, xx = np.mgrid[0:H, 0:W]
    r = np.hypot(yy - H // 2, xx - W // 2)
    low = r <= decile * r.max()
    return float(power[low].sum() / power.sum())


def highfreq_power(field, cutoff: float = 0.5) -> float:
    """Absolute spectral power above ``cutoff`` of the maximum radial frequency."""
    field = np.asarray(field, dtype=np.float64)
    power = np.abs(np.fft.fftshift(np.fft.fft2(field))) ** 2
    H, W = field.shape
    yy, xx = np.mgrid[0:H, 0:W]
    r = np.hypot(yy - H // 2, xx - W // 2)
    return float(power[r > cutoff * r.max()].sum())
