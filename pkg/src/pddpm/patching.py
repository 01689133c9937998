"""Patch grids, binary masks, partial noising, and overlap-averaged stitching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PatchGrid:
    """Evenly spaced patch positions covering the whole image.

    Per axis there are ceil((L - l) / l) + 1 offsets spread over [0, L - l]
    with both endpoints included; positions are their Cartesian product, so
    every pixel is covered and interior patches may overlap.
    """

    image_size: tuple[int, int]
    patch_size: tuple[int, int]
    positions: tuple[tuple[int, int], ...]

    @property
    def K(self) -> int:
        return len(self.positions)


def _axis_offsets(L: int, l: int) -> list[int]:
    span = L - l
    if span == 0:
        return [0]
    n = int(np.ceil(span / l)) + 1
    offsets = np.rint(np.linspace(0.0, span, n)).astype(int)
    return list(dict.fromkeys(offsets.tolist()))  # dedupe, keep order


def build_grid(H: int, W: int, h: int, w: int) -> PatchGrid:
    """Boundary-anchored grid of (row, col) patch corners covering (H, W)."""
    if not (1 <= h <= H and 1 <= w <= W):
        raise ValueError(f"patch ({h}, {w}) must fit inside image ({H}, {W})")
    rows = _axis_offsets(H, h)
    cols = _axis_offsets(W, w)
    positions = tuple((r, c) for r in rows for c in cols)
    return PatchGrid(image_size=(H, W), patch_size=(h, w), positions=positions)


def make_mask(grid: PatchGrid, k: int, C: int = 1) -> np.ndarray:
    """Binary (C, H, W) mask that is one exactly on patch k."""
    if not 0 <= k < grid.K:
        raise ValueError(f"patch index {k} out of range [0, {grid.K})")
    H, W = grid.image_size
    h, w = grid.patch_size
    r, c = grid.positions[k]
    mask = np.zeros((C, H, W), dtype=np.float32)
    mask[:, r : r + h, c : c + w] = 1.0
    return mask


def mask_from_corner(image_size, patch_size, corner, C: int = 1) -> np.ndarray:
    """Binary mask for an arbitrary in-bounds top-left corner."""
    H, W = image_size
    h, w = patch_size
    r, c = corner
    if not (0 <= r <= H - h and 0 <= c <= W - w):
        raise ValueError(f"corner {corner} puts patch ({h}, {w}) outside ({H}, {W})")
    mask = np.zeros((C, H, W), dtype=np.float32)
    mask[:, r : r + h, c : c + w] = 1.0
    return mask


def sample_corner(H: int, W: int, h: int, w: int, rng: np.random.Generator) -> tuple[int, int]:
    """Uniform random top-left corner keeping the patch fully inside."""
    return int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))


def apply_patch_noise(x0, x_t, mask):
    """Compose the partly noised image: x_t inside the mask, x0 outside.

    Elementwise select keeps the all-ones / all-zeros cases bit-exact.
    Accepts numpy arrays or torch tensors (all three of the same kind).
    """
    if tuple(x0.shape) != tuple(x_t.shape) or tuple(x0.shape) != tuple(mask.shape):
        raise ValueError(
            f"shape mismatch: x0 {tuple(x0.shape)}, x_t {tuple(x_t.shape)}, "
            f"mask {tuple(mask.shape)}"
        )
    if isinstance(x0, np.ndarray):
        return np.where(mask > 0.5, x_t, x0)
    import torch

    return torch.where(mask > 0.5, x_t, x0)


def stitch(patch_outputs, grid: PatchGrid) -> np.ndarray:
    """Average per-patch outputs back into a full (C, H, W) image.

    ``patch_outputs`` holds one (values, (row, col)) pair per grid position;
    overlapping pixels get the unweighted mean of their contributors.
    """
    if len(patch_outputs) != grid.K:
        raise ValueError(f"expected {grid.K} patch outputs, got {len(patch_outputs)}")
    H, W = grid.image_size
    h, w = grid.patch_size
    seen = {pos: False for pos in grid.positions}
    first = np.asarray(patch_outputs[0][0])
    C = first.shape[0]
    acc = np.zeros((C, H, W), dtype=np.float64)
    count = np.zeros((H, W), dtype=np.int64)
    for values, pos in patch_outputs:
        values = np.asarray(values)
        pos = (int(pos[0]), int(pos[1]))
        if pos not in seen:
            raise ValueError(f"position {pos} is not on the grid")
        if seen[pos]:
            raise ValueError(f"duplicate patch output for position {pos}")
        seen[pos] = True
        if values.shape != (C, h, w):
            raise ValueError(f"patch at {pos} has shape {values.shape}, want {(C, h, w)}")
        r, c = pos
        acc[:, r : r + h, c : c + w] += values
        count[r : r + h, c : c + w] += 1
    if np.any(count == 0):
        raise ValueError("grid does not cover the image")  # unreachable for build_grid
    return (acc / count).astype(first.dtype)
