"""Training loop, sliding-patch inference, anomaly scoring, and post-processing.

Randomness is split into independent named streams (batch, timestep, patch,
noise, init) derived from the run seed, so configurations that skip a stream
(e.g. full-image mode never draws patch indices) still consume the remaining
streams identically.  This is what makes the one-patch degenerate grid
bit-identical to the plain unpatched code path.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .data import VolumeTensor
from .denoiser import (
    DenoiserConfig,
    DenoiserModel,
    loss_patch,
    loss_rec,
    make_model,
)
from .noise import NoiseConfig, sample_noise
from .patching import PatchGrid, apply_patch_noise, build_grid, make_mask, mask_from_corner, sample_corner, stitch
from .schedules import NoiseSchedule, make_linear_schedule

log = logging.getLogger(__name__)

PATCH_MODES = ("random", "fixed", "full_image")
LOSS_MODES = ("rec", "patch")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 32
    max_epochs: int = 1600
    steps_per_epoch: int = 100
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    t_test: int = 500
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    patch_mode: str = "fixed"
    loss_mode: str = "patch"
    patch_size: tuple[int, int] = (48, 48)
    seed: int = 0

    def __post_init__(self):
        if self.patch_mode not in PATCH_MODES:
            raise ValueError(f"patch_mode must be one of {PATCH_MODES}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if not 1 <= self.t_test <= self.T:
            raise ValueError(f"t_test must lie in [1, {self.T}], got {self.t_test}")
        if self.patch_mode == "full_image":
            self.loss_mode = "rec"  # no patch region to restrict the loss to
        self.patch_size = (int(self.patch_size[0]), int(self.patch_size[1]))

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class AnomalyMap:
    """Nonnegative voxel scores (D, H, W) plus the brain mask they live in."""

    values: np.ndarray
    brain_mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.brain_mask = np.asarray(self.brain_mask).astype(bool)
        if self.values.ndim != 3 or self.values.shape != self.brain_mask.shape:
            raise ValueError(
                f"values {self.values.shape} and mask {self.brain_mask.shape} "
                "must be matching 3D arrays"
            )
        if np.any(self.values < 0.0):
            raise ValueError("anomaly scores must be nonnegative")


class SliceDataset:
    """Stack of (C, H, W) slices pooled from a set of volumes."""

    def __init__(self, volumes: list[VolumeTensor]):
        if not volumes:
            raise ValueError("need at least one volume")
        slices = [v.slices() for v in volumes]
        self.slices = np.concatenate(slices, axis=0).astype(np.float32)

    def __len__(self) -> int:
        return len(self.slices)

    @property
    def slice_shape(self) -> tuple[int, int, int]:
        return self.slices.shape[1:]


def _noise_batch(shape, count, noise_cfg: NoiseConfig, root, start: int) -> np.ndarray:
    fields = [
        sample_noise(shape, noise_cfg, seed=(*root, start + i)) for i in range(count)
    ]
    return np.stack(fields).astype(np.float32)


def _batch_masks(cfg: TrainConfig, grid, shape, patch_rng) -> np.ndarray | None:
    """Per-item binary masks, or None in full-image mode."""
    if cfg.patch_mode == "full_image":
        return None
    C, H, W = shape
    h, w = cfg.patch_size
    out = []
    for _ in range(cfg.batch_size):
        if cfg.patch_mode == "fixed":
            k = int(patch_rng.integers(0, grid.K))
            out.append(make_mask(grid, k, C))
        else:
            corner = sample_corner(H, W, h, w, patch_rng)
            out.append(mask_from_corner((H, W), (h, w), corner, C))
    return np.stack(out)


def _training_step(model, optimizer, x0_t, t_batch, eps_t, masks_t, cfg, schedule):
    coeff_sig = torch.from_numpy(
        np.sqrt(schedule.alpha_bars[t_batch]).astype(np.float32)
    )[:, None, None, None]
    coeff_noise = torch.from_numpy(
        np.sqrt(1.0 - schedule.alpha_bars[t_batch]).astype(np.float32)
    )[:, None, None, None]
    x_t = coeff_sig * x0_t + coeff_noise * eps_t
    if masks_t is None:
        x_tilde = x_t
    else:
        x_tilde = apply_patch_noise(x0_t, x_t, masks_t)
    pred = model(x_tilde, torch.from_numpy(t_batch))
    if cfg.loss_mode == "patch":
        loss = loss_patch(x0_t, pred, masks_t)
    else:
        loss = loss_rec(x0_t, pred)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def _validation_loss(model, val_slices: np.ndarray, cfg: TrainConfig, grid, schedule) -> float:
    """Deterministic held-out loss: fixed seed per call, so epochs are comparable."""
    rng = np.random.default_rng((cfg.seed, 0x7A1))
    n = len(val_slices)
    C, H, W = val_slices.shape[1:]
    t_all = rng.integers(1, cfg.T + 1, size=n)
    losses = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, n, cfg.batch_size):
            x0 = val_slices[start : start + cfg.batch_size]
            t_batch = t_all[start : start + len(x0)]
            eps = np.stack(
                [
                    sample_noise((C, H, W), cfg.noise, seed=(cfg.seed, 0xE9, start + i))
                    for i in range(len(x0))
                ]
            ).astype(np.float32)
            if cfg.patch_mode == "full_image":
                masks = None
            elif cfg.patch_mode == "fixed":
                masks = np.stack(
                    [make_mask(grid, (start + i) % grid.K, C) for i in range(len(x0))]
                )
            else:
                h, w = cfg.patch_size
                masks = np.stack(
                    [
                        mask_from_corner((H, W), (h, w), sample_corner(H, W, h, w, rng), C)
                        for _ in range(len(x0))
                    ]
                )
            x0_t = torch.from_numpy(x0)
            coeff_sig = torch.from_numpy(
                np.sqrt(schedule.alpha_bars[t_batch]).astype(np.float32)
            )[:, None, None, None]
            coeff_noise = torch.from_numpy(
                np.sqrt(1.0 - schedule.alpha_bars[t_batch]).astype(np.float32)
            )[:, None, None, None]
            x_t = coeff_sig * x0_t + coeff_noise * torch.from_numpy(eps)
            x_tilde = x_t if masks is None else apply_patch_noise(x0_t, x_t, torch.from_numpy(masks))
            pred = model(x_tilde, torch.from_numpy(t_batch))
            if cfg.loss_mode == "patch":
                losses.append(float(loss_patch(x0_t, pred, torch.from_numpy(masks))) * len(x0))
            else:
                losses.append(float(loss_rec(x0_t, pred)) * len(x0))
    model.train(was_training)
    return sum(losses) / n


def train(
    dataset: SliceDataset,
    cfg: TrainConfig,
    denoiser_cfg: DenoiserConfig,
    val_dataset: SliceDataset | None = None,
    resume_state: dict | None = None,
    model: DenoiserModel | None = None,
) -> tuple[DenoiserModel, dict]:
    """Optimize the denoiser on healthy slices; returns (model, history).

    With a validation set the returned model carries the parameters of the
    epoch with the lowest healthy-validation loss; otherwise the final ones.
    ``resume_state`` (from a checkpoint's trainer state) continues a run with
    an identical loss trajectory.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    C, H, W = dataset.slice_shape
    schedule = cfg.schedule()
    grid = None
    if cfg.patch_mode == "fixed":
        grid = build_grid(H, W, *cfg.patch_size)

    ss = np.random.SeedSequence(cfg.seed)
    batch_seed, t_seed, patch_seed, init_seed = ss.spawn(4)
    batch_rng = np.random.Generator(np.random.PCG64(batch_seed))
    t_rng = np.random.Generator(np.random.PCG64(t_seed))
    patch_rng = np.random.Generator(np.random.PCG64(patch_seed))
    noise_root = (cfg.seed, 0x501)

    if model is None:
        model = make_model(denoiser_cfg, seed=init_seed.generate_state(1)[0])
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    history: dict = {"train_loss": [], "val_loss": [], "best_epoch": None}
    start_epoch = 0
    draw_counter = 0
    best = {"loss": np.inf, "state": None, "epoch": None}

    if resume_state is not None:
        optimizer.load_state_dict(resume_state["optimizer"])
        batch_rng.bit_generator.state = resume_state["batch_rng"]
        t_rng.bit_generator.state = resume_state["t_rng"]
        patch_rng.bit_generator.state = resume_state["patch_rng"]
        draw_counter = resume_state["draw_counter"]
        start_epoch = resume_state["epoch"]
        history = resume_state["history"]
        best = resume_state["best"]

    model.train()
    for epoch in range(start_epoch, cfg.max_epochs):
        for _ in range(cfg.steps_per_epoch):
            idx = batch_rng.integers(0, len(dataset), size=cfg.batch_size)
            x0 = dataset.slices[idx]
            t_batch = t_rng.integers(1, cfg.T + 1, size=cfg.batch_size)
            eps = _noise_batch((C, H, W), cfg.batch_size, cfg.noise, noise_root, draw_counter)
            draw_counter += cfg.batch_size
            masks = _batch_masks(cfg, grid, (C, H, W), patch_rng)
            loss = _training_step(
                model,
                optimizer,
                torch.from_numpy(x0),
                t_batch,
                torch.from_numpy(eps),
                None if masks is None else torch.from_numpy(masks),
                cfg,
                schedule,
            )
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"training diverged: non-finite loss {loss} at epoch {epoch}, "
                    f"step {model.training_step_count}"
                )
            model.training_step_count += 1
            history["train_loss"].append(loss)
        if val_dataset is not None and len(val_dataset) > 0:
            vloss = _validation_loss(model, val_dataset.slices, cfg, grid, schedule)
            history["val_loss"].append(vloss)
            if vloss < best["loss"]:
                best = {
                    "loss": vloss,
                    "state": copy.deepcopy(model.state_dict()),
                    "epoch": epoch,
                }
    if best["state"] is not None:
        model.load_state_dict(best["state"])
        history["best_epoch"] = best["epoch"]
    history["trainer_state"] = {
        "optimizer": optimizer.state_dict(),
        "batch_rng": batch_rng.bit_generator.state,
        "t_rng": t_rng.bit_generator.state,
        "patch_rng": patch_rng.bit_generator.state,
        "draw_counter": draw_counter,
        "epoch": cfg.max_epochs,
        "history": {k: v for k, v in history.items() if k != "trainer_state"},
        "best": best,
    }
    return model, history


def reconstruct_slice(
    model,
    x0: np.ndarray,
    grid: PatchGrid | None,
    t_test: int,
    schedule: NoiseSchedule,
    noise_cfg: NoiseConfig,
    seed=0,
) -> np.ndarray:
    """Estimate the clean slice by noising and denoising each grid patch.

    With ``grid=None`` the whole slice is noised and denoised in one pass
    (the unpatched baseline).  Fresh noise is drawn per patch position.
    """
    x0 = np.asarray(x0, dtype=np.float32)
    if x0.ndim != 3:
        raise ValueError(f"x0 must be (C, H, W), got {x0.shape}")
    C, H, W = x0.shape
    if not 0 <= t_test <= schedule.T:
        raise ValueError(f"t_test must lie in [0, {schedule.T}], got {t_test}")
    seed_t = seed if isinstance(seed, tuple) else (int(seed),)

    def noised(k: int) -> np.ndarray:
        eps = sample_noise((C, H, W), noise_cfg, seed=(*seed_t, k)).astype(np.float32)
        if t_test == 0:
            return x0
        sig = float(np.sqrt(schedule.alpha_bars[t_test]))
        noi = float(np.sqrt(1.0 - schedule.alpha_bars[t_test]))
        return sig * x0 + noi * eps

    model_eval = _as_eval_callable(model)
    if grid is None:
        batch = torch.from_numpy(noised(0)[None])
        out = model_eval(batch, t_test)
        return np.asarray(out[0], dtype=np.float32)

    if grid.image_size != (H, W):
        raise ValueError(f"grid is for image {grid.image_size}, slice is {(H, W)}")
    tiles = []
    for k in range(grid.K):
        mask = make_mask(grid, k, C)
        x_tilde = apply_patch_noise(x0, noised(k), mask)
        tiles.append(x_tilde)
    batch = torch.from_numpy(np.stack(tiles))
    out = np.asarray(model_eval(batch, t_test), dtype=np.float32)
    h, w = grid.patch_size
    patch_outputs = []
    for k, (r, c) in enumerate(grid.positions):
        patch_outputs.append((out[k][:, r : r + h, c : c + w], (r, c)))
    return stitch(patch_outputs, grid)


def _as_eval_callable(model):
    """Uniform (batch, t) -> batch interface for models and test stubs."""
    if isinstance(model, DenoiserModel):

        def call(batch: torch.Tensor, t: int):
            was_training = model.training
            model.eval()
            try:
                with torch.no_grad():
                    return model(batch, int(t)).numpy()
            finally:
                model.train(was_training)

        return call
    return model


def reconstruct_volume(
    model,
    volume: VolumeTensor,
    grid: PatchGrid | None,
    t_test: int,
    schedule: NoiseSchedule,
    noise_cfg: NoiseConfig,
    seed=0,
) -> VolumeTensor:
    """Reconstruct every slice independently and reassemble in order."""
    seed_t = seed if isinstance(seed, tuple) else (int(seed),)
    rec_slices = []
    for d in range(volume.values.shape[1]):
        try:
            rec = reconstruct_slice(
                model,
                volume.values[:, d],
                grid,
                t_test,
                schedule,
                noise_cfg,
                seed=(*seed_t, d),
            )
        except Exception as e:
            raise RuntimeError(f"slice {d} of {volume.subject_id!r}: {e}") from e
        rec_slices.append(rec)
    rec = np.stack(rec_slices, axis=1)
    return VolumeTensor(
        values=rec,
        brain_mask=volume.brain_mask,
        spacing=volume.spacing,
        subject_id=volume.subject_id,
    )


def anomaly_map(x0: VolumeTensor, x_rec: VolumeTensor) -> AnomalyMap:
    """Voxel-wise absolute reconstruction error, channel-averaged."""
    if x0.values.shape != x_rec.values.shape:
        raise ValueError(
            f"shape mismatch: {x0.values.shape} vs {x_rec.values.shape}"
        )
    values = np.abs(
        x0.values.astype(np.float64) - x_rec.values.astype(np.float64)
    ).mean(axis=0)
    return AnomalyMap(values=values, brain_mask=x0.brain_mask)


def postprocess(
    amap: AnomalyMap, median_kernel: int = 5, erosion_iters: int = 3
) -> AnomalyMap:
    """Median-smooth the scores, erode the brain mask, zero scores outside it."""
    if median_kernel < 1 or median_kernel % 2 == 0:
        raise ValueError(f"median kernel must be odd and >= 1, got {median_kernel}")
    if erosion_iters < 0:
        raise ValueError("erosion_iters must be >= 0")
    values = amap.values
    if median_kernel > 1:
        values = ndimage.median_filter(values, size=median_kernel, mode="reflect")
    mask = amap.brain_mask
    if erosion_iters > 0:
        mask = ndimage.binary_erosion(
            mask, structure=np.ones((3, 3, 3), dtype=bool), iterations=erosion_iters
        )
    values = np.where(mask, values, 0.0)
    return AnomalyMap(values=values, brain_mask=mask)


def binarize_and_prune(
    amap: AnomalyMap, threshold: float, min_component: int = 7
) -> np.ndarray:
    """Threshold the scores and drop 26-connected components below the size floor."""
    if not np.isfinite(threshold):
        raise ValueError(f"threshold must be finite, got {threshold}")
    if min_component < 0:
        raise ValueError("min_component must be >= 0")
    binary = (amap.values > threshold) & amap.brain_mask
    if min_component <= 1 or not binary.any():
        return binary
    labels, n = ndimage.label(binary, structure=np.ones((3, 3, 3), dtype=bool))
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_component
    keep[0] = False
    return keep[labels]


def greedy_threshold_search(
    maps: list[AnomalyMap],
    gts: list[np.ndarray],
    n_candidates: int = 100,
    min_component: int = 7,
) -> tuple[float, float]:
    """Pick the threshold maximizing mean Dice over the validation maps.

    Candidates are evenly spaced quantiles of the pooled in-mask scores; the
    full binarize-and-prune chain runs inside the loop.  Ties go to the
    larger threshold.
    """
    if not maps or len(maps) != len(gts):
        raise ValueError("need equally many maps and ground-truth volumes")
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    from .metrics import dice

    pooled = np.concatenate([m.values[m.brain_mask] for m in maps])
    if pooled.size == 0:
        raise ValueError("no in-mask voxels to search over")
    if not any(np.asarray(g).astype(bool).any() for g in gts):
        log.warning("greedy threshold search: all ground truths empty; Dice degenerate")
        return float(pooled.max()), 0.0
    candidates = np.quantile(pooled, np.linspace(0.0, 1.0, n_candidates))
    best_thr, best_dice = float(candidates[0]), -1.0
    for thr in candidates:
        scores = [
            dice(binarize_and_prune(m, float(thr), min_component), g)
            for m, g in zip(maps, gts)
        ]
        mean_dice = float(np.mean(scores))
        if mean_dice >= best_dice:  # ascending scan: ties keep larger threshold
            best_dice = mean_dice
            best_thr = float(thr)
    return best_thr, best_dice


def baseline_thresh(x0: VolumeTensor) -> AnomalyMap:
    """Hyperintensity baseline: the anomaly score is the voxel intensity itself."""
    values = x0.values.astype(np.float64).mean(axis=0)
    values = np.where(x0.brain_mask, values, 0.0)
    return AnomalyMap(values=values, brain_mask=x0.brain_mask)
