"""Time-conditioned Unet that predicts the clean slice from a partly noised one.

Architecture: per resolution level a stack of residual blocks (GroupNorm,
SiLU, 3x3 convolutions) with the time embedding injected through scale-shift
normalization; strided convolutions downsample between levels, transposed
convolutions mirror them on the way up, and skip connections join equal
resolutions.  The final projection is zero-initialized so an untrained model
predicts all zeros.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class DenoiserConfig:
    channel_dims: tuple[int, ...] = (32, 32, 64)
    residual_blocks_per_level: int = 3
    time_embed_dim: int = 128
    input_channels: int = 1
    groupnorm_groups: int = 8

    def __post_init__(self):
        dims = tuple(int(c) for c in self.channel_dims)
        if len(dims) < 1 or any(c < 1 for c in dims):
            raise ValueError(f"channel_dims must be positive, got {self.channel_dims}")
        object.__setattr__(self, "channel_dims", dims)
        if self.residual_blocks_per_level < 1:
            raise ValueError("residual_blocks_per_level must be >= 1")
        if self.time_embed_dim % 2 != 0 or self.time_embed_dim < 2:
            raise ValueError(f"time_embed_dim must be even, got {self.time_embed_dim}")
        if self.input_channels < 1 or self.groupnorm_groups < 1:
            raise ValueError("input_channels and groupnorm_groups must be >= 1")

    @property
    def levels(self) -> int:
        return len(self.channel_dims)

    @property
    def spatial_divisor(self) -> int:
        return 2 ** (self.levels - 1)


def time_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal embedding: pairs sin(t/w_i), cos(t/w_i), w_i geometric in [1, 1e4].

    ``t`` may be a nonnegative int or a 1D tensor of timesteps; returns shape
    (dim,) or (len(t), dim).
    """
    if dim % 2 != 0 or dim < 2:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    scalar = not torch.is_tensor(t)
    tt = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    if bool((tt < 0).any()):
        raise ValueError("timesteps must be nonnegative")
    half = dim // 2
    if half == 1:
        omega = torch.ones(1, dtype=torch.float64)
    else:
        omega = torch.pow(10000.0, torch.arange(half, dtype=torch.float64) / (half - 1))
    ang = tt[:, None] / omega[None, :]
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1).to(torch.float32)
    return emb[0] if scalar else emb


def _norm(groups: int, channels: int) -> nn.GroupNorm:
    g = min(groups, channels)
    while channels % g != 0:  # keep groups dividing channels
        g -= 1
    return nn.GroupNorm(g, channels)


class ResidualBlock(nn.Module):
    """Two-conv residual block with scale-shift time conditioning."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = _norm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, 2 * out_ch)
        self.norm2 = _norm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.time_proj(F.silu(temb)).chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class DenoiserModel(nn.Module):
    """Unet mapping (x_tilde, t) to a direct estimate of the clean slice."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        self.training_step_count = 0
        dims = config.channel_dims
        nb = config.residual_blocks_per_level
        tdim = config.time_embed_dim
        g = config.groupnorm_groups

        self.time_mlp = nn.Sequential(
            nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim)
        )
        self.input_conv = nn.Conv2d(config.input_channels, dims[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i, c in enumerate(dims):
            cin = dims[i - 1] if i > 0 else dims[0]
            self.down_blocks.append(
                nn.ModuleList(
                    [ResidualBlock(cin if j == 0 else c, c, tdim, g) for j in range(nb)]
                )
            )
            if i < len(dims) - 1:
                self.downsamples.append(nn.Conv2d(c, c, 3, stride=2, padding=1))

        self.upsamples = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for i in range(len(dims) - 2, -1, -1):
            self.upsamples.append(nn.ConvTranspose2d(dims[i + 1], dims[i], 4, stride=2, padding=1))
            self.up_blocks.append(
                nn.ModuleList(
                    [
                        ResidualBlock(2 * dims[i] if j == 0 else dims[i], dims[i], tdim, g)
                        for j in range(nb)
                    ]
                )
            )

        self.out_norm = _norm(g, dims[0])
        self.out_conv = nn.Conv2d(dims[0], config.input_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        B = x.shape[0]
        if torch.is_tensor(t):
            tb = t.reshape(-1)
            if tb.numel() == 1:
                tb = tb.expand(B)
        else:
            tb = torch.full((B,), int(t))
        temb = self.time_mlp(time_embedding(tb, self.config.time_embed_dim).to(x.dtype))

        h = self.input_conv(x)
        skips = []
        for i, level in enumerate(self.down_blocks):
            for block in level:
                h = block(h, temb)
            if i < len(self.downsamples):
                skips.append(h)
                h = self.downsamples[i](h)
        for i, level in enumerate(self.up_blocks):
            h = self.upsamples[i](h)
            h = torch.cat([h, skips[-1 - i]], dim=1)
            for block in level:
                h = block(h, temb)
        return self.out_conv(F.silu(self.out_norm(h)))


def make_model(config: DenoiserConfig, seed: int = 0) -> DenoiserModel:
    """Build a model with fan-in initialized weights, deterministic per seed."""
    gen = torch.Generator().manual_seed(int(seed))
    state = torch.random.get_rng_state()
    try:
        torch.random.set_rng_state(gen.get_state())
        model = DenoiserModel(config)
    finally:
        torch.random.set_rng_state(state)
    return model


def denoise(model: DenoiserModel, x_tilde, t: int) -> np.ndarray:
    """Evaluation-mode forward pass on one (C, H, W) slice or (B, C, H, W) batch."""
    arr = np.asarray(x_tilde, dtype=np.float32)
    batched = arr.ndim == 4
    if not batched:
        if arr.ndim != 3:
            raise ValueError(f"expected (C, H, W) or (B, C, H, W), got {arr.shape}")
        arr = arr[None]
    C, H, W = arr.shape[1:]
    if C != model.config.input_channels:
        raise ValueError(f"expected {model.config.input_channels} channels, got {C}")
    d = model.config.spatial_divisor
    if H % d != 0 or W % d != 0:
        raise ValueError(f"spatial dims {(H, W)} must be divisible by {d}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(torch.from_numpy(arr), int(t)).numpy()
    finally:
        model.train(was_training)
    return out if batched else out[0]


def loss_rec(x0: torch.Tensor, x0_rec: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over all elements."""
    if tuple(x0.shape) != tuple(x0_rec.shape):
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x0_rec.shape)}")
    return (x0 - x0_rec).abs().mean()


def loss_patch(x0: torch.Tensor, x0_rec: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over masked elements only."""
    if tuple(x0.shape) != tuple(x0_rec.shape) or tuple(x0.shape) != tuple(mask.shape):
        raise ValueError(
            f"shape mismatch: x0 {tuple(x0.shape)}, rec {tuple(x0_rec.shape)}, "
            f"mask {tuple(mask.shape)}"
        )
    total = mask.sum()
    if float(total) == 0.0:
        raise ValueError("mask selects no elements")
    return ((x0 - x0_rec).abs() * mask).sum() / total


def save_checkpoint(model: DenoiserModel, path, trainer_state: dict | None = None) -> None:
    payload = {
        "config": asdict(model.config),
        "state_dict": model.state_dict(),
        "training_step_count": model.training_step_count,
    }
    if trainer_state is not None:
        payload["trainer_state"] = trainer_state
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[DenoiserModel, dict | None]:
    payload = torch.load(path, weights_only=False)
    cfg_dict = dict(payload["config"])
    cfg_dict["channel_dims"] = tuple(cfg_dict["channel_dims"])
    model = DenoiserModel(DenoiserConfig(**cfg_dict))
    model.load_state_dict(payload["state_dict"])
    model.training_step_count = int(payload["training_step_count"])
    return model, payload.get("trainer_state")
