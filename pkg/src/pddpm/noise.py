"""Gaussian and multi-octave simplex noise fields.

Simplex fields are built by summing octaves o = 0..octaves-1 of 2D simplex
noise at frequency ``base_frequency * 2**o`` (cycles per image width) with
amplitude ``persistence**o``, then standardizing each 2D field to zero mean
and unit variance so the fields are drop-in replacements for Gaussian noise
in the forward diffusion step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_F2 = 0.5 * (np.sqrt(3.0) - 1.0)
_G2 = (3.0 - np.sqrt(3.0)) / 6.0
# eight lattice gradient directions; contribution kernel (0.5 - r^2)^4 scaled
# by 70 keeps single-octave values roughly inside [-1, 1]
_GRAD2 = np.array(
    [(1, 1), (-1, 1), (1, -1), (-1, -1), (1, 0), (-1, 0), (0, 1), (0, -1)],
    dtype=np.float64,
)


@dataclass(frozen=True)
class NoiseConfig:
    kind: str = "simplex"
    octaves: int = 6
    persistence: float = 0.8
    base_frequency: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "simplex"):
            raise ValueError(f"kind must be 'gaussian' or 'simplex', got {self.kind!r}")
        if self.octaves < 1:
            raise ValueError(f"octaves must be >= 1, got {self.octaves}")
        if not (0.0 < self.persistence <= 1.0):
            raise ValueError(f"persistence must lie in (0, 1], got {self.persistence}")
        if self.base_frequency < 1.0:
            raise ValueError(f"base_frequency must be >= 1, got {self.base_frequency}")


def sample_gaussian(shape, seed) -> np.ndarray:
    """I.i.d. standard-normal field, deterministic per seed."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ValueError(f"shape must be nonempty with positive dims, got {shape}")
    rng = np.random.default_rng(seed)
    return rng.standard_normal(shape)


def sample_noise(shape, config: NoiseConfig, seed=None) -> np.ndarray:
    """Dispatch on config.kind; ``seed`` overrides config.seed when given."""
    seed = config.seed if seed is None else seed
    if config.kind == "gaussian":
        return sample_gaussian(shape, seed)
    return sample_simplex(shape, config, seed=seed)


def sample_simplex(shape, config: NoiseConfig, seed=None) -> np.ndarray:
    """Multi-octave simplex field, standardized per 2D channel field.

    ``shape`` is (H, W) or (C, H, W); channels get independent fields derived
    from the same seed.
    """
    if config.kind != "simplex":
        raise ValueError(f"config.kind must be 'simplex', got {config.kind!r}")
    seed = config.seed if seed is None else seed
    shape = tuple(int(s) for s in shape)
    if len(shape) == 2:
        return _simplex_field(shape, config, seed)
    if len(shape) == 3:
        fields = [
            _simplex_field(shape[1:], config, _chain_seed(seed, c))
            for c in range(shape[0])
        ]
        return np.stack(fields)
    raise ValueError(f"shape must be (H, W) or (C, H, W), got {shape}")


def _chain_seed(seed, extra: int):
    if isinstance(seed, (tuple, list)):
        return tuple(seed) + (extra,)
    return (int(seed), extra)


def _simplex_field(shape, config: NoiseConfig, seed) -> np.ndarray:
    H, W = shape
    if H < 1 or W < 1:
        raise ValueError(f"field dims must be positive, got {shape}")
    perm = _perm_table(seed)
    rows = np.arange(H, dtype=np.float64)[:, None] / W
    cols = np.arange(W, dtype=np.float64)[None, :] / W
    out = np.zeros((H, W), dtype=np.float64)
    amp = 1.0
    freq = float(config.base_frequency)
    for _ in range(config.octaves):
        out += amp * _simplex2(cols * freq, rows * freq, perm)
        amp *= config.persistence
        freq *= 2.0
    std = out.std()
    if std == 0.0:
        raise ValueError("degenerate simplex field (zero variance); check config")
    return (out - out.mean()) / std


def _perm_table(seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    p = rng.permutation(256)
    return np.concatenate([p, p]).astype(np.int64)


def _simplex2(x, y, perm) -> np.ndarray:
    """Vectorized 2D simplex noise over coordinate arrays x, y."""
    x, y = np.broadcast_arrays(x, y)
    s = (x + y) * _F2
    i = np.floor(x + s).astype(np.int64)
    j = np.floor(y + s).astype(np.int64)
    t = (i + j) * _G2
    x0 = x - (i - t)
    y0 = y - (j - t)
    upper = x0 > y0  # which of the two triangles of the skewed cell
    i1 = np.where(upper, 1, 0)
    j1 = 1 - i1
    x1 = x0 - i1 + _G2
    y1 = y0 - j1 + _G2
    x2 = x0 - 1.0 + 2.0 * _G2
    y2 = y0 - 1.0 + 2.0 * _G2
    ii = i & 255
    jj = j & 255
    gi0 = perm[ii + perm[jj]] % 8
    gi1 = perm[ii + i1 + perm[jj + j1]] % 8
    gi2 = perm[ii + 1 + perm[jj + 1]] % 8
    total = np.zeros(x.shape, dtype=np.float64)
    for gi, xs, ys in ((gi0, x0, y0), (gi1, x1, y1), (gi2, x2, y2)):
        att = 0.5 - xs * xs - ys * ys
        att = np.where(att > 0.0, att, 0.0) ** 4
        g = _GRAD2[gi]
        total += att * (g[..., 0] * xs + g[..., 1] * ys)
    return 70.0 * total
