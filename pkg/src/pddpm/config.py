"""Merged run configuration: schedule, noise, patching, denoiser, train, eval.

The on-disk format is YAML with one section per concern; unknown keys are
rejected so typos fail loudly.  ``full_scale_profile`` carries the reference
hyperparameters, ``desk_profile`` the small CPU-friendly variant used for
phantom experiments.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .denoiser import DenoiserConfig
from .noise import NoiseConfig
from .pipeline import TrainConfig


@dataclass
class EvalParams:
    median_kernel: int = 5
    erosion_iters: int = 3
    min_component: int = 7
    n_thresholds: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise ValueError("median_kernel must be odd and >= 1")
        if self.erosion_iters < 0 or self.min_component < 0 or self.n_thresholds < 1:
            raise ValueError("eval parameters out of range")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    eval: EvalParams = field(default_factory=EvalParams)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        t = asdict(self.train)
        noise = t.pop("noise")
        schedule = {k: t.pop(k) for k in ("T", "beta_start", "beta_end")}
        ps = t.pop("patch_size")
        patching = {"patch_h": int(ps[0]), "patch_w": int(ps[1]), "mode": t.pop("patch_mode")}
        denoiser = asdict(self.denoiser)
        denoiser["channel_dims"] = list(denoiser["channel_dims"])
        return {
            "schedule": schedule,
            "noise": noise,
            "patching": patching,
            "denoiser": denoiser,
            "train": t,
            "eval": asdict(self.eval),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        base = cls().to_dict()
        unknown = set(d) - set(base)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        merged = {}
        for section, defaults in base.items():
            override = d.get(section, {})
            if not isinstance(override, dict):
                raise ValueError(f"config section {section!r} must be a mapping")
            bad = set(override) - set(defaults)
            if bad:
                raise ValueError(f"unknown keys in config section {section!r}: {sorted(bad)}")
            merged[section] = {**defaults, **override}
        train_kwargs = dict(merged["train"])
        train_kwargs.update(merged["schedule"])
        train_kwargs["noise"] = NoiseConfig(**merged["noise"])
        train_kwargs["patch_mode"] = merged["patching"]["mode"]
        train_kwargs["patch_size"] = (
            merged["patching"]["patch_h"],
            merged["patching"]["patch_w"],
        )
        den = dict(merged["denoiser"])
        den["channel_dims"] = tuple(den["channel_dims"])
        return cls(
            train=TrainConfig(**train_kwargs),
            denoiser=DenoiserConfig(**den),
            eval=EvalParams(**merged["eval"]),
        )

    def to_yaml(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        raw = yaml.safe_load(Path(path).read_text())
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: config must be a YAML mapping")
        return cls.from_dict(raw)

    def digest(self) -> str:
        text = yaml.safe_dump(self.to_dict(), sort_keys=True)
        return hashlib.sha1(text.encode()).hexdigest()[:10]

    # -- profiles -----------------------------------------------------------

    def with_overrides(self, **kwargs) -> "RunConfig":
        """Apply flat CLI-style overrides (seed, patch_size, t_test, ...)."""
        train = self.train
        ev = self.eval
        if (v := kwargs.pop("seed", None)) is not None:
            train = replace(train, seed=int(v))
            ev = replace(ev, seed=int(v))
        if (v := kwargs.pop("patch_size", None)) is not None:
            train = replace(train, patch_size=(int(v), int(v)))
        if (v := kwargs.pop("patch_mode", None)) is not None:
            train = replace(train, patch_mode=v)
        if (v := kwargs.pop("t_test", None)) is not None:
            train = replace(train, t_test=int(v))
        if (v := kwargs.pop("noise_kind", None)) is not None:
            train = replace(train, noise=replace(train.noise, kind=v))
        if (v := kwargs.pop("loss_mode", None)) is not None:
            train = replace(train, loss_mode=v)
        if kwargs:
            raise ValueError(f"unknown overrides: {sorted(kwargs)}")
        return RunConfig(train=train, denoiser=self.denoiser, eval=ev)


def full_scale_profile() -> RunConfig:
    """Reference hyperparameters for 96x96 slice volumes."""
    return RunConfig(
        train=TrainConfig(),
        denoiser=DenoiserConfig(channel_dims=(128, 128, 256)),
        eval=EvalParams(),
    )


def desk_profile(seed: int = 0) -> RunConfig:
    """CPU-friendly profile for (8, 64, 64) phantom volumes."""
    return RunConfig(
        train=TrainConfig(
            learning_rate=1e-3,
            batch_size=8,
            max_epochs=12,
            steps_per_epoch=125,
            t_test=500,
            noise=NoiseConfig(kind="simplex"),
            patch_mode="fixed",
            loss_mode="patch",
            patch_size=(32, 32),
            seed=seed,
        ),
        denoiser=DenoiserConfig(channel_dims=(32, 32, 64)),
        eval=EvalParams(median_kernel=3, erosion_iters=1, seed=seed),
    )
