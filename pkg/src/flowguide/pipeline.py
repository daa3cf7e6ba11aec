"""Toy end-to-end editing loop: invert a latent video with an attention-only
denoiser, cache block features, then sample back with injection.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import AttentionParams, FeatureVideo, ProjectionWeights, dsta_flatten_block
from .diffusion import (
    ConfigurationError,
    InjectionCache,
    NoiseSchedule,
    StepContext,
    make_linear_schedule,
    run_inversion,
    run_sampling,
)
from .metrics import MetricReport, latent_psnr_ssim
from .trajectory import TrajectorySet


@dataclass(frozen=True, eq=False)
class BlockConfig:
    weights: ProjectionWeights
    params: AttentionParams
    mode: str = "II"


@dataclass(eq=False)
class ToyUNet:
    """A flat stack of DSTA(+FLATTEN)+feed-forward blocks at one resolution.

    Used as a denoiser: ``evaluate`` runs the stack and returns the last
    block's output as the noise prediction. FLATTEN is applied only in the
    phases enabled in ``flatten_enabled`` (``inversion`` / ``sampling``);
    calls without a :class:`StepContext` use the ``sampling`` setting.
    """

    blocks: list[BlockConfig]
    trajectories: TrajectorySet | None = None
    flatten_enabled: dict[str, bool] = field(
        default_factory=lambda: {"inversion": True, "sampling": True}
    )

    @classmethod
    def build(
        cls,
        channels: int,
        seed: int = 0,
        n_blocks: int = 2,
        heads: int = 1,
        mode: str = "II",
        init: str = "gaussian",
        ff_mult: int = 2,
        trajectories: TrajectorySet | None = None,
        flatten_inversion: bool = True,
        flatten_sampling: bool = True,
    ) -> "ToyUNet":
        params = AttentionParams(heads)
        params.check(channels)
        blocks = []
        for b in range(n_blocks):
            if init == "gaussian":
                w = ProjectionWeights.random(channels, seed=seed * 1000 + b, ff_mult=ff_mult)
            elif init == "zero":
                w = ProjectionWeights.zeros(channels, ff_mult=ff_mult)
            else:
                raise ValueError(f"unknown init {init!r}")
            blocks.append(BlockConfig(w, params, mode))
        return cls(
            blocks,
            trajectories,
            {"inversion": flatten_inversion, "sampling": flatten_sampling},
        )

    def with_flatten(self, inversion: bool, sampling: bool) -> "ToyUNet":
        return ToyUNet(self.blocks, self.trajectories,
                       {"inversion": inversion, "sampling": sampling})

    def with_trajectories(self, tset: TrajectorySet) -> "ToyUNet":
        return ToyUNet(self.blocks, tset, dict(self.flatten_enabled))

    def forward(self, z: FeatureVideo, context: StepContext | None = None) -> FeatureVideo:
        phase = context.phase if context is not None else "sampling"
        flatten = self.flatten_enabled.get(phase, False)
        x = z
        for i, blk in enumerate(self.blocks):
            hook = None
            if context is not None:
                hook = lambda f, _i=i: context.block_features(_i, f)  # noqa: E731
            x = dsta_flatten_block(
                x, self.trajectories, blk.weights, blk.params, blk.mode,
                flatten=flatten, on_features=hook,
            )
        return x

    def evaluate(self, z: FeatureVideo, t: int, context=None) -> np.ndarray:
        ctx = context if isinstance(context, StepContext) else None
        return self.forward(z, ctx).data


def _check(z: FeatureVideo, unet: ToyUNet, tset: TrajectorySet) -> None:
    if (z.frames, z.height, z.width) != (tset.frame_count, tset.height, tset.width):
        raise ValueError(
            f"latent {z.shape[:3]} does not match trajectory grid "
            f"{(tset.frame_count, tset.height, tset.width)}"
        )
    for blk in unet.blocks:
        if blk.weights.channels != z.channels:
            raise ValueError(f"block expects {blk.weights.channels} channels, latent has {z.channels}")


def invert_video(z0, unet: ToyUNet, tset: TrajectorySet, schedule: NoiseSchedule, steps: int):
    """DDIM-invert ``z0``; returns ``(z_T, cache of per-block DSTA features)``."""
    _check(z0, unet, tset)
    return run_inversion(z0, schedule, unet.with_trajectories(tset), steps)


def edit_video(z_T, unet: ToyUNet, tset: TrajectorySet, schedule: NoiseSchedule, steps: int,
               cache: InjectionCache | None = None) -> FeatureVideo:
    """DDIM-sample from ``z_T``, injecting ``cache`` features when given."""
    _check(z_T, unet, tset)
    if cache is not None:
        expected = {(i, b) for i in range(cache.steps) for b in range(len(unet.blocks))}
        if set(cache.entries) != expected:
            raise ConfigurationError(
                f"cache holds {len(cache)} entries, expected {len(expected)} "
                f"for {cache.steps} steps x {len(unet.blocks)} blocks"
            )
        if cache.grid[-1] != schedule.total_steps:
            raise ConfigurationError("cache was built with a different schedule length")
    return run_sampling(z_T, schedule, unet.with_trajectories(tset), steps, injection=cache)


def reconstruct_experiment(z0, unet, tset, schedule, inv_steps, samp_steps,
                           inject: bool = False) -> dict[str, MetricReport]:
    """Invert and re-sample ``z0`` with FLATTEN on and off in both phases.

    Returns ``{"flatten": report, "no_flatten": report}`` with PSNR/SSIM of
    each reconstruction against ``z0``.
    """
    out = {}
    for name, on in (("flatten", True), ("no_flatten", False)):
        net = unet.with_flatten(on, on)
        z_T, cache = invert_video(z0, net, tset, schedule, inv_steps)
        rec = edit_video(z_T, net, tset, schedule, samp_steps, cache if inject else None)
        psnr_db, ssim_val = latent_psnr_ssim(z0.data, rec.data)
        out[name] = MetricReport(psnr_db=psnr_db, ssim=ssim_val)
    return out


# --------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    seed: int = 0
    blocks: int = 2
    heads: int = 1
    mode: str = "II"
    init: str = "gaussian"
    ff_mult: int = 2
    flatten_inversion: bool = True
    flatten_sampling: bool = True
    inv_steps: int = 100
    samp_steps: int = 50
    inject: bool = True
    schedule: dict = field(
        default_factory=lambda: {"T": 1000, "beta_start": 0.00085, "beta_end": 0.012}
    )

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown pipeline config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        if cfg.mode not in ("I", "II"):
            raise ConfigurationError(f"mode must be I or II, got {cfg.mode!r}")
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def make_schedule(self) -> NoiseSchedule:
        return NoiseSchedule.from_dict(self.schedule) if self.schedule else make_linear_schedule()

    def make_unet(self, channels: int) -> ToyUNet:
        return ToyUNet.build(
            channels, seed=self.seed, n_blocks=self.blocks, heads=self.heads,
            mode=self.mode, init=self.init, ff_mult=self.ff_mult,
            flatten_inversion=self.flatten_inversion, flatten_sampling=self.flatten_sampling,
        )
