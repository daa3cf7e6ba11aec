"""DDIM scheduler math with a pluggable denoiser.

Timesteps run from 0 (clean latent, ``alpha = 1``) to T. ``alpha(t)`` is the
cumulative product of ``1 - beta_i`` for ``i <= t``. A deterministic DDIM
move between timesteps ``s`` and ``t`` (either direction) is

    z_t = sqrt(a_t / a_s) z_s + sqrt(a_t) (c_t - c_s) eps,   c = sqrt(1/a - 1)

where ``eps`` is the denoiser's noise prediction at ``(z_s, s)``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

import numpy as np

from .attention import FeatureVideo


class ConfigurationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    beta_start: float | None = None
    beta_end: float | None = None
    alphas_cum: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        betas = np.array(self.betas, dtype=np.float64).reshape(-1)
        if betas.size < 1 or not ((betas >= 0) & (betas < 1)).all():
            raise ValueError("betas must be a non-empty sequence in [0, 1)")
        betas.setflags(write=False)
        alphas = np.cumprod(1.0 - betas)
        alphas.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas_cum", alphas)

    @property
    def total_steps(self) -> int:
        return self.betas.size

    def alpha(self, t: int) -> float:
        """Cumulative alpha at timestep ``t`` in ``[0, T]``; ``alpha(0) = 1``."""
        if not 0 <= t <= self.total_steps:
            raise ValueError(f"timestep {t} outside [0, {self.total_steps}]")
        return 1.0 if t == 0 else float(self.alphas_cum[t - 1])

    def to_dict(self) -> dict:
        if self.beta_start is None:
            return {"betas": self.betas.tolist()}
        return {"T": self.total_steps, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, doc: dict) -> "NoiseSchedule":
        if "betas" in doc:
            return cls(doc["betas"])
        return make_linear_schedule(int(doc["T"]), float(doc["beta_start"]), float(doc["beta_end"]))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")


def make_linear_schedule(T: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012):
    """Betas linearly spaced from ``beta_start`` to ``beta_end`` inclusive."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T), beta_start, beta_end)


# --------------------------------------------------------------------------
# denoisers


@dataclass
class StepContext:
    """What a denoiser sees besides ``(z, t)`` during a scheduled run.

    Denoisers built from blocks call :meth:`block_features` once per block with
    that block's attended features; the return value replaces them.
    """

    phase: str
    step: int
    timestep: int
    conditioning: Any = None
    on_block: Callable[[int, FeatureVideo], FeatureVideo] | None = None

    def block_features(self, block: int, features: FeatureVideo) -> FeatureVideo:
        if self.on_block is None:
            return features
        return self.on_block(block, features)


class Denoiser(Protocol):
    def evaluate(self, z: FeatureVideo, t: int, context: Any = None) -> np.ndarray: ...


@dataclass
class ToyDenoiser:
    """Analytic stand-ins for a trained noise predictor.

    ``zero``: eps = 0. ``linear``: eps = scale * z. ``constant``: a fixed
    seeded Gaussian tensor, independent of both z and t.
    """

    mode: str = "zero"
    scale: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("zero", "linear", "constant"):
            raise ValueError(f"unknown toy denoiser mode {self.mode!r}")

    def evaluate(self, z: FeatureVideo, t: int, context: Any = None) -> np.ndarray:
        if self.mode == "zero":
            return np.zeros(z.shape)
        if self.mode == "linear":
            return self.scale * z.data
        return np.random.default_rng(self.seed).normal(size=z.shape)

    @property
    def state_independent(self) -> bool:
        return self.mode in ("zero", "constant") or self.scale == 0.0


def _predict(denoiser, z: FeatureVideo, t: int, context) -> np.ndarray:
    eps = np.asarray(denoiser.evaluate(z, t, context), dtype=np.float64)
    if eps.shape != z.shape:
        raise ValueError(f"denoiser returned shape {eps.shape}, expected {z.shape}")
    if not np.isfinite(eps).all():
        raise ValueError("denoiser returned non-finite values")
    return eps


# --------------------------------------------------------------------------
# steps


def ddim_coefficients(schedule: NoiseSchedule, t_from: int, t_to: int) -> tuple[float, float]:
    """``(state factor, noise factor)`` of the deterministic move ``t_from -> t_to``."""
    a_s, a_t = schedule.alpha(t_from), schedule.alpha(t_to)
    c_s, c_t = np.sqrt(1.0 / a_s - 1.0), np.sqrt(1.0 / a_t - 1.0)
    return float(np.sqrt(a_t / a_s)), float(np.sqrt(a_t) * (c_t - c_s))


def ddim_move(z, t_from, t_to, schedule, denoiser, context=None, trace=None) -> FeatureVideo:
    eps = _predict(denoiser, z, t_from, context)
    a, b = ddim_coefficients(schedule, t_from, t_to)
    if trace is not None:
        trace.append((t_from, t_to, a, b))
    return FeatureVideo(a * z.data + b * eps)


def ddim_inversion_step(z_t, t, schedule, denoiser, t_next=None, context=None) -> FeatureVideo:
    """One deterministic inversion move ``t -> t_next`` (default ``t + 1``)."""
    t_next = t + 1 if t_next is None else t_next
    if not 0 <= t < t_next <= schedule.total_steps:
        raise ValueError(f"invalid inversion step {t} -> {t_next} (T={schedule.total_steps})")
    return ddim_move(z_t, t, t_next, schedule, denoiser, context)


def ddim_sampling_step(z_t, t, schedule, denoiser, t_prev=None, context=None) -> FeatureVideo:
    """One deterministic (eta = 0) sampling move ``t -> t_prev`` (default ``t - 1``)."""
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t <= schedule.total_steps:
        raise ValueError(f"invalid sampling step {t} -> {t_prev} (T={schedule.total_steps})")
    return ddim_move(z_t, t, t_prev, schedule, denoiser, context)


def timestep_grid(T: int, steps: int) -> list[int]:
    """``steps + 1`` increasing timesteps from 0 to T, evenly spaced, floored."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    return [(i * T) // steps for i in range(steps + 1)]


# --------------------------------------------------------------------------
# feature cache


@dataclass
class InjectionCache:
    """Block features saved during inversion, keyed by (step, block)."""

    steps: int
    grid: list[int]
    entries: dict[tuple[int, int], FeatureVideo] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def put(self, step: int, block: int, features: FeatureVideo) -> None:
        if (step, block) in self.entries:
            raise ConfigurationError(f"duplicate cache key {(step, block)}")
        self.entries[(step, block)] = features

    def match_step(self, timestep: int) -> int:
        """Inversion step whose starting timestep is nearest; earlier on ties."""
        starts = np.asarray(self.grid[:-1])
        return int(np.argmin(np.abs(starts - timestep)))

    def lookup(self, timestep: int, block: int) -> FeatureVideo:
        key = (self.match_step(timestep), block)
        try:
            return self.entries[key]
        except KeyError:
            raise ConfigurationError(f"no cached features for step/block {key}") from None

    def save(self, directory: str | os.PathLike) -> None:
        os.makedirs(directory, exist_ok=True)
        index = []
        for (step, block), fv in sorted(self.entries.items()):
            name = f"step{step:04d}_block{block:02d}.f64"
            fv.save(os.path.join(directory, name), dtype="<f8")
            index.append({"step": step, "block": block, "file": name})
        with open(os.path.join(directory, "index.json"), "w", encoding="utf-8") as fh:
            json.dump({"steps": self.steps, "grid": self.grid, "entries": index}, fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "InjectionCache":
        index_path = os.path.join(directory, "index.json")
        if not os.path.exists(index_path):
            raise ConfigurationError(f"no injection cache at {directory}")
        with open(index_path, encoding="utf-8") as fh:
            doc = json.load(fh)
        cache = cls(int(doc["steps"]), [int(t) for t in doc["grid"]])
        for e in doc["entries"]:
            cache.put(int(e["step"]), int(e["block"]),
                      FeatureVideo.load(os.path.join(directory, e["file"])))
        return cache


# --------------------------------------------------------------------------
# full runs


def run_inversion(z0, schedule, denoiser, steps, hooks=None, context=None, trace=None):
    """Invert ``z0`` to ``z_T`` over ``steps`` evenly spaced moves.

    Returns ``(z_T, cache)``; the cache holds every block feature the denoiser
    reported, keyed by ``(step index, block id)``. ``hooks(step, block,
    features)`` is additionally called for each of them.
    """
    grid = timestep_grid(schedule.total_steps, steps)
    cache = InjectionCache(steps, grid)
    z = z0
    for i in range(steps):

        def record(block, features, _i=i):
            cache.put(_i, block, features)
            if hooks is not None:
                hooks(_i, block, features)
            return features

        ctx = StepContext("inversion", i, grid[i], context, record)
        z = ddim_move(z, grid[i], grid[i + 1], schedule, denoiser, ctx, trace)
    return z, cache


def run_sampling(z_T, schedule, denoiser, steps, injection=None, context=None, trace=None):
    """Deterministic DDIM sampling from ``z_T`` down to timestep 0.

    With ``injection`` each block's features at sampling step ``j`` (the move
    ending at grid timestep ``g_j``) are replaced by the cached inversion
    features of the step whose start timestep is nearest to ``g_j``.
    """
    grid = timestep_grid(schedule.total_steps, steps)
    z = z_T
    for j in range(steps - 1, -1, -1):
        on_block = None
        if injection is not None:

            def on_block(block, features, _t=grid[j]):
                cached = injection.lookup(_t, block)
                if cached.shape != features.shape:
                    raise ConfigurationError(
                        f"cached features {cached.shape} do not match {features.shape}"
                    )
                return cached

        ctx = StepContext("sampling", j, grid[j + 1], context, on_block)
        z = ddim_move(z, grid[j + 1], grid[j], schedule, denoiser, ctx, trace)
    return z


def forward_noise_sample(z0: FeatureVideo, t: int, schedule: NoiseSchedule, seed: int):
    """Draw ``z_t = sqrt(a_t) z0 + sqrt(1 - a_t) eps`` with seeded ``eps``."""
    if not 1 <= t <= schedule.total_steps:
        raise ValueError(f"timestep {t} outside [1, {schedule.total_steps}]")
    a = schedule.alpha(t)
    eps = np.random.default_rng(seed).standard_normal(z0.shape)
    return FeatureVideo(np.sqrt(a) * z0.data + np.sqrt(1.0 - a) * eps)
