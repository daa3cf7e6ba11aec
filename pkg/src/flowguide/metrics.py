"""Temporal-consistency and reconstruction metrics.

Scaling follows the usual reporting convention for these numbers: the
warping error is multiplied by 1000 and CLIP scores by 100, so the editing
score ``clip_t_scaled / e_warp_scaled`` is rescaled by 10 to equal the ratio
of the raw values.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .flow import FlowField, FlowSequence

PSNR_CAP_DB = 100.0
E_WARP_SCALE = 1000.0
CLIP_SCALE = 100.0


class UndefinedMetricError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class ImageSequence:
    """K frames of H x W x C values clamped to [0, 1]."""

    frames: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.frames, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[..., None]
        if arr.ndim != 4:
            raise ValueError(f"expected K x H x W [x C] frames, got shape {arr.shape}")
        arr = np.clip(arr, 0.0, 1.0)
        arr.setflags(write=False)
        object.__setattr__(self, "frames", arr)

    def __len__(self) -> int:
        return self.frames.shape[0]

    def __getitem__(self, k: int) -> np.ndarray:
        return self.frames[k]

    @classmethod
    def load_pngs(cls, paths: Sequence[str | os.PathLike]) -> "ImageSequence":
        from PIL import Image

        frames = [np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0
                  for p in paths]
        shapes = {f.shape for f in frames}
        if len(shapes) != 1:
            raise ValueError(f"frames have differing shapes: {sorted(shapes)}")
        return cls(np.stack(frames))

    def save_pngs(self, paths: Sequence[str | os.PathLike]) -> None:
        from PIL import Image

        for frame, p in zip(self.frames, paths):
            img = (frame * 255.0 + 0.5).astype(np.uint8)
            Image.fromarray(img[..., 0] if img.shape[-1] == 1 else img).save(p)


@dataclass
class MetricReport:
    e_warp_scaled: float | None = None
    clip_t_scaled: float | None = None
    s_edit: float | None = None
    psnr_db: float | None = None
    ssim: float | None = None

    def to_dict(self) -> dict:
        return {
            "e_warp": self.e_warp_scaled,
            "clip_t": self.clip_t_scaled,
            "s_edit": self.s_edit,
            "psnr": self.psnr_db,
            "ssim": self.ssim,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# --------------------------------------------------------------------------
# warping


def _frame3(frame) -> np.ndarray:
    a = np.asarray(frame, dtype=np.float64)
    return a[..., None] if a.ndim == 2 else a


def warp_frame(frame: np.ndarray, flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Backward-warp ``frame`` by sampling it at ``p + flow(p)`` (bilinear).

    Returns the warped frame (same shape as the input) and the validity mask.
    """
    img = _frame3(frame)
    if img.shape[:2] != flow.shape:
        raise ValueError(f"frame {img.shape[:2]} and flow {flow.shape} differ in size")
    warped, mask = kernels.bilinear_warp(img, flow.fx, flow.fy)
    warped = warped.reshape(np.shape(frame))
    return warped, np.asarray(mask, dtype=bool)


def warping_error(video: ImageSequence, flows: FlowSequence | Sequence[FlowField]) -> float:
    """Flow warping error, scaled by 1000.

    For each pair, frame k+1 is warped back to frame k with the forward flow
    k -> k+1 and the squared difference is averaged over valid pixels and
    channels; pair errors are averaged. Pairs with no valid pixel are skipped.
    """
    flows = list(flows)
    K = len(video)
    if K < 2:
        raise ValueError("warping error needs at least two frames")
    if len(flows) != K - 1:
        raise ValueError(f"{K} frames need {K - 1} flows, got {len(flows)}")
    errors = []
    for k, flow in enumerate(flows):
        warped, mask = warp_frame(video[k + 1], flow)
        if not mask.any():
            continue
        diff = (video[k] - warped)[mask]
        errors.append(float(np.mean(diff * diff)))
    if not errors:
        raise UndefinedMetricError("no frame pair has a valid warped region")
    return float(np.mean(errors)) * E_WARP_SCALE


def edit_score(clip_t_scaled: float, e_warp_scaled: float) -> float:
    """CLIP-T / E_warp on raw values, from their x100 / x1000 reported forms."""
    if not e_warp_scaled > 0:
        raise ZeroDivisionError(f"editing score undefined for warping error {e_warp_scaled}")
    return float((clip_t_scaled / CLIP_SCALE) / (e_warp_scaled / E_WARP_SCALE))


# --------------------------------------------------------------------------
# image quality


def psnr(a, b, cap: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio for unit dynamic range, capped at ``cap`` dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ g


def ssim(a, b, window: int = 11, sigma: float = 1.5, c1: float = 0.01**2, c2: float = 0.03**2):
    """Gaussian-windowed SSIM averaged over all fully-contained windows.

    Colour images (H, W, C) are averaged over channels first.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a.mean(axis=-1), b.mean(axis=-1)
    if a.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {a.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def latent_psnr_ssim(reference: np.ndarray, test: np.ndarray) -> tuple[float, float]:
    """PSNR/SSIM of a K x H x W x C latent against a reference.

    Both are mapped to [0, 1] with the reference's min/max (then clipped); SSIM
    is averaged over every (frame, channel) plane using the largest odd window
    up to 11 that fits the plane.
    """
    ref = np.asarray(reference, dtype=np.float64)
    tst = np.asarray(test, dtype=np.float64)
    if ref.shape != tst.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {tst.shape}")
    lo, hi = float(ref.min()), float(ref.max())
    span = hi - lo if hi > lo else 1.0
    ref_n = np.clip((ref - lo) / span, 0.0, 1.0)
    tst_n = np.clip((tst - lo) / span, 0.0, 1.0)
    K, H, W, C = ref.shape
    win = min(11, H, W)
    win -= 1 - win % 2
    vals = [ssim(ref_n[k, :, :, c], tst_n[k, :, :, c], window=win)
            for k in range(K) for c in range(C)]
    return psnr(ref_n, tst_n), float(np.mean(vals))


def write_report(report: MetricReport, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")

