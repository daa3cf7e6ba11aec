"""Dense optical-flow displacement fields.

A :class:`FlowField` holds the horizontal and vertical displacement of every
cell of a grid, measured in units of that grid's own spacing. A
:class:`FlowSequence` holds the K-1 fields linking K consecutive frames.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

FLO_MAGIC = b"PIEH"
FLO_MAGIC_FLOAT = 202021.25


class FlowFormatError(ValueError):
    """Raised for files that are not Middlebury .flo."""


class FlowValidationError(ValueError):
    """Raised for malformed displacement data."""


def _as_grid(a) -> np.ndarray:
    arr = np.array(a, copy=True)
    if arr.dtype.kind not in "fiu":
        raise FlowValidationError(f"flow components must be numeric, got {arr.dtype}")
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FlowField:
    fx: np.ndarray
    fy: np.ndarray

    def __post_init__(self) -> None:
        fx, fy = _as_grid(self.fx), _as_grid(self.fy)
        if fx.ndim != 2 or fx.shape != fy.shape:
            raise FlowValidationError(
                f"fx and fy must be 2D with equal shape, got {fx.shape} and {fy.shape}"
            )
        if fx.size == 0:
            raise FlowValidationError("flow field must be non-empty")
        if not (np.isfinite(fx).all() and np.isfinite(fy).all()):
            raise FlowValidationError("flow field contains non-finite values")
        object.__setattr__(self, "fx", fx)
        object.__setattr__(self, "fy", fy)

    @property
    def height(self) -> int:
        return self.fx.shape[0]

    @property
    def width(self) -> int:
        return self.fx.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.fx.shape

    def to_array(self) -> np.ndarray:
        """Stack into an (H, W, 2) array of (fx, fy)."""
        return np.stack([self.fx, self.fy], axis=-1)

    @classmethod
    def from_array(cls, uv: np.ndarray) -> "FlowField":
        uv = np.asarray(uv)
        if uv.ndim != 3 or uv.shape[-1] != 2:
            raise FlowValidationError(f"expected (H, W, 2) array, got {uv.shape}")
        return cls(uv[..., 0], uv[..., 1])

    @classmethod
    def zeros(cls, width: int, height: int) -> "FlowField":
        z = np.zeros((height, width), dtype=np.float32)
        return cls(z, z)

    def equals(self, other: "FlowField") -> bool:
        """Bitwise equality of both components (including dtype)."""
        return (
            self.fx.dtype == other.fx.dtype
            and self.fx.shape == other.fx.shape
            and self.fx.tobytes() == other.fx.tobytes()
            and self.fy.tobytes() == other.fy.tobytes()
        )

    def __mul__(self, c: float) -> "FlowField":
        return FlowField(self.fx * c, self.fy * c)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class FlowSequence:
    fields: tuple[FlowField, ...]

    def __init__(self, fields: Sequence[FlowField]):
        fields = tuple(fields)
        if fields and any(f.shape != fields[0].shape for f in fields):
            raise FlowValidationError("all flow fields in a sequence must share dimensions")
        object.__setattr__(self, "fields", fields)

    @property
    def frame_count(self) -> int:
        return len(self.fields) + 1

    def __len__(self) -> int:
        return len(self.fields)

    def __iter__(self):
        return iter(self.fields)

    def __getitem__(self, i: int) -> FlowField:
        return self.fields[i]

    @property
    def shape(self) -> tuple[int, int] | None:
        return self.fields[0].shape if self.fields else None


# --------------------------------------------------------------------------
# .flo I/O


def write_flo(field: FlowField, path: str | os.PathLike) -> None:
    """Write ``field`` as Middlebury .flo (little-endian float32 payload)."""
    header = FLO_MAGIC + np.array([field.width, field.height], dtype="<i4").tobytes()
    payload = np.empty((field.height, field.width, 2), dtype="<f4")
    payload[..., 0] = field.fx
    payload[..., 1] = field.fy
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def load_flo(path: str | os.PathLike) -> FlowField:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise OSError(f"{path}: truncated .flo header ({len(data)} bytes)")
    if data[:4] != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {data[:4]!r}, expected {FLO_MAGIC!r}")
    width, height = (int(v) for v in np.frombuffer(data, dtype="<i4", count=2, offset=4))
    if width <= 0 or height <= 0:
        raise FlowFormatError(f"{path}: invalid dimensions {width}x{height}")
    expected = 12 + 8 * width * height
    if len(data) < expected:
        raise OSError(f"{path}: truncated payload ({len(data)} of {expected} bytes)")
    uv = np.frombuffer(data, dtype="<f4", count=2 * width * height, offset=12)
    uv = uv.astype(np.float32).reshape(height, width, 2)
    return FlowField.from_array(uv)


# --------------------------------------------------------------------------
# grid operations


def downsample_flow(field: FlowField, factor: int) -> FlowField:
    """Block-mean pool by ``factor`` and rescale displacements to the coarse grid."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor!r}")
    h, w = field.shape
    if h % factor or w % factor:
        raise ValueError(f"field {w}x{h} is not divisible by factor {factor}")

    def pool(a: np.ndarray) -> np.ndarray:
        blocks = a.reshape(h // factor, factor, w // factor, factor)
        return (blocks.mean(axis=(1, 3)) / factor).astype(a.dtype)

    return FlowField(pool(field.fx), pool(field.fy))


def round_half_away(v):
    """Round to nearest integer, halves away from zero."""
    v = np.asarray(v, dtype=np.float64)
    return (np.sign(v) * np.floor(np.abs(v) + 0.5)).astype(np.int64)


def project_coords(x: float, y: float, field: FlowField) -> tuple[float, float]:
    """Move ``(x, y)`` one frame forward along the flow at its nearest cell."""
    cx, cy = int(round_half_away(x)), int(round_half_away(y))
    if not (0 <= cx < field.width and 0 <= cy < field.height):
        raise IndexError(f"({x}, {y}) rounds to ({cx}, {cy}), outside {field.width}x{field.height}")
    return float(x) + float(field.fx[cy, cx]), float(y) + float(field.fy[cy, cx])


def synth_flow(kind: str, width: int, height: int, **params) -> FlowField:
    """Analytic displacement field.

    ``kind`` is one of ``constant`` (``dx``, ``dy``), ``rotation`` (``angle``
    in radians, ``center``) or ``zoom`` (``scale``, ``center``). ``center``
    defaults to the grid centre ``((W-1)/2, (H-1)/2)``.
    """
    if width < 1 or height < 1:
        raise ValueError("dimensions must be positive")
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    center = params.get("center")
    cx, cy = center if center is not None else ((width - 1) / 2.0, (height - 1) / 2.0)
    if kind == "constant":
        fx = np.full((height, width), float(params.get("dx", 0.0)))
        fy = np.full((height, width), float(params.get("dy", 0.0)))
    elif kind == "rotation":
        angle = float(params.get("angle", 0.0))
        c, s = np.cos(angle), np.sin(angle)
        ox, oy = xs - cx, ys - cy
        fx = c * ox - s * oy - ox
        fy = s * ox + c * oy - oy
    elif kind == "zoom":
        scale = float(params.get("scale", 1.0))
        fx = (scale - 1.0) * (xs - cx)
        fy = (scale - 1.0) * (ys - cy)
    else:
        raise ValueError(f"unknown flow kind {kind!r}")
    return FlowField(fx, fy)


def perturb_flow(field: FlowField, sigma: float, seed: int) -> FlowField:
    """Add i.i.d. Gaussian noise of std ``sigma`` to both components."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return FlowField(field.fx, field.fy)
    rng = np.random.default_rng(seed)
    nx = rng.normal(0.0, sigma, size=field.shape)
    ny = rng.normal(0.0, sigma, size=field.shape)
    return FlowField(
        (field.fx + nx).astype(field.fx.dtype), (field.fy + ny).astype(field.fy.dtype)
    )
