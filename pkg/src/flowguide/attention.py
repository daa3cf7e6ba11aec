"""Attention over latent feature videos.

A feature video is a K x H x W x C tensor; patches are flattened in
``(frame, y, x)`` order. Three attention patterns are provided:

* spatial: each patch attends to the patches of its own frame;
* dense spatio-temporal (DSTA): each patch attends to every patch;
* flow-guided: each patch attends to the *other* patches on its trajectory,
  using the features directly (no projections, no positional encoding).

``masked_attention_oracle`` is a dense O(N^2) reference used to check the
restricted kernels.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import kernels
from .trajectory import TrajectorySet


class ShapeError(ValueError):
    pass


class EmptyKeysError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureVideo:
    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"feature video must be K x H x W x C, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("feature video contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def tokens(self) -> np.ndarray:
        """(K*H*W, C) view in patch order."""
        return self.data.reshape(-1, self.channels)

    @classmethod
    def from_tokens(cls, tokens: np.ndarray, like: "FeatureVideo | tuple") -> "FeatureVideo":
        shape = like.shape if isinstance(like, FeatureVideo) else tuple(like)
        return cls(np.asarray(tokens).reshape(shape[:3] + (tokens.shape[-1],)))

    # ---- raw blob + JSON sidecar -------------------------------------

    def save(self, path: str | os.PathLike, dtype: str = "<f4") -> None:
        """Write a raw little-endian blob plus a ``<path>.json`` shape sidecar.

        float32 is the exchange default; ``dtype="<f8"`` keeps full precision
        for intermediates such as inverted latents and cached features.
        """
        if dtype not in ("<f4", "<f8"):
            raise ValueError(f"unsupported blob dtype {dtype!r}")
        path = os.fspath(path)
        with open(path, "wb") as fh:
            fh.write(self.data.astype(dtype).tobytes())
        K, H, W, C = self.shape
        meta = {"frames": K, "height": H, "width": W, "channels": C}
        if dtype != "<f4":
            meta["dtype"] = dtype
        with open(path + ".json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FeatureVideo":
        path = os.fspath(path)
        with open(path + ".json", encoding="utf-8") as fh:
            meta = json.load(fh)
        shape = (meta["frames"], meta["height"], meta["width"], meta["channels"])
        raw = np.fromfile(path, dtype=meta.get("dtype", "<f4"))
        if raw.size != int(np.prod(shape)):
            raise OSError(f"{path}: {raw.size} values, sidecar declares {shape}")
        return cls(raw.reshape(shape).astype(np.float64))


@dataclass(frozen=True)
class AttentionParams:
    head_count: int = 1
    head_dim: int | None = None

    def __post_init__(self) -> None:
        if self.head_count < 1:
            raise ValueError("head_count must be >= 1")

    def check(self, channels: int) -> int:
        if channels % self.head_count:
            raise ShapeError(f"{self.head_count} heads do not divide {channels} channels")
        d = channels // self.head_count
        if self.head_dim is not None and self.head_dim != d:
            raise ShapeError(f"head_dim {self.head_dim} != {channels}/{self.head_count}")
        return d


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    # einsum keeps each output row independent of its batch position
    y = np.einsum("nc,cd->nd", x, w)
    return y if b is None else y + b


@dataclass(frozen=True, eq=False)
class ProjectionWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ff_w1: np.ndarray
    ff_b1: np.ndarray
    ff_w2: np.ndarray
    ff_b2: np.ndarray

    def __post_init__(self) -> None:
        for name in ("wq", "wk", "wv", "wo", "ff_w1", "ff_b1", "ff_w2", "ff_b2"):
            a = np.array(getattr(self, name), dtype=np.float64)
            if not np.isfinite(a).all():
                raise ValueError(f"{name} has non-finite entries")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        c = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (c, c):
                raise ShapeError(f"{name} must be {c}x{c}")
        f = self.ff_w1.shape[1]
        if self.ff_w1.shape != (c, f) or self.ff_b1.shape != (f,):
            raise ShapeError("feed-forward first layer has inconsistent shape")
        if self.ff_w2.shape != (f, c) or self.ff_b2.shape != (c,):
            raise ShapeError("feed-forward second layer has inconsistent shape")

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def random(cls, channels: int, seed: int, ff_mult: int = 2, std: float | None = None):
        """Gaussian weights with std ``1/sqrt(C)`` unless given; zero biases."""
        rng = np.random.default_rng(seed)
        s = 1.0 / np.sqrt(channels) if std is None else std
        f = ff_mult * channels
        mats = [rng.normal(0.0, s, (channels, channels)) for _ in range(4)]
        return cls(
            *mats,
            ff_w1=rng.normal(0.0, s, (channels, f)),
            ff_b1=np.zeros(f),
            ff_w2=rng.normal(0.0, 1.0 / np.sqrt(f) if std is None else std, (f, channels)),
            ff_b2=np.zeros(channels),
        )

    @classmethod
    def zeros(cls, channels: int, ff_mult: int = 2):
        f = ff_mult * channels
        z = np.zeros((channels, channels))
        return cls(z, z, z, z, np.zeros((channels, f)), np.zeros(f), np.zeros((f, channels)),
                   np.zeros(channels))

    @classmethod
    def identity(cls, channels: int, ff_mult: int = 2):
        """Identity projections (feed-forward left at zero)."""
        f = ff_mult * channels
        eye = np.eye(channels)
        return cls(eye, eye, eye, eye, np.zeros((channels, f)), np.zeros(f),
                   np.zeros((f, channels)), np.zeros(channels))

    def feed_forward(self, x: np.ndarray) -> np.ndarray:
        return linear(gelu(linear(x, self.ff_w1, self.ff_b1)), self.ff_w2, self.ff_b2)


# --------------------------------------------------------------------------


def scaled_dot_attention(q, keys, values) -> np.ndarray:
    """``softmax(q K^T / sqrt(d)) V`` for a single query."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if keys.shape[0] == 0 or keys.size == 0:
        raise EmptyKeysError("attention needs at least one key")
    if keys.shape[1] != q.shape[0] or values.shape[0] != keys.shape[0]:
        raise ShapeError(f"q {q.shape}, keys {keys.shape}, values {values.shape} disagree")
    logits = keys @ q / np.sqrt(q.shape[0])
    logits -= logits.max()
    w = np.exp(logits)
    w /= w.sum()
    return values[0] + w @ (values - values[0])


def _check_video(z: FeatureVideo, p: AttentionParams, w: ProjectionWeights | None = None):
    if not isinstance(z, FeatureVideo):
        raise TypeError("expected a FeatureVideo")
    p.check(z.channels)
    if w is not None and w.channels != z.channels:
        raise ShapeError(f"weights are for {w.channels} channels, video has {z.channels}")


def _project(z: FeatureVideo, w: ProjectionWeights):
    x = z.tokens()
    return linear(x, w.wq), linear(x, w.wk), linear(x, w.wv)


def spatial_attention(z: FeatureVideo, w: ProjectionWeights, p: AttentionParams) -> FeatureVideo:
    """Per-frame multi-head self-attention with Q/K/V and output projections."""
    _check_video(z, p, w)
    q, k, v = _project(z, w)
    n_frame = z.height * z.width
    order = np.arange(q.shape[0], dtype=np.int64)
    offsets = np.arange(0, q.shape[0] + 1, n_frame, dtype=np.int64)
    out = kernels.grouped_attention(q, k, v, v, order, offsets, p.head_count, False)
    return FeatureVideo.from_tokens(linear(out, w.wo), z)


def dense_spatio_temporal_attention(
    z: FeatureVideo, w: ProjectionWeights, p: AttentionParams
) -> FeatureVideo:
    """Every patch attends to all K*H*W patches; returns the pre-feed-forward H."""
    _check_video(z, p, w)
    q, k, v = _project(z, w)
    n = q.shape[0]
    order = np.arange(n, dtype=np.int64)
    offsets = np.array([0, n], dtype=np.int64)
    out = kernels.grouped_attention(q, k, v, v, order, offsets, p.head_count, False)
    return FeatureVideo.from_tokens(linear(out, w.wo), z)


def _check_set(h: FeatureVideo, tset: TrajectorySet) -> None:
    if (h.frames, h.height, h.width) != (tset.frame_count, tset.height, tset.width):
        raise ShapeError(
            f"video {h.frames}x{h.height}x{h.width} does not match trajectory grid "
            f"{tset.frame_count}x{tset.height}x{tset.width}"
        )


def flow_guided_attention(
    h: FeatureVideo,
    tset: TrajectorySet,
    p: AttentionParams,
    *,
    qkv: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> FeatureVideo:
    """Attention along trajectories: keys/values are the other patches on the
    query's trajectory. Patches alone on their trajectory pass through.

    ``qkv`` substitutes explicit query/key/value token arrays for ``h`` itself
    (used by the re-projecting block variant); pass-through still copies ``h``.
    """
    _check_video(h, p)
    _check_set(h, tset)
    x = h.tokens()
    q, k, v = qkv if qkv is not None else (x, x, x)
    order, offsets = tset.groups()
    out = kernels.grouped_attention(q, k, v, x, order, offsets, p.head_count, True)
    return FeatureVideo.from_tokens(out, h)


def trajectory_mask(tset: TrajectorySet) -> np.ndarray:
    """Boolean (N, N) mask: same trajectory and not the same patch."""
    labels = tset.labels()
    mask = labels[:, None] == labels[None, :]
    np.fill_diagonal(mask, False)
    return mask


def masked_attention_oracle(
    z: FeatureVideo,
    mask: np.ndarray,
    p: AttentionParams,
    weights: ProjectionWeights | None = None,
) -> FeatureVideo:
    """Dense reference attention honouring ``mask``; all-false rows pass through.

    Without ``weights`` Q = K = V = z. With ``weights`` the Q/K/V projections
    and the output projection are applied around the masked attention.
    """
    d = p.check(z.channels)
    x = z.tokens()
    n, c = x.shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n, n):
        raise ShapeError(f"mask shape {mask.shape} != {(n, n)}")
    if weights is None:
        q = k = v = x
    else:
        q, k, v = x @ weights.wq, x @ weights.wk, x @ weights.wv
    out = np.empty((n, c))
    for hd in range(p.head_count):
        sl = slice(hd * d, (hd + 1) * d)
        logits = (q[:, sl] @ k[:, sl].T) / np.sqrt(d)
        logits = np.where(mask, logits, -np.inf)
        top = np.max(logits, axis=1, keepdims=True)
        top[~np.isfinite(top)] = 0.0
        e = np.where(mask, np.exp(logits - top), 0.0)
        tot = e.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[:, sl] = (e @ v[:, sl]) / tot
    empty = ~mask.any(axis=1)
    out[empty] = v[empty] if weights is None else x[empty]
    if weights is not None:
        out = out @ weights.wo
    return FeatureVideo.from_tokens(out, z)


def dsta_flatten_block(
    z: FeatureVideo,
    tset: TrajectorySet | None,
    w: ProjectionWeights,
    p: AttentionParams,
    mode: str = "II",
    *,
    flatten: bool = True,
    on_features=None,
) -> FeatureVideo:
    """DSTA, then (optionally) flow-guided attention, then the feed-forward net.

    Mode ``II`` feeds the DSTA output H straight into flow-guided attention;
    mode ``I`` re-projects H with ``wq``/``wk``/``wv`` first. With
    ``flatten=False`` the block is DSTA + feed-forward. ``on_features`` may
    observe or replace H (feature caching/injection); it receives and returns
    a FeatureVideo.
    """
    if mode not in ("I", "II"):
        raise ValueError(f"mode must be 'I' or 'II', got {mode!r}")
    hidden = dense_spatio_temporal_attention(z, w, p)
    if on_features is not None:
        hidden = on_features(hidden)
        if hidden.shape != z.shape:
            raise ShapeError(f"injected features have shape {hidden.shape}, expected {z.shape}")
    if flatten:
        if tset is None:
            raise ValueError("flow-guided attention needs a trajectory set")
        qkv = _project(hidden, w) if mode == "I" else None
        hidden = flow_guided_attention(hidden, tset, p, qkv=qkv)
    return FeatureVideo.from_tokens(w.feed_forward(hidden.tokens()), z)
