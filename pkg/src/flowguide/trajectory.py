"""Patch trajectories through a latent video grid.

Every patch ``(frame, x, y)`` of a K x H x W grid is assigned to exactly one
trajectory. Trajectories start at each frame-0 patch and follow the
(latent-resolution) flow; when several land on the same cell one of them is
picked at random to continue, and cells nobody reaches start new trajectories.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .flow import FlowSequence, round_half_away

COMPLETED = "completed"
OCCLUDED = "occluded"
OUT_OF_BOUNDS = "out_of_bounds"
STOP_REASONS = (COMPLETED, OCCLUDED, OUT_OF_BOUNDS)


class PatchRef(NamedTuple):
    frame: int
    x: int
    y: int


@dataclass(frozen=True)
class Trajectory:
    id: int
    patches: tuple[PatchRef, ...]
    stop_reason: str

    def __post_init__(self) -> None:
        if not self.patches:
            raise ValueError(f"trajectory {self.id} is empty")
        if self.stop_reason not in STOP_REASONS:
            raise ValueError(f"unknown stop reason {self.stop_reason!r}")
        start = self.patches[0].frame
        if any(p.frame != start + i for i, p in enumerate(self.patches)):
            raise ValueError(f"trajectory {self.id} frames are not consecutive")

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def start_frame(self) -> int:
        return self.patches[0].frame


@dataclass(frozen=True, eq=False)
class TrajectorySet:
    trajectories: tuple[Trajectory, ...]
    frame_count: int
    height: int
    width: int
    lookup: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        table = {}
        for t in self.trajectories:
            for pos, p in enumerate(t.patches):
                # first owner wins; duplicates are surfaced by validate_partition
                table.setdefault(p, (t.id, pos))
        object.__setattr__(self, "lookup", table)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def patch_count(self) -> int:
        return self.frame_count * self.height * self.width

    def flat_index(self, p: PatchRef) -> int:
        return (p.frame * self.height + p.y) * self.width + p.x

    def groups(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR layout: flat patch indices ordered by trajectory, and offsets."""
        order = np.fromiter(
            (self.flat_index(p) for t in self.trajectories for p in t.patches),
            dtype=np.int64,
        )
        lengths = np.fromiter((len(t) for t in self.trajectories), dtype=np.int64)
        offsets = np.zeros(len(lengths) + 1, dtype=np.int64)
        np.cumsum(lengths, out=offsets[1:])
        return order, offsets

    def labels(self) -> np.ndarray:
        """Trajectory id per flat patch index (-1 where unowned)."""
        out = np.full(self.patch_count, -1, dtype=np.int64)
        for t in self.trajectories:
            for p in t.patches:
                out[self.flat_index(p)] = t.id
        return out

    def equals(self, other: "TrajectorySet") -> bool:
        return (
            (self.frame_count, self.height, self.width)
            == (other.frame_count, other.height, other.width)
            and self.trajectories == other.trajectories
        )

    # ---- serialization ------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "frame_count": self.frame_count,
            "height": self.height,
            "width": self.width,
            "trajectories": [
                {
                    "id": t.id,
                    "stop_reason": t.stop_reason,
                    "patches": [[p.frame, p.x, p.y] for p in t.patches],
                }
                for t in self.trajectories
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrajectorySet":
        trajs = [
            Trajectory(
                int(t["id"]),
                tuple(PatchRef(int(k), int(x), int(y)) for k, x, y in t["patches"]),
                t["stop_reason"],
            )
            for t in doc["trajectories"]
        ]
        return cls(trajs, int(doc["frame_count"]), int(doc["height"]), int(doc["width"]))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrajectorySet":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def sample_trajectories(
    flows: FlowSequence | Sequence, height: int, width: int, seed: int = 0
) -> TrajectorySet:
    """Link patches across frames along ``flows`` into a partition of the grid.

    ``flows`` must hold K-1 fields at latent resolution ``height`` x ``width``.
    Projected positions are rounded half away from zero. Occlusion winners are
    drawn with ``numpy.random.default_rng(seed)``, one draw per conflicting
    cell, visiting cells in raster order.
    """
    flows = flows if isinstance(flows, FlowSequence) else FlowSequence(flows)
    for i, f in enumerate(flows):
        if f.shape != (height, width):
            raise ValueError(f"flow {i} has shape {f.shape}, expected {(height, width)}")
    K = flows.frame_count
    rng = np.random.default_rng(seed)
    n_cells = height * width

    # per trajectory: list of flat cell indices, start frame, stop reason
    paths: list[list[int]] = [[c] for c in range(n_cells)]
    starts: list[int] = [0] * n_cells
    reasons: list[str] = [COMPLETED] * n_cells
    live = np.arange(n_cells, dtype=np.int64)  # trajectory ids, aligned with heads
    heads = np.arange(n_cells, dtype=np.int64)  # flat cell of each live head

    for k in range(K - 1):
        f = flows[k]
        hy, hx = np.divmod(heads, width)
        nx = round_half_away(hx + np.asarray(f.fx, dtype=np.float64)[hy, hx])
        ny = round_half_away(hy + np.asarray(f.fy, dtype=np.float64)[hy, hx])
        inside = (nx >= 0) & (nx < width) & (ny >= 0) & (ny < height)
        for tid in live[~inside]:
            reasons[tid] = OUT_OF_BOUNDS

        ids = live[inside]
        targets = ny[inside] * width + nx[inside]
        # stable sort keeps trajectory-id order within each target cell
        perm = np.argsort(targets, kind="stable")
        ids, targets = ids[perm], targets[perm]
        cells, first, counts = np.unique(targets, return_index=True, return_counts=True)
        winners = ids[first].copy()
        for g in np.flatnonzero(counts > 1):
            members = ids[first[g] : first[g] + counts[g]]
            pick = int(rng.integers(len(members)))
            winners[g] = members[pick]
            for j, tid in enumerate(members):
                if j != pick:
                    reasons[tid] = OCCLUDED

        claimed = np.zeros(n_cells, dtype=bool)
        claimed[cells] = True
        for tid, cell in zip(winners.tolist(), cells.tolist()):
            paths[tid].append(cell)
        fresh = np.flatnonzero(~claimed)
        for cell in fresh.tolist():
            paths.append([cell])
            starts.append(k + 1)
            reasons.append(COMPLETED)
        new_ids = np.arange(len(paths) - len(fresh), len(paths), dtype=np.int64)

        live = np.concatenate([winners, new_ids])
        heads = np.concatenate([cells, fresh])
        order = np.argsort(live, kind="stable")
        live, heads = live[order], heads[order]

    trajs = []
    for tid, (cells, start, reason) in enumerate(zip(paths, starts, reasons)):
        patches = tuple(
            PatchRef(start + i, c % width, c // width) for i, c in enumerate(cells)
        )
        trajs.append(Trajectory(tid, patches, reason))
    return TrajectorySet(tuple(trajs), K, height, width)


@dataclass
class PartitionReport:
    ok: bool
    missing: list[PatchRef]
    duplicated: list[PatchRef]
    out_of_range: list[PatchRef]
    total_length: int

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "total_length": self.total_length,
            "missing": [list(p) for p in self.missing],
            "duplicated": [list(p) for p in self.duplicated],
            "out_of_range": [list(p) for p in self.out_of_range],
        }


def validate_partition(tset: TrajectorySet) -> PartitionReport:
    """Check that every grid patch is owned by exactly one trajectory, once."""
    K, H, W = tset.frame_count, tset.height, tset.width
    counts = np.zeros((K, H, W), dtype=np.int64)
    out_of_range = []
    total = 0
    for t in tset.trajectories:
        for p in t.patches:
            total += 1
            if 0 <= p.frame < K and 0 <= p.x < W and 0 <= p.y < H:
                counts[p.frame, p.y, p.x] += 1
            else:
                out_of_range.append(p)
    missing = [PatchRef(int(k), int(x), int(y)) for k, y, x in np.argwhere(counts == 0)]
    duplicated = [PatchRef(int(k), int(x), int(y)) for k, y, x in np.argwhere(counts > 1)]
    ok = not (missing or duplicated or out_of_range)
    return PartitionReport(ok, missing, duplicated, out_of_range, total)


def render_trajectories(
    tset: TrajectorySet,
    sample_count: int,
    frames: Iterable[np.ndarray] | None = None,
    seed: int = 0,
    cell: int = 8,
    color: tuple[int, int, int] = (255, 0, 0),
) -> list[np.ndarray]:
    """Draw a random sample of trajectories as dots, one uint8 RGB image per frame.

    Without ``frames`` a gray canvas of ``cell`` pixels per patch is used. With
    ``frames`` (K images of any size divisible by the grid), each patch maps to
    its block of pixels and the dot is drawn at the block centre.
    """
    if sample_count < 0 or sample_count > len(tset):
        raise ValueError(
            f"sample_count {sample_count} outside [0, {len(tset)}] available trajectories"
        )
    K, H, W = tset.frame_count, tset.height, tset.width
    if frames is None:
        images = [np.full((H * cell, W * cell, 3), 64, dtype=np.uint8) for _ in range(K)]
    else:
        images = [_to_rgb8(f) for f in frames]
        if len(images) != K:
            raise ValueError(f"got {len(images)} frames for a {K}-frame trajectory set")
    ih, iw = images[0].shape[:2]
    if ih % H or iw % W:
        raise ValueError(f"frame size {iw}x{ih} is not a multiple of the {W}x{H} grid")
    sy, sx = ih // H, iw // W
    ry, rx = max(sy // 4, 0), max(sx // 4, 0)

    rng = np.random.default_rng(seed)
    picks = rng.choice(len(tset), size=sample_count, replace=False) if sample_count else []
    for i in sorted(int(i) for i in picks):
        for p in tset.trajectories[i].patches:
            cy, cx = p.y * sy + sy // 2, p.x * sx + sx // 2
            images[p.frame][
                max(cy - ry, 0) : cy + ry + 1, max(cx - rx, 0) : cx + rx + 1
            ] = color
    return images


def _to_rgb8(frame: np.ndarray) -> np.ndarray:
    a = np.asarray(frame)
    if a.dtype != np.uint8:
        a = (np.clip(a, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=-1)
    elif a.shape[-1] == 1:
        a = np.repeat(a, 3, axis=-1)
    return a.copy()
