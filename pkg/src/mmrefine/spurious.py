"""Velocity-adaptive spatial stability checking of radar point clouds.

Frames ``1..F-1`` are earlier frames; ``transforms[i-1]`` maps frame-``i``
coordinates into the current frame 0 and ``delta_ts[i-1] = t_0 - t_i > 0``.
Every frame-0 point counts its neighbours in the superimposed cloud within a
range that grows with the relative speed of its class; points with a count
strictly below the nearest-rank percentile are flagged as spurious.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IoFailure, NonPositiveDt
from .geometry import RigidTransform
from .spatial import GridIndex

BACKGROUND = 0
UNKNOWN = -1
FRAME_COLUMNS = ("x", "y", "z", "label", "spurious")


@dataclass(eq=False)
class PointCloudFrame:
    """Radar points with per-point labels: 0 background, j > 0 object j, -1 unknown."""

    timestamp: float
    points: np.ndarray
    labels: np.ndarray | None = None
    spurious_flag: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        n = len(self.points)
        self.labels = np.zeros(n, dtype=np.int64) if self.labels is None else np.asarray(self.labels, dtype=np.int64)
        if self.spurious_flag is None:
            self.spurious_flag = np.zeros(n, dtype=bool)
        self.spurious_flag = np.asarray(self.spurious_flag, dtype=bool)
        if self.labels.shape != (n,) or self.spurious_flag.shape != (n,):
            raise ValueError("labels and spurious_flag must have one entry per point")
        if np.any(self.labels < UNKNOWN):
            raise ValueError("labels must be -1 (unknown), 0 (background) or a positive object id")

    def __len__(self):
        return len(self.points)

    @property
    def object_ids(self) -> list[int]:
        return sorted(int(j) for j in np.unique(self.labels) if j > 0)


@dataclass(eq=False)
class StabilityContext:
    """Inputs of one stability check.

    ``object_translations[j]`` holds, for each earlier frame ``i``, the
    displacement of object ``j`` from time ``t_i`` to ``t_0`` expressed in
    frame 0, shape ``(F-1, 3)``; NaN rows mark unknown displacements.  ``adaptive=False`` pins every range to ``d0``.
    """

    frames: list[PointCloudFrame]
    transforms: list[RigidTransform]
    delta_ts: np.ndarray
    object_translations: dict[int, np.ndarray] = field(default_factory=dict)
    d0: float = 0.5
    percentile: float = 5.0
    adaptive: bool = True

    def __post_init__(self):
        self.delta_ts = np.asarray(self.delta_ts, dtype=float).reshape(-1)
        F = len(self.frames)
        if F < 2:
            raise ValueError(f"a stability context needs at least 2 frames, got {F}")
        if len(self.transforms) != F - 1 or len(self.delta_ts) != F - 1:
            raise ValueError("need one transform and one delta_t per earlier frame")
        if np.any(self.delta_ts <= 0):
            raise NonPositiveDt("every delta_t must be positive")
        if not self.d0 > 0:
            raise ValueError("d0 must be positive")
        if not 0 < self.percentile <= 100:
            raise ValueError("percentile must lie in (0, 100]")
        declared = {int(j) for j in self.object_translations}
        for fr in self.frames:
            undeclared = set(fr.object_ids) - declared
            if undeclared and self.object_translations:
                raise ValueError(f"labels reference undeclared objects {sorted(undeclared)}")
        self.object_translations = {
            int(j): np.asarray(v, dtype=float).reshape(F - 1, 3) for j, v in self.object_translations.items()
        }

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def time_span(self) -> float:
        """Sum of the per-step intervals between consecutive frames, i.e. ``t_0 - t_{F-1}``."""
        steps = np.diff(np.concatenate([[0.0], self.delta_ts]))
        return float(np.sum(steps))


def radar_velocity(T: RigidTransform, dt: float) -> np.ndarray:
    """``translation(T) / dt``."""
    if not dt > 0:
        raise NonPositiveDt(f"dt must be positive, got {dt}")
    return T.translation / dt


def dynamic_point_velocity(dd, dt: float, v_radar) -> np.ndarray:
    """Velocity of an object relative to the radar, ``v_radar - dd / dt``."""
    if not dt > 0:
        raise NonPositiveDt(f"dt must be positive, got {dt}")
    return np.asarray(v_radar, dtype=float) - np.asarray(dd, dtype=float) / dt


def _ego_velocity(T_i0: RigidTransform, dt: float) -> np.ndarray:
    # T_i0 holds the earlier radar position in frame 0, so the motion towards frame 0 is its negation
    return -radar_velocity(T_i0, dt)


def neighborhood_ranges(ctx: StabilityContext) -> tuple[float, dict[int, float]]:
    """Background range ``d_b`` and per-object ranges ``d_j``, all at least ``d0``."""
    objects = sorted(set(ctx.object_translations) | {j for fr in ctx.frames for j in fr.object_ids})
    if not ctx.adaptive:
        return ctx.d0, {j: ctx.d0 for j in objects}
    vb = []
    vd: dict[int, list[np.ndarray]] = {j: [] for j in objects}
    for i in range(1, ctx.n_frames):
        dt = ctx.delta_ts[i - 1]
        v = _ego_velocity(ctx.transforms[i - 1], dt)
        vb.append(v)
        present = ctx.frames[i].object_ids
        for j in present:
            dd = ctx.object_translations.get(j)
            if dd is not None and np.all(np.isfinite(dd[i - 1])):
                vd[j].append(dynamic_point_velocity(dd[i - 1], dt, v))
    span = ctx.time_span
    d_b = max(ctx.d0, 0.5 * float(np.linalg.norm(np.mean(vb, axis=0))) * span)
    d_j = {
        j: max(ctx.d0, 0.5 * float(np.linalg.norm(np.mean(vs, axis=0))) * span) if vs else ctx.d0
        for j, vs in vd.items()
    }
    return d_b, d_j


def superimpose(ctx: StabilityContext) -> tuple[np.ndarray, np.ndarray]:
    """All points mapped into frame 0, plus the source-frame index of each point."""
    pts = [ctx.frames[0].points]
    src = [np.zeros(len(ctx.frames[0]), dtype=np.int64)]
    for i in range(1, ctx.n_frames):
        pts.append(ctx.transforms[i - 1].apply(ctx.frames[i].points))
        src.append(np.full(len(ctx.frames[i]), i, dtype=np.int64))
    return np.concatenate(pts).reshape(-1, 3), np.concatenate(src)


def point_ranges(ctx: StabilityContext) -> np.ndarray:
    """Neighbourhood range of every frame-0 point according to its class."""
    d_b, d_j = neighborhood_ranges(ctx)
    labels = ctx.frames[0].labels
    r = np.full(len(labels), d_b)
    for j, d in d_j.items():
        r[labels == j] = d
    return r


def neighbor_counts(ctx: StabilityContext) -> np.ndarray:
    """Neighbours of each frame-0 point in the superimposed cloud, the point itself excluded."""
    cloud, _ = superimpose(ctx)
    q = ctx.frames[0].points
    ranges = point_ranges(ctx)
    counts = np.zeros(len(q), dtype=np.int64)
    for r in np.unique(ranges):
        sel = ranges == r
        counts[sel] = GridIndex(cloud, r).count_within(q[sel], r) - 1
    return counts


def nearest_rank_percentile(values, percentile: float):
    """Nearest-rank percentile: the smallest value with at least ``percentile``% of samples at or below it."""
    v = np.sort(np.asarray(values).reshape(-1))
    if not len(v):
        raise ValueError("percentile of an empty sample")
    rank = max(1, math.ceil(percentile / 100.0 * len(v)))
    return v[rank - 1]


def mark_spurious(ctx: StabilityContext) -> PointCloudFrame:
    """Copy of frame 0 with ``spurious_flag`` set on weakly supported points."""
    f0 = ctx.frames[0]
    flags = np.zeros(len(f0), dtype=bool)
    if len(f0):
        counts = neighbor_counts(ctx)
        flags = counts < nearest_rank_percentile(counts, ctx.percentile)
    return PointCloudFrame(f0.timestamp, f0.points.copy(), f0.labels.copy(), flags)


def write_frame(frame: PointCloudFrame, path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(FRAME_COLUMNS)
            for p, lab, s in zip(frame.points, frame.labels, frame.spurious_flag):
                w.writerow([f"{p[0]:.17g}", f"{p[1]:.17g}", f"{p[2]:.17g}", int(lab), int(s)])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_frame(path, timestamp: float = 0.0) -> PointCloudFrame:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if not rows or tuple(rows[0]) != FRAME_COLUMNS:
        raise ValueError(f"{path}: expected header {','.join(FRAME_COLUMNS)}")
    body = rows[1:]
    pts = np.array([r[:3] for r in body], dtype=float).reshape(-1, 3)
    labels = np.array([int(r[3]) for r in body], dtype=np.int64)
    flags = np.array([r[4] == "1" for r in body], dtype=bool)
    return PointCloudFrame(timestamp, pts, labels, flags)


def write_frames(frames: list[PointCloudFrame], directory, prefix: str = "frame") -> list[Path]:
    """One CSV per frame plus a ``frames.json`` sidecar with index, timestamp and file name."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {directory}: {exc}") from exc
    paths, entries = [], []
    for k, fr in enumerate(frames):
        p = directory / f"{prefix}_{k:05d}.csv"
        write_frame(fr, p)
        paths.append(p)
        entries.append({"index": k, "timestamp": fr.timestamp, "file": p.name})
    side = directory / "frames.json"
    try:
        side.write_text(json.dumps({"frames": entries}, indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {side}: {exc}") from exc
    return paths + [side]


def read_frames(directory) -> list[PointCloudFrame]:
    directory = Path(directory)
    side = directory / "frames.json"
    try:
        entries = json.loads(side.read_text())["frames"]
    except OSError as exc:
        raise IoFailure(f"cannot read {side}: {exc}") from exc
    return [read_frame(directory / e["file"], float(e["timestamp"])) for e in sorted(entries, key=lambda e: e["index"])]
