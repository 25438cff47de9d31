"""End-to-end refinement of radar clouds on an exported scene.

Per frame pair: dynamic reconstruction of every object (or plain static
triangulation when disabled), Kabsch ego-motion from scene flow, and EKF
fusion of the two pose streams as pseudo ground truth.  Per frame: the
spatial stability filter over the last ``F`` frames, then metrics of the
enhanced cloud (radar points plus visual points) against the true cloud.
"""

from __future__ import annotations

import copy
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Reader, merge, parse_json
from .errors import EmptyCloud, EmptyTruth, InvalidConfig, IoFailure, MMRefineError
from .geometry import RigidTransform
from .metrics import evaluate
from .reconstruction import (
    ReconstructionProblem,
    SolverOptions,
    positions_given_translation,
    solve,
    subset_indices,
    triangulate_midpoint,
)
from .rigid_motion import EKFOptions, ekf_fuse, kabsch, relative_transform, select_static, transform_consistency_loss
from .sim import MIRROR, LoadedScene, load_scene, write_manifest
from .spurious import PointCloudFrame, StabilityContext, mark_spurious, write_frame

logger = logging.getLogger(__name__)

DEFAULT_RUN: dict = {
    "scene": None,
    "dynamic_reconstruction": True,
    "spurious_filter": True,
    "camera_pose_source": "camera",
    "transform_source": "kabsch",
    "solver": {"max_iter": 200, "depth_prior": 10.0, "range_prior": True, "range_prior_sigma": 0.1, "max_features": 30},
    "triangulation": {"min_parallax_deg": 1.0},
    "filter": {"frames": 5, "d0": 0.5, "percentile": 5.0, "adaptive": True, "velocity_source": "reconstruction"},
    "metrics": {"delta": 1.0},
    "ekf": {"sigma_prop": 0.02, "sigma_meas": 0.05},
    "cfar": {"detector": "ca", "guard": 1, "train": 2, "k": None, "pfa": 1e-3, "offsets_db": [1, 2, 3, 4, 5, 6, 7, 8]},
}

ABLATION = (("dvir1_pr1", True, True), ("dvir1_pr0", True, False), ("dvir0_pr1", False, True), ("dvir0_pr0", False, False))


@dataclass(eq=False)
class RunConfig:
    raw: dict

    def __getitem__(self, key):
        return self.raw[key]

    @classmethod
    def from_text(cls, text: str) -> RunConfig:
        return cls.from_dict(parse_json(text), text)

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise IoFailure(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    @classmethod
    def from_dict(cls, user: dict | None = None, text: str | None = None) -> RunConfig:
        data = merge(copy.deepcopy(DEFAULT_RUN), user or {}, text)
        r = Reader(data, text)
        for key in ("dynamic_reconstruction", "spurious_filter", "solver.range_prior", "filter.adaptive"):
            path = tuple(key.split("."))
            if not isinstance(r.get(path), bool):
                r.fail(path, "must be true or false")
        choices = {
            ("camera_pose_source",): ("camera", "fused"),
            ("transform_source",): ("kabsch", "fused", "truth"),
            ("filter", "velocity_source"): ("reconstruction", "truth"),
            ("cfar", "detector"): ("ca", "os"),
        }
        for path, allowed in choices.items():
            if r.get(path) not in allowed:
                r.fail(path, f"must be one of {', '.join(allowed)}")
        r.number(("solver", "max_iter"), lo=1, integer=True)
        r.number(("solver", "depth_prior"), lo=0, lo_open=True)
        r.number(("solver", "range_prior_sigma"), lo=0, lo_open=True)
        r.number(("solver", "max_features"), lo=2, integer=True)
        r.number(("triangulation", "min_parallax_deg"), lo=0)
        r.number(("filter", "frames"), lo=2, integer=True)
        r.number(("filter", "d0"), lo=0, lo_open=True)
        r.number(("filter", "percentile"), lo=0, hi=100, lo_open=True)
        r.number(("metrics", "delta"), lo=0, lo_open=True)
        r.number(("ekf", "sigma_prop"), lo=0, lo_open=True)
        r.number(("ekf", "sigma_meas"), lo=0, lo_open=True)
        r.number(("cfar", "guard"), lo=0, integer=True)
        r.number(("cfar", "train"), lo=1, integer=True)
        r.number(("cfar", "pfa"), lo=0, hi=1, lo_open=True)
        if data["cfar"]["k"] is not None:
            r.number(("cfar", "k"), lo=1, integer=True)
        if not isinstance(data["cfar"]["offsets_db"], list) or not data["cfar"]["offsets_db"]:
            r.fail(("cfar", "offsets_db"), "must be a non-empty list of numbers")
        for i in range(len(data["cfar"]["offsets_db"])):
            r.number(("cfar", "offsets_db", i))
        if data["scene"] is not None and not isinstance(data["scene"], str):
            r.fail(("scene",), "must be a path string")
        return cls(data)

    def with_toggles(self, dvir: bool, pr: bool) -> RunConfig:
        raw = copy.deepcopy(self.raw)
        raw["dynamic_reconstruction"] = dvir
        raw["spurious_filter"] = pr
        return RunConfig(raw)


@dataclass(eq=False)
class ObjectResult:
    object_id: int
    positions: np.ndarray
    translation: np.ndarray | None
    status: str
    fallback: bool


@dataclass(eq=False)
class PairResult:
    """Visual points of one frame pair, expressed in the current (later) camera frame."""

    points: np.ndarray
    labels: np.ndarray
    objects: dict[int, ObjectResult] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)


def _parallax_ok(K, T: RigidTransform, prev_pixels, curr_pixels, min_deg: float) -> np.ndarray:
    a = K.normalize(prev_pixels)
    b = K.normalize(curr_pixels) @ T.rotation
    cos = np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))) >= min_deg


def _triangulate(K, T, prev_pixels, curr_pixels, min_parallax: float) -> np.ndarray:
    """Static-world points in the previous frame; rays without parallax or behind a camera are dropped."""
    P, valid = triangulate_midpoint(K, T, prev_pixels, curr_pixels)
    valid &= _parallax_ok(K, T, prev_pixels, curr_pixels, min_parallax)
    P = P[valid]
    return P[(P[:, 2] > 0) & (T.apply(P)[:, 2] > 0)]


def _object_range_prior(scene: LoadedScene, frame: int, object_id: int, pixels: np.ndarray, gate_px: float = 10.0) -> float | None:
    """Mean radar range of the object's points nearest (in the image) to the given feature pixels."""
    fr = scene.frames[frame]
    pts = fr.points[fr.labels == object_id]
    pts = pts[pts[:, 2] > 0]
    if not len(pts) or not len(pixels):
        return None
    K = scene.intrinsics
    uv = np.stack([K.fx * pts[:, 0] / pts[:, 2] + K.cx, K.fy * pts[:, 1] / pts[:, 2] + K.cy], axis=1)
    d2 = np.sum((pixels[:, None, :2] - uv[None]) ** 2, axis=2)
    nearest = np.argmin(d2, axis=1)
    hit = d2[np.arange(len(pixels)), nearest] <= gate_px**2
    if not np.any(hit):
        return None
    return float(np.mean(np.linalg.norm(pts[nearest[hit]], axis=1)))


def process_pair(scene: LoadedScene, k: int, pose: RigidTransform, cfg: RunConfig) -> PairResult:
    """Visual points of pair ``(k, k+1)`` in frame ``k+1`` coordinates."""
    K = scene.intrinsics
    ts = scene.track_sets[k]
    min_par = cfg["triangulation"]["min_parallax_deg"]
    sopts = SolverOptions(
        max_iter=cfg["solver"]["max_iter"],
        depth_prior=cfg["solver"]["depth_prior"],
        range_prior_sigma=cfg["solver"]["range_prior_sigma"],
    )
    pts, labels, objects, failures = [], [], {}, []
    for oid, idx in sorted(ts.by_object().items()):
        tracks = [ts.tracks[i] for i in idx]
        prev = np.array([t.prev_pixel for t in tracks])
        curr = np.array([t.curr_pixel for t in tracks])
        if oid == 0 or not cfg["dynamic_reconstruction"]:
            P = _triangulate(K, pose, prev, curr, min_par)
            pts.append(pose.apply(P))
            labels.append(np.full(len(P), oid))
            continue
        sub = subset_indices(len(tracks), cfg["solver"]["max_features"])
        prior = _object_range_prior(scene, k, oid, prev[sub]) if cfg["solver"]["range_prior"] else None
        try:
            sol = solve(ReconstructionProblem([tracks[i] for i in sub], K, pose, prior), sopts)
            ok = sol.converged
            status = sol.status
        except MMRefineError as exc:
            ok, status, sol = False, type(exc).__name__, None
        if ok:
            # the solved translation fixes every remaining feature of the object
            P, valid = positions_given_translation(K, pose, prev, curr, sol.translation)
            P[sub] = sol.positions
            valid[sub] = True
            P = P[valid]
            Q = pose.apply(P + sol.translation)
            objects[oid] = ObjectResult(oid, P, sol.translation, status, False)
        else:
            # fall back to the static-world interpretation of this object
            failures.append(f"pair {k} object {oid}: {status}, static triangulation used")
            logger.info("pair %d object %d: %s; falling back to static triangulation", k, oid, status)
            P = _triangulate(K, pose, prev, curr, min_par)
            Q = pose.apply(P)
            objects[oid] = ObjectResult(oid, P, None, status, True)
        pts.append(Q)
        labels.append(np.full(len(Q), oid))
    points = np.concatenate(pts).reshape(-1, 3) if pts else np.zeros((0, 3))
    lab = np.concatenate(labels).astype(np.int64) if labels else np.zeros(0, dtype=np.int64)
    return PairResult(points, lab, objects, failures)


def _poses(stream, times) -> list[RigidTransform]:
    return [stream.interpolate(t) for t in times]


def _pair_kabsch(scene: LoadedScene, k: int, fallback: RigidTransform) -> tuple[RigidTransform, str | None]:
    try:
        src, dst = select_static(scene.flows[k])
        return kabsch(src, dst), None
    except MMRefineError as exc:
        return fallback, f"pair {k}: {type(exc).__name__}, fused transform used"


def _chain(steps: list[RigidTransform], frame: int, earlier: int) -> RigidTransform:
    """Transform taking frame ``earlier`` coordinates into frame ``frame`` from per-step transforms."""
    T = RigidTransform.identity()
    for n in range(earlier, frame):
        T = steps[n].compose(T)
    return T


def _object_translations(scene, pairs, cam_poses, frame: int, earlier: list[int], source: str) -> dict[int, np.ndarray]:
    """Object displacement from each earlier frame to ``frame``, in ``frame`` coordinates (NaN when unknown)."""
    ids = sorted({j for ts in scene.track_sets for j in ts.translations} | {j for p in pairs for j in p.objects})
    out = {}
    for j in ids:
        rows = []
        for m in earlier:
            total = np.zeros(3)
            for n in range(m, frame):
                if source == "truth":
                    d = scene.track_sets[n].translations.get(j)
                else:
                    res = pairs[n].objects.get(j)
                    d = None if res is None or res.fallback else res.translation
                if d is None:
                    total = np.full(3, np.nan)
                    break
                R = cam_poses[frame].rotation.T @ cam_poses[n].rotation
                total = total + R @ d
            rows.append(total)
        out[j] = np.array(rows)
    return out


def run_scene(scene: LoadedScene, cfg: RunConfig, threads: int = 1) -> dict:
    """Run the enabled stages on every frame with a predecessor; returns per-frame and aggregate results."""
    times = scene.times
    n = scene.n_frames
    fused = ekf_fuse(
        scene.vi_stream,
        scene.inertial_stream,
        EKFOptions(sigma_prop=cfg["ekf"]["sigma_prop"], sigma_meas=cfg["ekf"]["sigma_meas"]),
    )
    fused_poses = _poses(fused, times)
    cam_stream = scene.camera_stream if cfg["camera_pose_source"] == "camera" else fused
    cam_poses = _poses(cam_stream, times)
    pair_poses = [cam_poses[k + 1].inverse().compose(cam_poses[k]) for k in range(n - 1)]

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        pairs = list(pool.map(lambda k: process_pair(scene, k, pair_poses[k], cfg), range(n - 1)))

    # radar ego-motion per step: maps frame-k coordinates into frame k+1
    fused_steps = [relative_transform(fused, times[k + 1], times[k]) for k in range(n - 1)]
    steps, notes, losses = [], [], []
    for k in range(n - 1):
        if cfg["transform_source"] == "kabsch":
            T, note = _pair_kabsch(scene, k, fused_steps[k])
        elif cfg["transform_source"] == "fused":
            T, note = fused_steps[k], None
        else:
            T, note = relative_transform(scene.camera_stream, times[k + 1], times[k]), None
        steps.append(T)
        notes.append(note)
        pts = scene.flows[k].points
        losses.append(transform_consistency_loss(fused_steps[k], T, pts) if len(pts) else None)

    def frame_job(k: int) -> dict:
        return _process_frame(scene, cfg, k, pairs, steps, cam_poses, notes, losses)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        frames = list(pool.map(frame_job, range(1, n)))
    return {"frames": frames, "aggregate": _aggregate(frames, cfg)}


def _process_frame(scene, cfg, k, pairs, steps, cam_poses, notes, losses) -> dict:
    fr = scene.frames[k]
    failures = list(pairs[k - 1].failures)
    if notes[k - 1]:
        failures.append(notes[k - 1])
    flags = np.zeros(len(fr), dtype=bool)
    if cfg["spurious_filter"] and len(fr):
        F = min(cfg["filter"]["frames"], k + 1)
        earlier = [k - i for i in range(1, F)]
        ctx = StabilityContext(
            frames=[fr] + [scene.frames[m] for m in earlier],
            transforms=[_chain(steps, k, m) for m in earlier],
            delta_ts=[scene.times[k] - scene.times[m] for m in earlier],
            object_translations=_object_translations(scene, pairs, cam_poses, k, earlier, cfg["filter"]["velocity_source"]),
            d0=cfg["filter"]["d0"],
            percentile=cfg["filter"]["percentile"],
            adaptive=cfg["filter"]["adaptive"],
        )
        flags = mark_spurious(ctx).spurious_flag
    vi = pairs[k - 1]
    radar_kept = fr.points[~flags]
    enhanced = np.concatenate([radar_kept, vi.points]).reshape(-1, 3)
    labels = np.concatenate([fr.labels[~flags], vi.labels]).astype(np.int64)

    record = {
        "frame": k,
        "timestamp": float(scene.times[k]),
        "radar_points": int(len(fr)),
        "visual_points": int(len(vi.points)),
        "flagged": int(flags.sum()),
        "transform_loss": losses[k - 1],
        "objects": {str(j): {"status": o.status, "fallback": o.fallback} for j, o in sorted(vi.objects.items())},
        "failures": failures,
        "_radar": PointCloudFrame(fr.timestamp, fr.points, fr.labels, flags),
        "_enhanced": PointCloudFrame(fr.timestamp, enhanced, labels),
    }
    prov = scene.provenance[k]
    if len(prov) == len(fr):
        mirror = prov[:, 0] == MIRROR
        tp = int(np.sum(flags & mirror))
        record["spurious_recall"] = tp / int(mirror.sum()) if mirror.any() else None
        record["spurious_precision"] = tp / int(flags.sum()) if flags.any() else None
    try:
        record["metrics"] = evaluate(enhanced, scene.truth_clouds[k], cfg["metrics"]["delta"]).to_dict()
    except (EmptyTruth, EmptyCloud) as exc:
        record["metrics"] = None
        failures.append(f"frame {k}: metrics skipped ({exc})")
    return record


def _aggregate(frames: list[dict], cfg: RunConfig) -> dict:
    scored = [f["metrics"] for f in frames if f["metrics"] is not None]
    agg = {
        "dynamic_reconstruction": cfg["dynamic_reconstruction"],
        "spurious_filter": cfg["spurious_filter"],
        "frames": len(frames),
        "scored_frames": len(scored),
        "failures": sum(len(f["failures"]) for f in frames),
    }
    if scored:
        for key in ("rpcdl", "clutter_count", "chamfer", "modified_hausdorff"):
            agg[key] = float(np.mean([m[key] for m in scored]))
    rec = [f["spurious_recall"] for f in frames if f.get("spurious_recall") is not None]
    prec = [f["spurious_precision"] for f in frames if f.get("spurious_precision") is not None]
    agg["spurious_recall"] = float(np.mean(rec)) if rec and cfg["spurious_filter"] else None
    agg["spurious_precision"] = float(np.mean(prec)) if prec and cfg["spurious_filter"] else None
    losses = [f["transform_loss"] for f in frames if f["transform_loss"] is not None]
    agg["transform_loss"] = float(np.mean(losses)) if losses else None
    return agg


def _dump(path: Path, obj) -> Path:
    try:
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def write_run(result: dict, cfg: RunConfig, out_dir) -> dict:
    """Write per-frame reports, clouds, ``aggregate.json`` and the manifest of one run."""
    out = Path(out_dir)
    try:
        (out / "frames").mkdir(parents=True, exist_ok=True)
        (out / "clouds").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create run directory {out}: {exc}") from exc
    files = [_dump(out / "run_config.json", cfg.raw)]
    for f in result["frames"]:
        k = f["frame"]
        p = out / "clouds" / f"radar_{k:05d}.csv"
        write_frame(f["_radar"], p)
        files.append(p)
        p = out / "clouds" / f"enhanced_{k:05d}.csv"
        write_frame(f["_enhanced"], p)
        files.append(p)
        files.append(_dump(out / "frames" / f"frame_{k:05d}.json", {k2: v for k2, v in f.items() if not k2.startswith("_")}))
    files.append(_dump(out / "aggregate.json", result["aggregate"]))
    return write_manifest(out, files, {"kind": "run"})


def _scene(cfg: RunConfig, scene) -> LoadedScene:
    if isinstance(scene, LoadedScene):
        return scene
    scene = scene or cfg["scene"]
    if scene is None:
        raise InvalidConfig("no scene directory given (config key 'scene' or --scene)")
    return load_scene(scene)


def run(cfg: RunConfig, out_dir, scene=None, threads: int = 1) -> dict:
    """Run one configuration on ``scene`` (a loaded scene or its directory) and write the results."""
    result = run_scene(_scene(cfg, scene), cfg, threads)
    write_run(result, cfg, out_dir)
    return result["aggregate"]


def run_ablation(cfg: RunConfig, out_dir, scene=None, threads: int = 1) -> dict:
    """The four on/off combinations of the two modules, each in its own sub-directory."""
    scene = _scene(cfg, scene)
    out = Path(out_dir)
    summary = {}
    for name, dvir, pr in ABLATION:
        sub = cfg.with_toggles(dvir, pr)
        result = run_scene(scene, sub, threads)
        write_run(result, sub, out / name)
        summary[name] = result["aggregate"]
    files = [_dump(out / "ablation.json", summary)]
    files += [out / name / "manifest.json" for name, _, _ in ABLATION]
    write_manifest(out, files, {"kind": "ablation"})
    return summary
