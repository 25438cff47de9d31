"""Deterministic synthetic scenes with full ground truth.

World frame: the camera frame at ``t = 0`` (x right, y down, z forward).  The
radar is co-located with the camera, so radar clouds are expressed in camera
coordinates; :func:`radar_to_camera` converts detector output (x right,
y forward, z up) into that frame.  Rigid objects only translate.

Randomness: NumPy's PCG64 bit generator seeded through ``SeedSequence`` with
``spawn_key = (purpose, frame)``, so each purpose and frame owns an
independent, reproducible stream regardless of evaluation order.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cfar import RangeDopplerMatrix, read_rdm, write_rdm
from .config import Reader, key_line
from .errors import InvalidConfig, IoFailure
from .geometry import CameraIntrinsics, FeatureTrack, RigidTransform, project
from .rigid_motion import PoseStream, ScenePointSet, _exp
from .spurious import PointCloudFrame, read_frames, write_frames

logger = logging.getLogger(__name__)

# stream purposes for SeedSequence spawn keys
_S_LAYOUT, _S_RADAR, _S_TRACKS, _S_FLOW, _S_POSES, _S_RDM, _S_MIRROR = range(7)

REAL, MIRROR = 0, 1
GROUPS = ("clouds", "tracks", "flow", "poses", "rdm", "truth")

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "duration": 1.0,
    "frame_rate": 10.0,
    "intrinsics": {"fx": 460.0, "fy": 460.0, "cx": 320.0, "cy": 240.0},
    "image_size": [640, 480],
    "camera": {"type": "constant_velocity", "velocity": [0.0, 0.0, 5.0], "angular_velocity": [0.0, 0.0, 0.0]},
    "background": {"points": 800, "x": [-15.0, 15.0], "y": [-3.0, 1.0], "z": [6.0, 45.0]},
    "objects": [
        {"shape": "box", "size": [1.8, 1.5, 4.2], "points": 120, "position": [-3.5, 0.75, 14.0], "velocity": [0.0, 0.0, 9.0]},
        {"shape": "box", "size": [1.8, 1.5, 4.2], "points": 120, "position": [4.0, 0.75, 24.0], "velocity": [-1.0, 0.0, -6.0]},
    ],
    "reflectors": [
        {"point": [0.0, 1.5, 0.0], "normal": [0.0, 1.0, 0.0]},
        {"point": [17.0, 0.0, 0.0], "normal": [1.0, 0.0, 0.0]},
    ],
    "pixel_noise_sigma": 0.0,
    "flow_noise_sigma": 0.0,
    "label_flip_prob": 0.0,
    "spurious_fraction": 0.1,
    "mirror_persistence": 0.2,
    "detection_prob": 1.0,
    "radar_noise_sigma": 0.02,
    "vi_noise_sigma": 0.05,
    "drift_rate": 0.1,
    "drift_direction": None,
    "inertial_rate": 100.0,
    "radar": {
        "enabled": True,
        "range_res": 0.2,
        "doppler_res": 0.25,
        "R": 256,
        "D": 64,
        "noise_power": 1.0,
        "target_snr_db": 12.0,
        "snr_jitter_db": 6.0,
        "max_range": 50.0,
        "fov_azimuth_deg": 60.0,
        "fov_elevation_deg": 35.0,
    },
}


# ----------------------------------------------------------------------------- config


PRESETS: dict[str, dict] = {
    "default": {},
    # many moving objects and twice the mirror rate; used for the module ablation
    "dynamic_heavy": {
        "background": {"points": 400},
        "spurious_fraction": 0.2,
        "objects": [
            {"shape": "box", "size": [1.8, 1.5, 4.2], "points": 200, "position": [-3.5, 0.75, 14.0], "velocity": [0.0, 0.0, 9.0]},
            {"shape": "box", "size": [1.8, 1.5, 4.2], "points": 200, "position": [4.0, 0.75, 24.0], "velocity": [-1.0, 0.0, -6.0]},
            {"shape": "box", "size": [1.8, 1.5, 4.2], "points": 200, "position": [0.5, 0.75, 30.0], "velocity": [0.0, 0.0, 12.0]},
            {"shape": "sphere", "size": 1.2, "points": 150, "position": [-7.0, -0.5, 20.0], "velocity": [1.5, 0.0, 0.0]},
        ],
    },
    # background only, no mirrors
    "static": {"objects": [], "spurious_fraction": 0.0},
    # no scatterers at all: radar matrices hold noise only
    "noise_only": {"objects": [], "background": {"points": 0}, "spurious_fraction": 0.0},
}


def preset_config(name: str, **overrides) -> dict:
    if name not in PRESETS:
        raise InvalidConfig(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    cfg = default_config(**copy.deepcopy(PRESETS[name]))
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k].update(v)
        else:
            cfg[k] = v
    return cfg




@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    size: tuple
    points: int
    position: np.ndarray
    velocity: np.ndarray


@dataclass(frozen=True)
class Reflector:
    point: np.ndarray
    normal: np.ndarray

    def reflect(self, x: np.ndarray) -> np.ndarray:
        d = (x - self.point) @ self.normal
        return x - 2.0 * d[..., None] * self.normal


@dataclass(eq=False)
class SceneConfig:
    """Validated scene description; build with :meth:`from_dict` or :meth:`load`."""

    raw: dict
    seed: int
    duration: float
    frame_rate: float
    intrinsics: CameraIntrinsics
    image_size: tuple[int, int]
    camera: dict
    background: dict
    objects: list[ObjectSpec]
    reflectors: list[Reflector]
    pixel_noise_sigma: float
    flow_noise_sigma: float
    label_flip_prob: float
    spurious_fraction: float
    mirror_persistence: float
    detection_prob: float
    radar_noise_sigma: float
    vi_noise_sigma: float
    drift_rate: float
    drift_direction: np.ndarray | None
    inertial_rate: float
    radar: dict

    @property
    def n_frames(self) -> int:
        return int(np.floor(self.duration * self.frame_rate + 1e-9)) + 1

    @property
    def frame_times(self) -> np.ndarray:
        return np.arange(self.n_frames) / self.frame_rate

    @classmethod
    def load(cls, path) -> SceneConfig:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise IoFailure(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    @classmethod
    def from_text(cls, text: str) -> SceneConfig:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"malformed JSON: {exc.msg}", exc.lineno) from exc
        if not isinstance(data, dict):
            raise InvalidConfig("top level must be a JSON object", 1)
        return cls.from_dict(data, text)

    @classmethod
    def from_dict(cls, data: dict, text: str | None = None) -> SceneConfig:
        return _parse(data, text)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def default_config(**overrides) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k].update(v)
        else:
            cfg[k] = v
    return cfg


def _parse(user: dict, text: str | None) -> SceneConfig:
    unknown = set(user) - set(DEFAULT_CONFIG)
    if unknown:
        key = sorted(unknown)[0]
        raise InvalidConfig(f"unknown key {key!r}", key_line(text, (key,)))
    data = default_config()
    for k, v in user.items():
        if isinstance(v, dict) and isinstance(data.get(k), dict) and k not in ("camera",):
            data[k] = {**data[k], **v}
        else:
            data[k] = v
    r = Reader(data, text)
    seed = r.number(("seed",), lo=0, hi=2**64 - 1, integer=True)
    duration = r.number(("duration",), lo=0, lo_open=True)
    rate = r.number(("frame_rate",), lo=0, lo_open=True)
    if duration < 2.0 / rate - 1e-12:
        r.fail(("duration",), f"must be at least 2/frame_rate = {2.0 / rate}")
    for k in ("fx", "fy"):
        r.number(("intrinsics", k), lo=0, lo_open=True)
    for k in ("cx", "cy"):
        r.number(("intrinsics", k))
    K = CameraIntrinsics(*(float(data["intrinsics"][k]) for k in ("fx", "fy", "cx", "cy")))
    image_size = r.vector(("image_size",), 2)
    cam = data["camera"]
    if not isinstance(cam, dict) or cam.get("type") not in ("constant_velocity", "waypoints"):
        r.fail(("camera", "type"), "must be 'constant_velocity' or 'waypoints'")
    if cam["type"] == "constant_velocity":
        cam = {
            "type": "constant_velocity",
            "velocity": r.vector(("camera", "velocity")),
            "angular_velocity": r.vector(("camera", "angular_velocity")) if "angular_velocity" in cam else np.zeros(3),
        }
    else:
        wps = cam.get("waypoints")
        if not isinstance(wps, list) or len(wps) < 2:
            r.fail(("camera", "waypoints"), "need at least two [t, x, y, z, rx, ry, rz] rows")
        rows = [r.vector(("camera", "waypoints", i), 7) for i in range(len(wps))]
        ts = np.array([w[0] for w in rows])
        if np.any(np.diff(ts) <= 0) or ts[0] > 0 or ts[-1] < duration:
            r.fail(("camera", "waypoints"), "timestamps must increase and cover [0, duration]")
        cam = {"type": "waypoints", "waypoints": np.array(rows)}
    bg = data["background"]
    r.number(("background", "points"), lo=0, integer=True)
    for k in ("x", "y", "z"):
        lim = r.vector(("background", k), 2)
        if lim[1] < lim[0]:
            r.fail(("background", k), "range must be [low, high]")
    objects = []
    if not isinstance(data["objects"], list):
        r.fail(("objects",), "must be a list")
    for i, o in enumerate(data["objects"]):
        if not isinstance(o, dict):
            r.fail(("objects", i), "must be an object")
        shape = o.get("shape", "box")
        if shape not in ("box", "sphere"):
            r.fail(("objects", i, "shape"), "must be 'box' or 'sphere'")
        n = r.number(("objects", i, "points"), lo=20, hi=200, integer=True)
        dims = r.vector(("objects", i, "size"), 3) if shape == "box" else np.array([r.number(("objects", i, "size"), lo=0, lo_open=True)] * 3)
        objects.append(ObjectSpec(shape, tuple(dims), n, r.vector(("objects", i, "position")), r.vector(("objects", i, "velocity"))))
    reflectors = []
    for i, ref in enumerate(data["reflectors"]):
        nrm = r.vector(("reflectors", i, "normal"))
        if np.linalg.norm(nrm) == 0:
            r.fail(("reflectors", i, "normal"), "must be non-zero")
        reflectors.append(Reflector(r.vector(("reflectors", i, "point")), nrm / np.linalg.norm(nrm)))
    probs = {}
    for k in ("label_flip_prob", "spurious_fraction", "mirror_persistence", "detection_prob"):
        probs[k] = float(r.number((k,), lo=0, hi=1))
    if probs["spurious_fraction"] > 0 and not reflectors:
        r.fail(("spurious_fraction",), "mirror points need at least one reflector")
    sig = {k: float(r.number((k,), lo=0)) for k in ("pixel_noise_sigma", "flow_noise_sigma", "radar_noise_sigma", "vi_noise_sigma", "drift_rate")}
    drift_dir = None
    if data["drift_direction"] is not None:
        drift_dir = r.vector(("drift_direction",))
        if np.linalg.norm(drift_dir) == 0:
            r.fail(("drift_direction",), "must be non-zero")
        drift_dir = drift_dir / np.linalg.norm(drift_dir)
    inertial_rate = r.number(("inertial_rate",), lo=0, lo_open=True)
    if inertial_rate < rate:
        r.fail(("inertial_rate",), "must be at least frame_rate")
    rad = data["radar"]
    if not isinstance(rad.get("enabled"), bool):
        r.fail(("radar", "enabled"), "must be true or false")
    for k in ("range_res", "doppler_res", "noise_power", "max_range", "fov_azimuth_deg", "fov_elevation_deg"):
        r.number(("radar", k), lo=0, lo_open=True)
    for k in ("R", "D"):
        r.number(("radar", k), lo=8, integer=True)
    for k in ("target_snr_db", "snr_jitter_db"):
        r.number(("radar", k))
    return SceneConfig(
        raw=_jsonable(data),
        seed=int(seed),
        duration=float(duration),
        frame_rate=float(rate),
        intrinsics=K,
        image_size=(int(image_size[0]), int(image_size[1])),
        camera=cam,
        background=bg,
        objects=objects,
        reflectors=reflectors,
        drift_direction=drift_dir,
        inertial_rate=float(inertial_rate),
        radar=dict(rad),
        **probs,
        **sig,
    )


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


# ----------------------------------------------------------------------------- generation


def _rng(seed: int, purpose: int, frame: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(purpose, frame))))


def camera_pose(cfg: SceneConfig, t: float) -> RigidTransform:
    """World-from-camera pose at time ``t``."""
    cam = cfg.camera
    if cam["type"] == "constant_velocity":
        return RigidTransform(_exp(cam["angular_velocity"] * t), cam["velocity"] * t)
    wps = cam["waypoints"]
    stream = PoseStream(wps[:, 0], [RigidTransform(_exp(w[4:7]), w[1:4]) for w in wps])
    return stream.interpolate(t)


def radar_to_camera(points) -> np.ndarray:
    """Detector coordinates (x right, y forward, z up) to camera coordinates (x right, y down, z forward)."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    return np.stack([p[:, 0], -p[:, 2], p[:, 1]], axis=1)


def camera_to_radar(points) -> np.ndarray:
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    return np.stack([p[:, 0], p[:, 2], -p[:, 1]], axis=1)


def _sample_shape(rng: np.random.Generator, spec: ObjectSpec) -> np.ndarray:
    n = spec.points
    if spec.shape == "sphere":
        v = rng.normal(size=(n, 3))
        return 0.5 * spec.size[0] * v / np.linalg.norm(v, axis=1, keepdims=True)
    half = 0.5 * np.array(spec.size)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-half, half, size=(n, 3))
    sign = rng.choice([-1.0, 1.0], size=n)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


@dataclass(eq=False)
class Scatterers:
    """World-frame scatterer layout: static background plus translating objects."""

    background: np.ndarray
    object_offsets: list[np.ndarray]
    objects: list[ObjectSpec]

    def positions(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """All scatterer positions at time ``t`` and their labels (0 background, j object)."""
        pts = [self.background]
        labels = [np.zeros(len(self.background), dtype=np.int64)]
        for j, (off, spec) in enumerate(zip(self.object_offsets, self.objects), start=1):
            pts.append(spec.position + spec.velocity * t + off)
            labels.append(np.full(len(off), j, dtype=np.int64))
        return np.concatenate(pts).reshape(-1, 3), np.concatenate(labels)

    def velocities(self, labels: np.ndarray) -> np.ndarray:
        v = np.zeros((len(labels), 3))
        for j, spec in enumerate(self.objects, start=1):
            v[labels == j] = spec.velocity
        return v


def _layout(cfg: SceneConfig) -> Scatterers:
    rng = _rng(cfg.seed, _S_LAYOUT)
    bg = cfg.background
    n = int(bg["points"])
    lo = np.array([bg["x"][0], bg["y"][0], bg["z"][0]], dtype=float)
    hi = np.array([bg["x"][1], bg["y"][1], bg["z"][1]], dtype=float)
    background = rng.uniform(lo, hi, size=(n, 3)) if n else np.zeros((0, 3))
    offsets = [_sample_shape(rng, spec) for spec in cfg.objects]
    return Scatterers(background, offsets, list(cfg.objects))


@dataclass(eq=False)
class TrackSet:
    """Feature tracks of one frame pair with their ground truth."""

    tracks: list[FeatureTrack]
    positions: np.ndarray  # true P in the previous camera frame
    pose: RigidTransform  # previous-camera to current-camera coordinates
    translations: dict[int, np.ndarray]  # true dd per object, previous camera frame

    def by_object(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for i, t in enumerate(self.tracks):
            out.setdefault(t.object_id, []).append(i)
        return out


@dataclass(eq=False)
class RadarFrameTruth:
    kind: np.ndarray  # REAL or MIRROR per radar point
    source: np.ndarray  # scatterer index of the real point or of the mirror's source
    reflector: np.ndarray  # reflector index, -1 for real points
    cloud: np.ndarray  # noiseless visible scatterers, sensor frame
    cloud_labels: np.ndarray


@dataclass(eq=False)
class Scene:
    config: SceneConfig
    times: np.ndarray
    camera_poses: list[RigidTransform]
    frames: list[PointCloudFrame]
    radar_truth: list[RadarFrameTruth]
    track_sets: list[TrackSet]
    flows: list[ScenePointSet]
    truth_stream: PoseStream
    vi_stream: PoseStream
    inertial_stream: PoseStream
    rdms: list[RangeDopplerMatrix] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def relative(self, i: int, j: int) -> RigidTransform:
        """True transform taking frame-``j`` sensor coordinates into frame ``i``."""
        return self.camera_poses[i].inverse().compose(self.camera_poses[j])


def _in_fov(cfg: SceneConfig, pts_cam: np.ndarray) -> np.ndarray:
    rad = cfg.radar
    rng_ = np.linalg.norm(pts_cam, axis=1)
    az = np.degrees(np.arctan2(pts_cam[:, 0], pts_cam[:, 2]))
    el = np.degrees(np.arctan2(-pts_cam[:, 1], np.hypot(pts_cam[:, 0], pts_cam[:, 2])))
    return (
        (pts_cam[:, 2] > 0)
        & (rng_ <= rad["max_range"])
        & (np.abs(az) <= rad["fov_azimuth_deg"])
        & (np.abs(el) <= rad["fov_elevation_deg"])
    )


def _radar_frames(cfg: SceneConfig, sc: Scatterers, poses: list[RigidTransform], times: np.ndarray):
    frames, truths = [], []
    prev_mirrors: list[tuple[int, int]] = []
    n_ref = len(cfg.reflectors)
    for k, (t, T) in enumerate(zip(times, poses)):
        rng = _rng(cfg.seed, _S_RADAR, k)
        mrng = _rng(cfg.seed, _S_MIRROR, k)
        world, labels = sc.positions(t)
        cam = T.inverse().apply(world)
        vis = np.nonzero(_in_fov(cfg, cam))[0]
        det = vis[rng.random(len(vis)) < cfg.detection_prob]
        real = cam[det] + rng.normal(0.0, cfg.radar_noise_sigma, size=(len(det), 3))

        n_mirror = int(round(cfg.spurious_fraction * len(det))) if n_ref and len(det) else 0
        mirrors: list[tuple[int, int]] = []
        detected = set(det.tolist())
        # persistence is re-drawn for each mirror of the previous frame
        for src, ref in prev_mirrors:
            if len(mirrors) < n_mirror and mrng.random() < cfg.mirror_persistence and src in detected:
                mirrors.append((src, ref))
        while len(mirrors) < n_mirror:
            mirrors.append((int(det[mrng.integers(len(det))]), int(mrng.integers(n_ref))))
        prev_mirrors = mirrors
        if mirrors:
            src = np.array([m[0] for m in mirrors])
            ref = np.array([m[1] for m in mirrors])
            mw = np.array([cfg.reflectors[r].reflect(world[s]) for s, r in zip(src, ref)])
            mpts = T.inverse().apply(mw) + rng.normal(0.0, cfg.radar_noise_sigma, size=(len(src), 3))
        else:
            src = ref = np.zeros(0, dtype=np.int64)
            mpts = np.zeros((0, 3))
        pts = np.concatenate([real, mpts]).reshape(-1, 3)
        lab = np.concatenate([labels[det], np.zeros(len(src), dtype=np.int64)])
        frames.append(PointCloudFrame(float(t), pts, lab))
        truths.append(
            RadarFrameTruth(
                kind=np.concatenate([np.full(len(det), REAL), np.full(len(src), MIRROR)]).astype(np.int64),
                source=np.concatenate([det, src]).astype(np.int64),
                reflector=np.concatenate([np.full(len(det), -1), ref]).astype(np.int64),
                cloud=cam[vis],
                cloud_labels=labels[vis],
            )
        )
    return frames, truths


def _track_sets(cfg: SceneConfig, sc: Scatterers, poses, times) -> list[TrackSet]:
    K = cfg.intrinsics
    w, h = cfg.image_size
    out = []
    for k in range(len(times) - 1):
        rng = _rng(cfg.seed, _S_TRACKS, k)
        T0, T1 = poses[k], poses[k + 1]
        pair = T1.inverse().compose(T0)
        w0, labels = sc.positions(times[k])
        w1, _ = sc.positions(times[k + 1])
        P = T0.inverse().apply(w0)
        Y = T1.inverse().apply(w1)
        ok = (P[:, 2] > 0.5) & (Y[:, 2] > 0.5)
        idx = np.nonzero(ok)[0]
        p = project(K, P[idx]) if len(idx) else np.zeros((0, 3))
        q = project(K, Y[idx]) if len(idx) else np.zeros((0, 3))
        noise = rng.normal(0.0, cfg.pixel_noise_sigma, size=(len(idx), 4))
        p[:, :2] += noise[:, :2]
        q[:, :2] += noise[:, 2:]
        inside = (p[:, 0] >= 0) & (p[:, 0] < w) & (p[:, 1] >= 0) & (p[:, 1] < h)
        inside &= (q[:, 0] >= 0) & (q[:, 0] < w) & (q[:, 1] >= 0) & (q[:, 1] < h)
        sel = idx[inside]
        tracks = [FeatureTrack(a, b, int(labels[i])) for a, b, i in zip(p[inside], q[inside], sel)]
        dt = times[k + 1] - times[k]
        trans = {j: T0.rotation.T @ (spec.velocity * dt) for j, spec in enumerate(cfg.objects, start=1)}
        out.append(TrackSet(tracks, P[sel], pair, trans))
    return out


def _flows(cfg: SceneConfig, frames, truths, sc: Scatterers, poses, times) -> list[ScenePointSet]:
    out = []
    for k in range(len(times) - 1):
        rng = _rng(cfg.seed, _S_FLOW, k)
        real = truths[k].kind == REAL
        pts = frames[k].points[real]
        labels = frames[k].labels[real]
        dt = times[k + 1] - times[k]
        pair = poses[k + 1].inverse().compose(poses[k])
        moved = pts + (poses[k].rotation.T @ sc.velocities(labels).T).T * dt
        flow = pair.apply(moved) - pts + rng.normal(0.0, cfg.flow_noise_sigma, size=pts.shape)
        moving = labels > 0
        flip = rng.random(len(pts)) < cfg.label_flip_prob
        prob = np.where(moving ^ flip, 0.95, 0.05)
        out.append(ScenePointSet(pts, flow, prob))
    return out


def _pose_streams(cfg: SceneConfig, times: np.ndarray):
    rng = _rng(cfg.seed, _S_POSES)
    truth = PoseStream(times, [camera_pose(cfg, t) for t in times])
    direction = cfg.drift_direction
    if direction is None:
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
    ti = np.arange(int(np.floor(cfg.duration * cfg.inertial_rate + 1e-9)) + 1) / cfg.inertial_rate
    if ti[-1] < times[-1]:
        ti = np.append(ti, times[-1])
    inertial = []
    for t in ti:
        T = camera_pose(cfg, t)
        inertial.append(RigidTransform(T.rotation, T.translation + direction * cfg.drift_rate * t))
    vi = [RigidTransform(T.rotation, T.translation + rng.normal(0.0, cfg.vi_noise_sigma, 3)) for T in truth.poses]
    return truth, PoseStream(times, vi), PoseStream(ti, inertial)


def _rdms(cfg: SceneConfig, frames, truths, sc: Scatterers, poses, times) -> list[RangeDopplerMatrix]:
    rad = cfg.radar
    R, D = int(rad["R"]), int(rad["D"])
    out = []
    for k, T in enumerate(poses):
        rng = _rng(cfg.seed, _S_RDM, k)
        power = rng.exponential(rad["noise_power"], size=(R, D))
        az = rng.uniform(-np.radians(rad["fov_azimuth_deg"]), np.radians(rad["fov_azimuth_deg"]), size=(R, D))
        el = rng.uniform(-np.radians(rad["fov_elevation_deg"]), np.radians(rad["fov_elevation_deg"]), size=(R, D))
        pts = frames[k].points
        if len(pts):
            # sensor velocity from the pose finite difference, world velocity of each scatterer
            j = min(k + 1, len(times) - 1)
            i = j - 1
            v_cam = (poses[j].translation - poses[i].translation) / (times[j] - times[i])
            src_labels = np.where(truths[k].kind == REAL, frames[k].labels, 0)
            v_rel = T.rotation.T @ (sc.velocities(src_labels) - v_cam).T
            rng_m = np.linalg.norm(pts, axis=1)
            radial = np.einsum("ij,ji->i", pts / np.maximum(rng_m, 1e-9)[:, None], v_rel)
            rb = np.rint(rng_m / rad["range_res"]).astype(int)
            db = np.rint(radial / rad["doppler_res"]).astype(int) + D // 2
            keep = (rb >= 0) & (rb < R) & (db >= 0) & (db < D)
            snr = rad["target_snr_db"] + rng.uniform(-0.5, 0.5, size=len(pts)) * rad["snr_jitter_db"]
            radar_pts = camera_to_radar(pts)
            for n in np.nonzero(keep)[0]:
                r_, d_ = rb[n], db[n]
                power[r_, d_] += rad["noise_power"] * 10.0 ** (snr[n] / 10.0)
                x, y, z = radar_pts[n]
                az[r_, d_] = np.arctan2(x, y)
                el[r_, d_] = np.arctan2(z, np.hypot(x, y))
        out.append(RangeDopplerMatrix(power, rad["range_res"], rad["doppler_res"], az, el))
    return out


def generate(config: SceneConfig | dict) -> Scene:
    """Generate every observation of a scene together with its ground truth."""
    cfg = config if isinstance(config, SceneConfig) else SceneConfig.from_dict(config)
    times = cfg.frame_times
    sc = _layout(cfg)
    poses = [camera_pose(cfg, t) for t in times]
    frames, truths = _radar_frames(cfg, sc, poses, times)
    tracks = _track_sets(cfg, sc, poses, times)
    flows = _flows(cfg, frames, truths, sc, poses, times)
    truth_stream, vi, inertial = _pose_streams(cfg, times)
    rdms = _rdms(cfg, frames, truths, sc, poses, times) if cfg.radar["enabled"] else []
    return Scene(cfg, times, poses, frames, truths, tracks, flows, truth_stream, vi, inertial, rdms)


def pose_streams(config: SceneConfig | dict) -> tuple[PoseStream, PoseStream, PoseStream]:
    """Only the (truth, visual-inertial, drifting inertial) pose streams of a scene.

    Identical to the streams :func:`generate` returns for the same config.
    """
    cfg = config if isinstance(config, SceneConfig) else SceneConfig.from_dict(config)
    return _pose_streams(cfg, cfg.frame_times)


# ----------------------------------------------------------------------------- export / import

_TRACK_COLUMNS = ("u_p", "v_p", "u_q", "v_q", "object_id")
_FLOW_COLUMNS = ("x", "y", "z", "fx", "fy", "fz", "moving_prob")
_TRUTH_POINT_COLUMNS = ("x", "y", "z", "object_id")
_PROVENANCE_COLUMNS = ("kind", "source", "reflector")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def _write_csv(path: Path, header, rows) -> None:
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _read_csv(path: Path, header) -> np.ndarray:
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if not rows or tuple(rows[0]) != tuple(header):
        raise ValueError(f"{path}: expected header {','.join(header)}")
    return np.array(rows[1:], dtype=float).reshape(-1, len(header))


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _pose_rows(T: RigidTransform) -> list[float]:
    return T.as_matrix()[:3].ravel().tolist()


def export(scene: Scene, directory) -> dict:
    """Write the scene under ``directory`` and return the manifest (also written as manifest.json)."""
    root = Path(directory)
    try:
        for g in GROUPS:
            (root / g).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create scene directory {root}: {exc}") from exc
    files: list[Path] = []
    files += write_frames(scene.frames, root / "clouds")
    for k, ts in enumerate(scene.track_sets):
        p = root / "tracks" / f"pair_{k:05d}.csv"
        _write_csv(p, _TRACK_COLUMNS, ([*t.prev_pixel[:2], *t.curr_pixel[:2], t.object_id] for t in ts.tracks))
        files.append(p)
        p = root / "truth" / f"features_{k:05d}.csv"
        _write_csv(p, _TRUTH_POINT_COLUMNS, ([*x, t.object_id] for x, t in zip(ts.positions, ts.tracks)))
        files.append(p)
    for k, fl in enumerate(scene.flows):
        p = root / "flow" / f"pair_{k:05d}.csv"
        _write_csv(p, _FLOW_COLUMNS, ([*a, *b, m] for a, b, m in zip(fl.points, fl.flow, fl.moving_prob)))
        files.append(p)
    for name, stream in (("camera", scene.truth_stream), ("vi", scene.vi_stream), ("inertial", scene.inertial_stream)):
        p = root / "poses" / f"{name}.csv"
        stream.to_csv(p)
        files.append(p)
    for k, rdm in enumerate(scene.rdms):
        files += write_rdm(rdm, root / "rdm", f"frame_{k:05d}")
    for k, rt in enumerate(scene.radar_truth):
        p = root / "truth" / f"provenance_{k:05d}.csv"
        _write_csv(p, _PROVENANCE_COLUMNS, zip(rt.kind, rt.source, rt.reflector))
        files.append(p)
        p = root / "truth" / f"cloud_{k:05d}.csv"
        _write_csv(p, _TRUTH_POINT_COLUMNS, ([*x, lab] for x, lab in zip(rt.cloud, rt.cloud_labels)))
        files.append(p)
    truth = {
        "config": scene.config.to_dict(),
        "intrinsics": scene.config.intrinsics.to_dict(),
        "image_size": list(scene.config.image_size),
        "times": scene.times.tolist(),
        "pairs": [
            {
                "pose": _pose_rows(ts.pose),
                "translations": {str(j): v.tolist() for j, v in ts.translations.items()},
            }
            for ts in scene.track_sets
        ],
        "reflectors": [{"point": r.point.tolist(), "normal": r.normal.tolist()} for r in scene.config.reflectors],
    }
    p = root / "truth" / "truth.json"
    try:
        p.write_text(json.dumps(truth, indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {p}: {exc}") from exc
    files.append(p)
    return write_manifest(root, files, {"kind": "scene", "seed": scene.config.seed, "frames": scene.n_frames})


def write_manifest(root: Path, files, extra: dict | None = None) -> dict:
    """Write ``manifest.json`` listing every file with its SHA-256, grouped by top-level directory."""
    root = Path(root)
    rel = sorted({Path(f).resolve().relative_to(root.resolve()).as_posix() for f in files})
    groups: dict[str, list[str]] = {}
    for r in rel:
        groups.setdefault(r.split("/")[0] if "/" in r else ".", []).append(r)
    manifest = {**(extra or {}), "groups": groups, "files": {r: sha256(root / r) for r in rel}}
    try:
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest in {root}: {exc}") from exc
    return manifest


def verify_manifest(root) -> list[str]:
    """Relative paths whose current hash differs from the manifest (empty when intact)."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    return [r for r, h in manifest["files"].items() if not (root / r).exists() or sha256(root / r) != h]


@dataclass(eq=False)
class LoadedScene:
    """Everything :func:`load_scene` reads back from an exported scene directory."""

    root: Path
    intrinsics: CameraIntrinsics
    image_size: tuple[int, int]
    times: np.ndarray
    frames: list[PointCloudFrame]
    track_sets: list[TrackSet]
    flows: list[ScenePointSet]
    camera_stream: PoseStream
    vi_stream: PoseStream
    inertial_stream: PoseStream
    truth_clouds: list[np.ndarray]
    provenance: list[np.ndarray]
    rdm_paths: list[Path]
    config: dict

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def load_scene(directory) -> LoadedScene:
    """Re-import an exported scene.

    Raises:
        FileNotFoundError: a required file is missing.
        ValueError: a file is malformed.
    """
    root = Path(directory)
    for req in ("truth/truth.json", "clouds/frames.json", "poses/camera.csv", "poses/vi.csv", "poses/inertial.csv"):
        if not (root / req).is_file():
            raise FileNotFoundError(f"missing scene file {root / req}")
    truth = json.loads((root / "truth" / "truth.json").read_text())
    K = CameraIntrinsics(**truth["intrinsics"])
    times = np.array(truth["times"], dtype=float)
    frames = read_frames(root / "clouds")
    track_sets, flows = [], []
    for k, pair in enumerate(truth["pairs"]):
        tr = _read_csv(root / "tracks" / f"pair_{k:05d}.csv", _TRACK_COLUMNS)
        ft = _read_csv(root / "truth" / f"features_{k:05d}.csv", _TRUTH_POINT_COLUMNS)
        tracks = [FeatureTrack(r[0:2], r[2:4], int(r[4])) for r in tr]
        pose = RigidTransform.from_matrix(np.vstack([np.array(pair["pose"]).reshape(3, 4), [0, 0, 0, 1]]))
        trans = {int(j): np.array(v) for j, v in pair["translations"].items()}
        track_sets.append(TrackSet(tracks, ft[:, :3], pose, trans))
        fl = _read_csv(root / "flow" / f"pair_{k:05d}.csv", _FLOW_COLUMNS)
        flows.append(ScenePointSet(fl[:, 0:3], fl[:, 3:6], fl[:, 6]))
    clouds, prov = [], []
    for k in range(len(frames)):
        c = _read_csv(root / "truth" / f"cloud_{k:05d}.csv", _TRUTH_POINT_COLUMNS)
        clouds.append(c[:, :3])
        prov.append(_read_csv(root / "truth" / f"provenance_{k:05d}.csv", _PROVENANCE_COLUMNS).astype(np.int64))
    rdm_paths = sorted((root / "rdm").glob("frame_*.json")) if (root / "rdm").is_dir() else []
    return LoadedScene(
        root=root,
        intrinsics=K,
        image_size=tuple(truth["image_size"]),
        times=times,
        frames=frames,
        track_sets=track_sets,
        flows=flows,
        camera_stream=PoseStream.from_csv(root / "poses" / "camera.csv"),
        vi_stream=PoseStream.from_csv(root / "poses" / "vi.csv"),
        inertial_stream=PoseStream.from_csv(root / "poses" / "inertial.csv"),
        truth_clouds=clouds,
        provenance=prov,
        rdm_paths=rdm_paths,
        config=truth["config"],
    )


def load_rdms(paths) -> list[RangeDopplerMatrix]:
    return [read_rdm(p) for p in paths]
