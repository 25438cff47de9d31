"""Radar ego-motion: Kabsch registration, the transform-consistency metric,
pose-stream interpolation and error-state EKF fusion of two pose sources.

Poses in a :class:`PoseStream` are world-from-body: ``x_world = R x_body + t``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import (
    DegenerateConfiguration,
    EmptyPointSet,
    IoFailure,
    NonMonotonicTimestamps,
    NoTemporalOverlap,
    OutOfRange,
    TooFewStatic,
)
from .geometry import RigidTransform

logger = logging.getLogger(__name__)

MOVING_THRESHOLD = 0.5
_COLLINEAR_TOL = 1e-9
_TIME_EPS = 1e-9
POSE_COLUMNS = ("timestamp", "tx", "ty", "tz", "qx", "qy", "qz", "qw")


@dataclass(eq=False)
class ScenePointSet:
    """Radar points of the previous frame with predicted flow and moving probability."""

    points: np.ndarray
    flow: np.ndarray
    moving_prob: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.flow = np.asarray(self.flow, dtype=float).reshape(-1, 3)
        self.moving_prob = np.asarray(self.moving_prob, dtype=float).reshape(-1)
        m = len(self.points)
        if len(self.flow) != m or len(self.moving_prob) != m:
            raise ValueError("points, flow and moving_prob must have equal length")
        if np.any((self.moving_prob < 0) | (self.moving_prob > 1)):
            raise ValueError("moving_prob values must lie in [0, 1]")


def select_static(points: ScenePointSet) -> tuple[np.ndarray, np.ndarray]:
    """Correspondences ``(p_i, p_i + f_i)`` of points whose moving probability is below 0.5."""
    static = points.moving_prob < MOVING_THRESHOLD
    if np.count_nonzero(static) < 3:
        raise TooFewStatic(f"need at least 3 static points, got {np.count_nonzero(static)}")
    src = points.points[static]
    return src, src + points.flow[static]


def kabsch(src, dst, weights=None) -> RigidTransform:
    """Weighted least-squares rigid transform with ``dst ~ R @ src + t``.

    Raises:
        DegenerateConfiguration: fewer than three points, or the cross-covariance
            has rank below two (collinear correspondences).
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError("src and dst must have the same shape")
    if len(src) < 3:
        raise DegenerateConfiguration(f"need at least 3 correspondences, got {len(src)}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if len(w) != len(src) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum, one per point")
    w = w / w.sum()
    cs = w @ src
    cd = w @ dst
    H = (src - cs).T @ ((dst - cd) * w[:, None])
    U, S, Vt = np.linalg.svd(H)
    if S[1] < _COLLINEAR_TOL * S[0] or S[0] == 0:
        raise DegenerateConfiguration("correspondences are collinear")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, cd - R @ cs)


def registration_cost(T: RigidTransform, src, dst, weights=None) -> float:
    """Weighted sum of squared alignment residuals ``||R src + t - dst||^2``."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    r = T.apply(src) - dst
    return float(np.sum(w * np.sum(r * r, axis=1)))


def transform_consistency_loss(T_truth: RigidTransform, T_hat: RigidTransform, points) -> float:
    """Mean over points of ``||(R^T R_hat - I) p + t - t_hat||`` in meters."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(p) == 0:
        raise EmptyPointSet("transform_consistency_loss needs at least one point")
    R, R_hat = T_truth.rotation, T_hat.rotation
    # R^T (R_hat p - R p) equals (R^T R_hat - I) p and is exactly zero when the rotations coincide
    e = (p @ R_hat.T - p @ R.T) @ R + (T_truth.translation - T_hat.translation)
    return float(np.mean(np.linalg.norm(e, axis=1)))


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    return float(np.arctan2(s, c))


def _exp(phi: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(phi).as_matrix()


def _log(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


@dataclass(eq=False)
class PoseStream:
    """Timestamped world-from-body poses with strictly increasing timestamps."""

    timestamps: np.ndarray = field(default_factory=lambda: np.zeros(0))
    poses: list[RigidTransform] = field(default_factory=list)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.poses = list(self.poses)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses must have equal length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise NonMonotonicTimestamps("pose timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    @property
    def span(self) -> tuple[float, float]:
        if not len(self):
            raise NoTemporalOverlap("empty pose stream")
        return float(self.timestamps[0]), float(self.timestamps[-1])

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def interpolate(self, t: float) -> RigidTransform:
        """Pose at ``t``: linear in translation, spherical-linear in rotation."""
        if not len(self):
            raise OutOfRange("cannot interpolate an empty stream")
        t0, t1 = self.span
        if t < t0 - _TIME_EPS or t > t1 + _TIME_EPS:
            raise OutOfRange(f"time {t} outside stream span [{t0}, {t1}]")
        k = int(np.searchsorted(self.timestamps, t, side="right")) - 1
        k = min(max(k, 0), len(self) - 1)
        if k == len(self) - 1 or abs(t - self.timestamps[k]) <= _TIME_EPS:
            return self.poses[k]
        a, b = self.poses[k], self.poses[k + 1]
        alpha = (t - self.timestamps[k]) / (self.timestamps[k + 1] - self.timestamps[k])
        if abs(self.timestamps[k + 1] - t) <= _TIME_EPS:
            return b
        R = a.rotation @ _exp(alpha * _log(a.rotation.T @ b.rotation))
        return RigidTransform(R, (1 - alpha) * a.translation + alpha * b.translation)

    def to_csv(self, path) -> None:
        path = Path(path)
        try:
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(POSE_COLUMNS)
                for ts, T in zip(self.timestamps, self.poses):
                    q = Rotation.from_matrix(T.rotation).as_quat()
                    w.writerow([f"{v:.17g}" for v in (ts, *T.translation, *q)])
        except OSError as exc:
            raise IoFailure(f"cannot write {path}: {exc}") from exc

    @classmethod
    def from_csv(cls, path) -> PoseStream:
        path = Path(path)
        try:
            with path.open(newline="") as fh:
                rows = list(csv.reader(fh))
        except OSError as exc:
            raise IoFailure(f"cannot read {path}: {exc}") from exc
        if not rows or tuple(rows[0]) != POSE_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(POSE_COLUMNS)}")
        data = np.array(rows[1:], dtype=float).reshape(-1, 8)
        poses = [RigidTransform(Rotation.from_quat(r[4:8]).as_matrix(), r[1:4]) for r in data]
        return cls(data[:, 0], poses)


def relative_transform(stream: PoseStream, t_a: float, t_b: float) -> RigidTransform:
    """Transform taking body coordinates at ``t_b`` into body coordinates at ``t_a``.

    ``relative_transform(s, a, b).compose(relative_transform(s, b, c))`` equals
    ``relative_transform(s, a, c)``.
    """
    if t_a == t_b:
        stream.interpolate(t_a)
        return RigidTransform.identity()
    return stream.interpolate(t_a).inverse().compose(stream.interpolate(t_b))


@dataclass(frozen=True)
class EKFOptions:
    """Noise densities of the fusion filter.

    ``sigma_prop`` (m/sqrt(s)) and ``sigma_rot_prop`` (rad/sqrt(s)) inflate the
    propagated pose; ``sigma_bias`` (m/s/sqrt(s)) lets the inertial velocity bias
    wander; ``sigma_meas``/``sigma_rot_meas`` describe the visual-inertial poses.
    """

    sigma_prop: float = 0.02
    sigma_rot_prop: float = 1e-3
    sigma_bias: float = 1e-3
    sigma_meas: float = 0.05
    sigma_rot_meas: float = 0.01
    sigma_bias0: float = 0.5


@dataclass(eq=False)
class FusionResult:
    stream: PoseStream
    prior_trace: np.ndarray
    posterior_trace: np.ndarray
    bias: np.ndarray


def ekf_fuse(vi: PoseStream, inertial: PoseStream, opts: EKFOptions | None = None, details: bool = False):
    """Fuse a drift-free but noisy pose stream with a smooth drifting one.

    Nominal state: pose ``(R, p)`` and a world-frame velocity bias ``b`` of the
    inertial stream.  Error state ``[dp, dtheta, db]`` with ``R = R_hat Exp(dtheta)``.
    Between consecutive ``vi`` timestamps the inertial relative motion is applied
    to the nominal pose and ``b dt`` is removed from the displacement; every
    ``vi`` pose is then a position and orientation measurement (Joseph-form
    update).  Output is sampled at the ``vi`` timestamps inside the overlap.

    Returns the fused :class:`PoseStream`, or a :class:`FusionResult` when
    ``details`` is true.
    """
    opts = opts or EKFOptions()
    if not len(vi) or not len(inertial):
        raise NoTemporalOverlap("both pose streams must be non-empty")
    lo = max(vi.span[0], inertial.span[0])
    hi = min(vi.span[1], inertial.span[1])
    keep = (vi.timestamps >= lo - _TIME_EPS) & (vi.timestamps <= hi + _TIME_EPS)
    if hi < lo or not np.any(keep):
        raise NoTemporalOverlap(f"vi span {vi.span} and inertial span {inertial.span} do not overlap")
    times = vi.timestamps[keep]
    meas = [p for p, k in zip(vi.poses, keep) if k]

    R = meas[0].rotation.copy()
    p = meas[0].translation.copy()
    b = np.zeros(3)
    Pcov = np.diag([opts.sigma_meas**2] * 3 + [opts.sigma_rot_meas**2] * 3 + [opts.sigma_bias0**2] * 3)
    Rm = np.diag([opts.sigma_meas**2] * 3 + [opts.sigma_rot_meas**2] * 3)
    H = np.hstack([np.eye(6), np.zeros((6, 3))])
    I9 = np.eye(9)

    out = [RigidTransform(R, p)]
    prior_tr = [np.trace(Pcov)]
    post_tr = [np.trace(Pcov)]
    prev_t = times[0]
    for t, z in zip(times[1:], meas[1:]):
        dt = t - prev_t
        dT = relative_transform(inertial, prev_t, t)
        prev_t = t
        # propagate
        F = I9.copy()
        F[0:3, 3:6] = -R @ _skew(dT.translation)
        F[0:3, 6:9] = -dt * np.eye(3)
        F[3:6, 3:6] = dT.rotation.T
        p = p + R @ dT.translation - b * dt
        R = R @ dT.rotation
        Q = np.diag([opts.sigma_prop**2 * dt] * 3 + [opts.sigma_rot_prop**2 * dt] * 3 + [opts.sigma_bias**2 * dt] * 3)
        Pcov = F @ Pcov @ F.T + Q
        prior_tr.append(np.trace(Pcov))
        # update
        r = np.concatenate([z.translation - p, _log(R.T @ z.rotation)])
        S = H @ Pcov @ H.T + Rm
        Kg = np.linalg.solve(S, H @ Pcov).T
        dx = Kg @ r
        A = I9 - Kg @ H
        Pcov = A @ Pcov @ A.T + Kg @ Rm @ Kg.T
        Pcov = 0.5 * (Pcov + Pcov.T)
        p = p + dx[0:3]
        R = R @ _exp(dx[3:6])
        U, _, Vt = np.linalg.svd(R)
        R = U @ Vt
        b = b + dx[6:9]
        post_tr.append(np.trace(Pcov))
        out.append(RigidTransform(R, p))

    stream = PoseStream(times, out)
    if details:
        return FusionResult(stream, np.array(prior_tr), np.array(post_tr), b)
    return stream


def position_rmse(stream: PoseStream, truth: PoseStream) -> float:
    """RMSE of positions of ``stream`` against ``truth`` interpolated at the same times."""
    ref = np.array([truth.interpolate(t).translation for t in stream.timestamps])
    return float(np.sqrt(np.mean(np.sum((stream.positions - ref) ** 2, axis=1))))
