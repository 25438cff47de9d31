"""Pinhole projection, pseudo-projections and the per-feature measurement model.

Conventions
-----------
* Camera frame: x right, y down, z forward.
* ``RigidTransform`` maps coordinates of the *source* frame into the *target*
  frame, ``x_target = R @ x_source + t``.  For a feature track the camera pose
  maps previous-camera coordinates into current-camera coordinates, so the
  current camera centre expressed in the previous frame is ``-R.T @ t``.
* Pixels are homogeneous 3-vectors ``[u, v, 1]``.

Every function accepts a single vector or a batch with a leading axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveDepth, ZeroVector

DEPTH_EPS = 1e-9
_ORTHO_TOL = 1e-6
_EYE3 = np.eye(3)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def normalize(self, pixels: np.ndarray) -> np.ndarray:
        """Apply K^-1 to homogeneous pixels; the result keeps a third component of 1."""
        px = np.asarray(pixels, dtype=float)
        out = np.empty(px.shape[:-1] + (3,))
        out[..., 0] = (px[..., 0] - self.cx) / self.fx
        out[..., 1] = (px[..., 1] - self.cy) / self.fy
        out[..., 2] = 1.0
        return out

    def denormalize(self, rays: np.ndarray) -> np.ndarray:
        r = np.asarray(rays, dtype=float)
        out = np.empty(r.shape[:-1] + (3,))
        out[..., 0] = self.fx * r[..., 0] + self.cx
        out[..., 1] = self.fy * r[..., 1] + self.cy
        out[..., 2] = 1.0
        return out

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) element acting as ``x -> R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        a, b, c, d, e, f, g, h, i = R.ravel().tolist()
        det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)
        # written as "not <=" so NaN entries are rejected too
        if not (float(np.abs(R.T @ R - _EYE3).max()) <= _ORTHO_TOL and abs(det - 1.0) <= _ORTHO_TOL):
            raise ValueError("rotation must be orthonormal with determinant +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> RigidTransform:
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def rows(self) -> np.ndarray:
        """The 3x4 matrix [R | t]; row j is the j-th pose row used by the pseudo-projection."""
        return self.as_matrix()[:3]

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    @property
    def center(self) -> np.ndarray:
        """Origin of the target frame expressed in the source frame."""
        return -self.rotation.T @ self.translation

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def pixel(u: float, v: float) -> np.ndarray:
    return np.array([u, v, 1.0])


@dataclass(frozen=True, eq=False)
class FeatureTrack:
    """A pixel pair matched across two frames; ``object_id`` 0 is the static background."""

    prev_pixel: np.ndarray
    curr_pixel: np.ndarray
    object_id: int = 0

    def __post_init__(self):
        for name in ("prev_pixel", "curr_pixel"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if v.size == 2:
                v = np.append(v, 1.0)
            if v.size != 3 or v[2] != 1.0:
                raise ValueError(f"{name} must be a homogeneous pixel [u, v, 1]")
            object.__setattr__(self, name, v)

    def inside(self, width: float, height: float) -> bool:
        return all(0 <= px[0] < width and 0 <= px[1] < height for px in (self.prev_pixel, self.curr_pixel))


@dataclass(frozen=True, eq=False)
class DynamicFeatureState:
    position: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))


def _perspective(X: np.ndarray) -> np.ndarray:
    z = X[..., 2]
    if np.any(z <= DEPTH_EPS):
        raise NonPositiveDepth(f"depth must exceed {DEPTH_EPS} m, got min {np.min(z):.3g}")
    out = np.empty(X.shape)
    out[..., 0] = X[..., 0] / z
    out[..., 1] = X[..., 1] / z
    out[..., 2] = 1.0
    return out


def project(K: CameraIntrinsics, P: np.ndarray) -> np.ndarray:
    """Pinhole measurement model ``[fx Px/Pz + cx, fy Py/Pz + cy, 1]``."""
    return K.denormalize(_perspective(np.asarray(P, dtype=float)))


def pseudo_projection_m(K: CameraIntrinsics, P: np.ndarray, dd: np.ndarray) -> np.ndarray:
    """Pixel of the translated point ``P + dd`` seen from the previous camera."""
    return project(K, np.asarray(P, dtype=float) + np.asarray(dd, dtype=float))


def pseudo_projection_n(T: RigidTransform, P: np.ndarray) -> np.ndarray:
    """Normalized image coordinates of the untranslated ``P`` in the current camera.

    Computed row-wise as ``[t1.P~ / t3.P~, t2.P~ / t3.P~, 1]`` with ``P~ = [P; 1]``.
    """
    P = np.asarray(P, dtype=float)
    Ph = np.concatenate([P, np.ones(P.shape[:-1] + (1,))], axis=-1)
    return _perspective(Ph @ T.rows.T)


def cos_angle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ZeroVector("cos_angle of a zero vector is undefined")
    return np.clip(np.sum(a * b, axis=-1) / (na * nb), -1.0, 1.0)


def _norm(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(a * a, axis=-1))


def _cosine_law(a: np.ndarray, b: np.ndarray, cos_ab: np.ndarray, dd_sq) -> np.ndarray:
    na = _norm(a)
    nb = _norm(b)
    return na * na + nb * nb - 2.0 * na * nb * cos_ab - dd_sq


def _rows(K, T, P, dd, p_uv, p_ray, q_ray, min_depth=DEPTH_EPS):
    """Residual rows given precomputed normalized rays of the measured pixels."""
    n = P.shape[0]
    PQ = np.concatenate((P, P + dd))
    XY = PQ @ T.rotation.T + T.translation
    zmin = min(PQ[:, 2].min(), XY[:, 2].min())
    if zmin <= min_depth:
        raise NonPositiveDepth(f"depth must exceed {min_depth} m, got min {zmin:.3g}")
    # squared norms of P, Q, P - c2, Q - c2 (the last two equal |Xc|, |Yc|)
    S = np.concatenate((PQ, PQ - T.center))
    sq = np.einsum("ij,ij->i", S, S).reshape(4, n)

    # a.m / |m| = a.Q / |Q| for the pseudo-pixel m = Q / Qz, likewise for Xc in the current camera
    rays = np.concatenate((p_ray, q_ray))
    seen = np.concatenate((PQ[n:], XY[:n]))
    cos = np.einsum("ij,ij->i", rays, seen) / np.sqrt(np.einsum("ij,ij->i", rays, rays) * sq[1:3].ravel())
    np.minimum(cos, 1.0, out=cos)
    np.maximum(cos, -1.0, out=cos)

    a, b = sq[0::2], sq[1::2]
    dd_sq = np.einsum("...i,...i->...", dd, dd)
    out = np.empty((n, 6))
    out[:, :2] = (a + b - 2.0 * np.sqrt(a * b) * cos.reshape(2, n) - dd_sq).T
    out[:, 2:4] = p_uv[:, :2] - (P[:, :2] / P[:, 2:3] * (K.fx, K.fy) + (K.cx, K.cy))
    out[:, 4:6] = q_ray[:, :2] - XY[n:, :2] / XY[n:, 2:3]
    return out


def stacked_residuals(
    K: CameraIntrinsics,
    T: RigidTransform,
    positions: np.ndarray,
    dd: np.ndarray,
    prev_pixels: np.ndarray,
    curr_pixels: np.ndarray,
) -> np.ndarray:
    """Per-feature 6-vector residuals for a batch of features.

    ``dd`` is either one shared translation or one translation per row.

    Returns an ``(N, 6)`` array with columns ``[cosine law at the previous
    camera, cosine law at the current camera, u_p, v_p (pixels), u_q, v_q
    (normalized)]``.  Both angle terms are evaluated between normalized rays.
    """
    P = np.atleast_2d(np.asarray(positions, dtype=float))
    dd = np.asarray(dd, dtype=float)
    p_hat = np.atleast_2d(np.asarray(prev_pixels, dtype=float))
    q_hat = np.atleast_2d(np.asarray(curr_pixels, dtype=float))
    return _rows(K, T, P, dd, p_hat, K.normalize(p_hat), K.normalize(q_hat))


def residual_6(K: CameraIntrinsics, T: RigidTransform, state: DynamicFeatureState, track: FeatureTrack) -> np.ndarray:
    """Measurement residual ``z_hat - F(P, dd)`` of one dynamic feature."""
    return stacked_residuals(
        K, T, state.position[None], state.translation, track.prev_pixel[None], track.curr_pixel[None]
    )[0]
