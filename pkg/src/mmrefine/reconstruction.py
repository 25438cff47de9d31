"""Two-frame reconstruction of features on a translating rigid object.

Every feature of one object contributes the 6-row residual of
:func:`mmrefine.geometry.stacked_residuals`; all features share a single
translation ``dd``.  The unknown vector is ``X = (P_1, ..., P_N, dd)`` and the
objective ``0.5 * sum ||W e_i(X)||^2`` is minimised with Levenberg-Marquardt.

Two-view observations of a moving object only fix the object up to a scale
gauge: scaling every ``P_i`` about the previous camera centre by ``s`` and
setting ``dd' = c2 + s (dd - c2)`` (``c2`` the current camera centre) leaves
every pixel, and therefore every residual row, unchanged.  :func:`solve`
measures the residual sensitivity along that direction and reports
``status="scale_ambiguous"`` with ``converged=False`` when it is flat.  An
optional ``range_prior`` (mean range of the object's points, e.g. from radar)
adds one row that removes the gauge.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheiralityViolation,
    DegenerateRays,
    NonPositiveDepth,
    NotConverged,
    UnderdeterminedObject,
)
from .geometry import DEPTH_EPS, CameraIntrinsics, FeatureTrack, RigidTransform, _rows

logger = logging.getLogger(__name__)

PARALLEL_RAY_TOL = 1e-6
# trial steps must keep every depth above this so finite differences stay in-domain
_FEASIBLE_DEPTH = 1e-3
_INIT_DEPTH_FRACTION = 0.1
_PRIOR_MISMATCH = 0.5


@dataclass(frozen=True)
class SolverOptions:
    lambda0: float = 1e-3
    lambda_factor: float = 10.0
    max_iter: int = 200
    g_tol: float = 1e-10
    f_tol: float = 1e-12
    x_tol: float = 1e-15
    # the gradient test only stops once the last accepted step is this small relative to x
    settle_tol: float = 1e-9
    # cosine-law rows are divided by depth_prior**2, reprojection rows by reproj_scale
    depth_prior: float = 10.0
    reproj_scale: float = 1.0
    max_restarts: int = 3
    restart_cost: float = 1e-8
    restart_step: float = 0.5
    range_prior_sigma: float = 0.1
    gauge_tol: float = 1e-3
    rank_tol: float = 1e-10

    def row_weights(self) -> np.ndarray:
        c = 1.0 / self.depth_prior**2
        r = 1.0 / self.reproj_scale
        return np.array([c, c, r, r, r, r])


@dataclass(eq=False)
class ReconstructionProblem:
    tracks: list[FeatureTrack]
    intrinsics: CameraIntrinsics
    camera_pose: RigidTransform
    range_prior: float | None = None

    def __post_init__(self):
        ids = {t.object_id for t in self.tracks}
        if len(ids) > 1:
            raise ValueError(f"tracks of one problem must share an object_id, got {sorted(ids)}")
        self.prev_pixels = np.array([t.prev_pixel for t in self.tracks]).reshape(-1, 3)
        self.curr_pixels = np.array([t.curr_pixel for t in self.tracks]).reshape(-1, 3)
        self._p_ray = self.intrinsics.normalize(self.prev_pixels)
        self._q_ray = self.intrinsics.normalize(self.curr_pixels)
        self._tiled = None

    def _eval(self, P: np.ndarray, dd: np.ndarray, copies: int = 1, min_depth: float = DEPTH_EPS) -> np.ndarray:
        if copies == 1:
            return _rows(self.intrinsics, self.camera_pose, P, dd, self.prev_pixels, self._p_ray, self._q_ray, min_depth)
        if self._tiled is None or self._tiled[0] != copies:
            self._tiled = (copies,) + tuple(np.tile(a, (copies, 1)) for a in (self.prev_pixels, self._p_ray, self._q_ray))
        _, uv, pr, qr = self._tiled
        return _rows(self.intrinsics, self.camera_pose, P, dd, uv, pr, qr)

    @property
    def n(self) -> int:
        return len(self.tracks)

    @property
    def object_id(self) -> int:
        return self.tracks[0].object_id if self.tracks else 0

    def split(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        X = np.asarray(X, dtype=float)
        return X[:-3].reshape(-1, 3), X[-3:]

    def residuals(self, X: np.ndarray) -> np.ndarray:
        """Unweighted ``(N, 6)`` residual block."""
        P, dd = self.split(X)
        return self._eval(P, dd)


@dataclass(eq=False)
class ReconstructionSolution:
    positions: np.ndarray
    translation: np.ndarray
    final_cost: float
    iterations: int
    converged: bool
    status: str = "converged"
    observable: bool = True
    restarts: int = 0
    cost_history: list[float] = field(default_factory=list)


def triangulate_midpoint(
    K: CameraIntrinsics, T: RigidTransform, prev_pixels: np.ndarray, curr_pixels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Static-world midpoint triangulation of a batch of pixel pairs.

    Returns ``(points, valid)``; ``valid`` is False where the two viewing rays
    are within ``PARALLEL_RAY_TOL`` radians of parallel (those points are NaN).
    Points are expressed in the previous camera frame.
    """
    d1 = K.normalize(np.atleast_2d(prev_pixels))
    d2 = K.normalize(np.atleast_2d(curr_pixels)) @ T.rotation  # R^T q, row-wise
    d1 /= np.linalg.norm(d1, axis=1, keepdims=True)
    d2 /= np.linalg.norm(d2, axis=1, keepdims=True)
    c2 = T.center
    cross = np.linalg.norm(np.cross(d1, d2), axis=1)
    valid = np.arcsin(np.clip(cross, 0.0, 1.0)) > PARALLEL_RAY_TOL

    # minimise |s d1 - (c2 + u d2)| over (s, u)
    b = np.sum(d1 * d2, axis=1)
    e1 = d1 @ c2
    e2 = d2 @ c2
    denom = np.where(valid, 1.0 - b * b, 1.0)
    s = (e1 - b * e2) / denom
    u = (b * e1 - e2) / denom
    mid = 0.5 * (s[:, None] * d1 + c2 + u[:, None] * d2)
    mid[~valid] = np.nan
    return mid, valid


def initial_guess(track: FeatureTrack, K: CameraIntrinsics, T: RigidTransform) -> np.ndarray:
    """Midpoint of the shortest segment between the two viewing rays."""
    mid, valid = triangulate_midpoint(K, T, track.prev_pixel[None], track.curr_pixel[None])
    if not valid[0]:
        raise DegenerateRays("viewing rays are parallel; the feature cannot be triangulated")
    return mid[0]


def _fd_steps(v: np.ndarray) -> np.ndarray:
    return np.maximum(1e-6, 1e-6 * np.abs(v))


def _jacobian_blocks(problem: ReconstructionProblem, X: np.ndarray):
    """Central-difference derivative blocks ``(dE/dP_i, dE/d dd)``, each ``(N, 6, 3)``.

    Feature ``i`` depends only on ``P_i`` and ``dd``, so coordinate ``k`` of
    every ``P_i`` is perturbed at once; all 12 perturbations are evaluated in a
    single batched residual call.
    """
    P, dd = problem.split(X)
    n = P.shape[0]
    hP = _fd_steps(P).T
    hD = _fd_steps(dd)
    k = np.arange(3)
    # perturbations 0-5 move P (+/- per coordinate), 6-11 move dd
    Ps = np.broadcast_to(P, (12, n, 3)).copy()
    Ds = np.broadcast_to(dd, (12, n, 3)).copy()
    Ps[2 * k, :, k] += hP
    Ps[2 * k + 1, :, k] -= hP
    Ds[6 + 2 * k, :, k] += hD[:, None]
    Ds[7 + 2 * k, :, k] -= hD[:, None]
    rows = problem._eval(Ps.reshape(-1, 3), Ds.reshape(-1, 3), copies=12).reshape(12, n, 6)
    dP = ((rows[0:6:2] - rows[1:6:2]) / (2.0 * hP[:, :, None])).transpose(1, 2, 0)
    dD = ((rows[6::2] - rows[7::2]) / (2.0 * hD[:, None, None])).transpose(1, 2, 0)
    return dP, dD


def _assemble(dP: np.ndarray, dD: np.ndarray) -> np.ndarray:
    n = dP.shape[0]
    J = np.zeros((n, 6, n + 1, 3))
    idx = np.arange(n)
    J[idx, :, idx, :] = dP
    J[:, :, n, :] = dD
    return J.reshape(6 * n, 3 * n + 3)


def jacobian(problem: ReconstructionProblem, X: np.ndarray) -> np.ndarray:
    """Unweighted ``(6N, 3N+3)`` Jacobian of the stacked residual (feature-major rows)."""
    return _assemble(*_jacobian_blocks(problem, np.asarray(X, dtype=float)))


class _Objective:
    """Weighted residual vector, optionally with a mean-range prior row appended."""

    def __init__(self, problem: ReconstructionProblem, opts: SolverOptions):
        self.problem = problem
        self.w = opts.row_weights()
        self.prior = problem.range_prior
        self.sigma = opts.range_prior_sigma

    def residual(self, X: np.ndarray, min_depth: float = DEPTH_EPS) -> np.ndarray:
        P, dd = self.problem.split(X)
        r = (self.problem._eval(P, dd, min_depth=min_depth) * self.w).ravel()
        if self.prior is not None:
            r = np.append(r, (np.mean(np.linalg.norm(P, axis=1)) - self.prior) / self.sigma)
        return r

    def jacobian(self, X: np.ndarray) -> np.ndarray:
        dP, dD = _jacobian_blocks(self.problem, X)
        J = _assemble(dP * self.w[None, :, None], dD * self.w[None, :, None])
        if self.prior is not None:
            P, _ = self.problem.split(X)
            row = np.zeros(J.shape[1])
            row[:-3] = (P / np.linalg.norm(P, axis=1, keepdims=True)).ravel() / (len(P) * self.sigma)
            J = np.vstack([J, row])
        return J

    def evaluate(self, X: np.ndarray) -> tuple[float, np.ndarray | None]:
        """Cost and residual vector; ``(inf, None)`` outside the feasible depth domain."""
        try:
            r = self.residual(X, min_depth=_FEASIBLE_DEPTH)
        except NonPositiveDepth:
            return np.inf, None
        return 0.5 * float(r @ r), r

    def cost(self, X: np.ndarray) -> float:
        return self.evaluate(X)[0]


def _levenberg_marquardt(obj: _Objective, x0: np.ndarray, opts: SolverOptions):
    x = np.array(x0, dtype=float)
    cost, r = obj.evaluate(x)
    history = [cost]
    lam = opts.lambda0
    it = 0
    status = "max_iter"
    last_step = np.inf
    while it < opts.max_iter:
        J = obj.jacobian(x)
        g = J.T @ r
        if np.max(np.abs(g)) < opts.g_tol and last_step <= opts.settle_tol * np.linalg.norm(x):
            status = "gradient_tolerance"
            break
        A = J.T @ J
        diag = np.maximum(np.diag(A), 1e-12 * max(1.0, np.max(np.diag(A))))
        accepted = False
        while it < opts.max_iter:
            it += 1
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= opts.lambda_factor
                continue
            trial = x + step
            new_cost, new_r = obj.evaluate(trial)
            if new_cost < cost:
                rel = (cost - new_cost) / cost
                x, cost, r = trial, new_cost, new_r
                last_step = float(np.linalg.norm(step))
                history.append(cost)
                lam = max(lam / opts.lambda_factor, 1e-15)
                accepted = True
                if rel < opts.f_tol:
                    status = "function_tolerance"
                break
            lam *= opts.lambda_factor
            if np.linalg.norm(step) <= opts.x_tol * (np.linalg.norm(x) + opts.x_tol) or lam > 1e20:
                status = "parameter_tolerance"
                break
        if status != "max_iter" or not accepted:
            break
    converged = status != "max_iter"
    return x, cost, it, converged, status, history


def _scale_gauge(problem: ReconstructionProblem, X: np.ndarray) -> np.ndarray:
    P, dd = problem.split(X)
    return np.concatenate([P.ravel(), dd - problem.camera_pose.center])


def _observability(obj: _Objective, X: np.ndarray, opts: SolverOptions) -> str | None:
    J = obj.jacobian(X)
    sv = np.linalg.svd(J, compute_uv=False)
    v = _scale_gauge(obj.problem, X)
    if np.linalg.norm(J @ v) <= opts.gauge_tol * sv[0] * np.linalg.norm(v):
        return "scale_ambiguous"
    if sv[-1] <= opts.rank_tol * sv[0]:
        return "rank_deficient"
    return None


def _check_counts(n: int):
    if n < 2:
        raise UnderdeterminedObject(f"an object needs at least 2 features, got {n}")
    if 6 * n < 3 * n + 3:
        raise UnderdeterminedObject(f"{6 * n} constraints cannot determine {3 * n + 3} unknowns")


def solve(problem: ReconstructionProblem, opts: SolverOptions | None = None, strict: bool = False) -> ReconstructionSolution:
    """Recover all feature positions and the shared translation of one object.

    The solver starts from midpoint triangulation with ``dd = 0``; if the final
    cost stays above ``opts.restart_cost`` it restarts with ``dd`` offset along
    the camera-motion direction and keeps the lowest-cost converged run.

    Raises:
        UnderdeterminedObject: fewer than two features.
        DegenerateRays: a feature's viewing rays are parallel.
        CheiralityViolation: the solution puts a point behind either camera.
        NotConverged: only with ``strict=True``, when ``converged`` would be False.
    """
    opts = opts or SolverOptions()
    _check_counts(problem.n)
    K, T = problem.intrinsics, problem.camera_pose
    P0, valid = triangulate_midpoint(K, T, problem.prev_pixels, problem.curr_pixels)
    if not np.all(valid):
        raise DegenerateRays(f"{np.count_nonzero(~valid)} feature(s) have parallel viewing rays")
    ref = problem.range_prior or opts.depth_prior
    min_depth = _INIT_DEPTH_FRACTION * ref
    bad = (P0[:, 2] < min_depth) | (T.apply(P0)[:, 2] < min_depth)
    if problem.range_prior is not None:
        bad |= np.abs(np.linalg.norm(P0, axis=1) - ref) > _PRIOR_MISMATCH * ref
    if np.any(bad):
        # rays of fast objects diverge or meet next to the camera; seed those on the previous ray
        rays = problem._p_ray[bad] / np.linalg.norm(problem._p_ray[bad], axis=1, keepdims=True)
        P0[bad] = rays * ref

    obj = _Objective(problem, opts)
    motion = T.center
    norm = np.linalg.norm(motion)
    direction = motion / norm if norm > 0 else np.array([0.0, 0.0, 1.0])
    offsets = [0.0] + [k * opts.restart_step for k in (1, -1, 2)][: opts.max_restarts]

    best = None
    restarts = 0
    total_iter = 0
    for j, off in enumerate(offsets):
        if j > 0:
            if best is not None and best[1] <= opts.restart_cost:
                break
            restarts += 1
        x0 = np.concatenate([P0.ravel(), off * direction])
        if not np.isfinite(obj.cost(x0)):
            continue
        x, cost, it, conv, status, hist = _levenberg_marquardt(obj, x0, opts)
        total_iter += it
        cand = (x, cost, conv, status, hist)
        if best is None or (conv and not best[2]) or (conv == best[2] and cost < best[1]):
            best = cand
    if best is None:
        raise CheiralityViolation("no initial guess lies in front of both cameras")

    x, cost, conv, status, hist = best
    P, dd = problem.split(x)
    if np.any(P[:, 2] <= 0) or np.any(T.apply(P + dd)[:, 2] <= 0) or np.any(T.apply(P)[:, 2] <= 0):
        raise CheiralityViolation("solution places a point behind a camera")

    observable = True
    degeneracy = _observability(obj, x, opts)
    if degeneracy is not None:
        observable = False
        conv = False
        status = degeneracy
        logger.debug("object %d: %s", problem.object_id, degeneracy)

    sol = ReconstructionSolution(
        positions=P.copy(),
        translation=dd.copy(),
        final_cost=cost,
        iterations=total_iter,
        converged=conv,
        status=status,
        observable=observable,
        restarts=restarts,
        cost_history=hist,
    )
    if strict and not sol.converged:
        raise NotConverged(f"object {problem.object_id}: {sol.status}", sol)
    return sol


def positions_given_translation(
    K: CameraIntrinsics, T: RigidTransform, prev_pixels: np.ndarray, curr_pixels: np.ndarray, dd: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Feature positions once the object translation is known.

    With ``dd`` fixed the current camera sees ``R (P + dd) + t = R P + (t + R dd)``,
    so each feature is an ordinary two-view triangulation under the shifted pose.
    """
    shifted = RigidTransform(T.rotation, T.translation + T.rotation @ np.asarray(dd, dtype=float))
    return triangulate_midpoint(K, shifted, prev_pixels, curr_pixels)


def subset_indices(n: int, limit: int) -> np.ndarray:
    """Evenly spaced deterministic subset of ``min(n, limit)`` indices."""
    if n <= limit:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, limit).round().astype(int))
