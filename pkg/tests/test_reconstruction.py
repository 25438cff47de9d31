import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mmrefine.errors import DegenerateRays, NotConverged, UnderdeterminedObject
from mmrefine.geometry import CameraIntrinsics, FeatureTrack, RigidTransform, pixel, project
from mmrefine.reconstruction import (
    ReconstructionProblem,
    SolverOptions,
    initial_guess,
    jacobian,
    positions_given_translation,
    solve,
    subset_indices,
    triangulate_midpoint,
)


def _tracks(K, T, P, dd, object_id=1):
    return [FeatureTrack(project(K, p), project(K, T.apply(p + dd)), object_id) for p in np.atleast_2d(P)]


def _object(K, rng, n, dd):
    T = RigidTransform(oracles.random_rotation(rng, 0.05), rng.normal(size=3) * 0.5)
    P = rng.uniform([-3, -2, 8], [3, 2, 20], size=(n, 3))
    return T, P, np.asarray(dd, dtype=float)


def test_initial_guess_static_feature_is_exact(K, rng):
    T, P, dd = _object(K, rng, 1, [0, 0, 0])
    guess = initial_guess(_tracks(K, T, P, dd)[0], K, T)
    assert np.allclose(guess, P[0], atol=1e-8)


def test_initial_guess_matches_closed_form_midpoint():
    K = CameraIntrinsics(1, 1, 0, 0)
    T = RigidTransform(np.eye(3), [1, 0, 0])
    P = np.array([0.5, 0.0, 5.0])
    tr = _tracks(K, T, P, np.zeros(3))[0]
    c2 = (-T.translation).tolist()
    ref = oracles.midpoint([0, 0, 0], tr.prev_pixel.tolist(), c2, tr.curr_pixel.tolist())
    guess = initial_guess(tr, K, T)
    assert np.allclose(guess, ref, atol=1e-12)
    assert np.allclose(guess, P, atol=1e-12)


def test_initial_guess_rejects_parallel_rays():
    K = CameraIntrinsics(1, 1, 0, 0)
    T = RigidTransform(np.eye(3), [0, 0, -1])
    with pytest.raises(DegenerateRays):
        initial_guess(FeatureTrack(pixel(0, 0), pixel(0, 0)), K, T)


def test_triangulate_midpoint_batch_flags_parallel_rows(K):
    T = RigidTransform(np.eye(3), [0, 0, -1])
    pts, valid = triangulate_midpoint(K, T, np.array([[320, 240, 1], [400, 240, 1]]), np.array([[320, 240, 1], [410, 240, 1]]))
    assert not valid[0] and valid[1]
    assert np.all(np.isnan(pts[0]))


def test_midpoint_oracle_on_noisy_rays(K, rng):
    T, P, dd = _object(K, rng, 5, [0, 0, 0])
    prev = project(K, P) + np.array([1.5, -0.7, 0])
    curr = project(K, T.apply(P)) + np.array([-0.4, 2.0, 0])
    pts, _ = triangulate_midpoint(K, T, prev, curr)
    for p_hat, q_hat, x in zip(prev, curr, pts):
        d1 = K.normalize(p_hat).tolist()
        d2 = (T.rotation.T @ K.normalize(q_hat)).tolist()
        ref = oracles.midpoint([0, 0, 0], d1, T.center.tolist(), d2)
        assert np.allclose(x, ref, rtol=1e-10)


def test_single_feature_is_underdetermined(K, rng):
    T, P, dd = _object(K, rng, 1, [0.3, 0, 0.1])
    with pytest.raises(UnderdeterminedObject):
        solve(ReconstructionProblem(_tracks(K, T, P, dd), K, T))


def test_empty_problem_is_underdetermined(K):
    with pytest.raises(UnderdeterminedObject):
        solve(ReconstructionProblem([], K, RigidTransform.identity()))


def test_mixed_object_ids_rejected(K, rng):
    T, P, dd = _object(K, rng, 2, [0, 0, 0])
    tracks = _tracks(K, T, P[:1], dd, 1) + _tracks(K, T, P[1:], dd, 2)
    with pytest.raises(ValueError):
        ReconstructionProblem(tracks, K, T)


def _gauge_error(T, P, dd, sol):
    """Distance of the solution from the one-parameter family of exact two-view solutions."""
    s = float(np.sum(sol.positions * P) / np.sum(P * P))
    c2 = T.center
    return max(
        np.max(np.linalg.norm(sol.positions - s * P, axis=1) / np.linalg.norm(P, axis=1)),
        np.linalg.norm(sol.translation - (c2 + s * (dd - c2))),
    )


def test_pure_two_view_solve_is_flagged_scale_ambiguous(K, rng):
    T, P, dd = _object(K, rng, 5, [0.3, 0.0, 0.1])
    sol = solve(ReconstructionProblem(_tracks(K, T, P, dd), K, T))
    assert not sol.converged and not sol.observable
    assert sol.status == "scale_ambiguous"
    # the answer is still an exact member of the scaled family, never an arbitrary point
    assert _gauge_error(T, P, dd, sol) < 1e-6
    assert sol.final_cost < 1e-12


def test_anchored_solve_recovers_moving_object(K, rng):
    T, P, dd = _object(K, rng, 5, [0.3, 0.0, 0.1])
    prior = float(np.mean(np.linalg.norm(P, axis=1)))
    sol = solve(ReconstructionProblem(_tracks(K, T, P, dd), K, T, prior))
    assert sol.converged and sol.observable
    assert np.max(np.linalg.norm(sol.positions - P, axis=1) / np.linalg.norm(P, axis=1)) < 1e-6
    assert np.linalg.norm(sol.translation - dd) < 1e-6


def test_anchored_solve_of_static_object_matches_triangulation(K, rng):
    T, P, dd = _object(K, rng, 5, [0.0, 0.0, 0.0])
    tracks = _tracks(K, T, P, dd)
    prior = float(np.mean(np.linalg.norm(P, axis=1)))
    sol = solve(ReconstructionProblem(tracks, K, T, prior))
    assert sol.converged
    assert np.linalg.norm(sol.translation) < 1e-6
    tri, _ = triangulate_midpoint(K, T, [t.prev_pixel for t in tracks], [t.curr_pixel for t in tracks])
    assert np.allclose(sol.positions, tri, rtol=1e-6)


def test_final_cost_is_half_weighted_squared_residual(K, rng):
    T, P, dd = _object(K, rng, 4, [0.2, -0.1, 0.4])
    tracks = _tracks(K, T, P, dd)
    noisy = [FeatureTrack(t.prev_pixel + [0.5, -0.3, 0], t.curr_pixel + [-0.2, 0.4, 0], 1) for t in tracks]
    prior = float(np.mean(np.linalg.norm(P, axis=1)))
    opts = SolverOptions()
    prob = ReconstructionProblem(noisy, K, T, prior)
    sol = solve(prob, opts)
    X = np.concatenate([sol.positions.ravel(), sol.translation])
    E = prob.residuals(X) * opts.row_weights()
    prior_row = (np.mean(np.linalg.norm(sol.positions, axis=1)) - prior) / opts.range_prior_sigma
    assert np.isclose(sol.final_cost, 0.5 * (np.sum(E * E) + prior_row**2), rtol=1e-12)


def test_strict_mode_raises_with_best_iterate(K, rng):
    T, P, dd = _object(K, rng, 3, [0.3, 0, 0])
    with pytest.raises(NotConverged) as info:
        solve(ReconstructionProblem(_tracks(K, T, P, dd), K, T), strict=True)
    assert info.value.solution is not None and info.value.solution.positions.shape == (3, 3)


def test_iteration_budget_exhaustion_reports_not_converged(K, rng):
    T, P, dd = _object(K, rng, 6, [1.0, 0.2, 0.5])
    tracks = _tracks(K, T, P, dd)
    prior = float(np.mean(np.linalg.norm(P, axis=1)))
    sol = solve(ReconstructionProblem(tracks, K, T, prior), SolverOptions(max_iter=1, max_restarts=0))
    assert not sol.converged and sol.status == "max_iter"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 12), st.booleans())
def test_cost_history_is_non_increasing(seed, n, anchored):
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics(460, 460, 320, 240)
    T, P, dd, tracks = oracles.dynamic_object(rng, K, n)
    tracks = [FeatureTrack(t.prev_pixel + np.append(rng.normal(0, 0.5, 2), 0), t.curr_pixel, 1) for t in tracks]
    prior = float(np.mean(np.linalg.norm(P, axis=1))) if anchored else None
    sol = solve(ReconstructionProblem(tracks, K, T, prior))
    h = np.array(sol.cost_history)
    assert np.all(np.diff(h) <= 0)


def _half_step_forward_jacobian(prob, X):
    base = prob.residuals(X).ravel()
    J = np.empty((base.size, X.size))
    for j in range(X.size):
        h = 0.5 * max(1e-6, 1e-6 * abs(X[j]))
        Xp = X.copy()
        Xp[j] += h
        J[:, j] = (prob.residuals(Xp).ravel() - base) / h
    return J


def test_jacobian_agrees_with_half_step_forward_difference(K, rng):
    T, P, dd, tracks = oracles.dynamic_object(rng, K, 4)
    prob = ReconstructionProblem(tracks, K, T)
    X = np.concatenate([(P + rng.normal(size=P.shape) * 0.3).ravel(), dd + 0.1])
    Jc = jacobian(prob, X)
    Jf = _half_step_forward_jacobian(prob, X)
    assert np.linalg.norm(Jc - Jf) / np.linalg.norm(Jc) < 1e-4


def test_jacobian_structural_zeros_are_exact(K, rng):
    T, P, dd, tracks = oracles.dynamic_object(rng, K, 5)
    prob = ReconstructionProblem(tracks, K, T)
    X = np.concatenate([P.ravel(), dd])
    J = jacobian(prob, X)
    assert J.shape == (30, 18)
    for i in range(5):
        for j in range(5):
            block = J[6 * i : 6 * i + 6, 3 * j : 3 * j + 3]
            if i != j:
                assert np.all(block == 0.0)
            else:
                assert np.any(block != 0.0)


def test_gradient_vanishes_at_truth(K, rng):
    T, P, dd, tracks = oracles.dynamic_object(rng, K, 6)
    prob = ReconstructionProblem(tracks, K, T)
    X = np.concatenate([P.ravel(), dd])
    g = jacobian(prob, X).T @ prob.residuals(X).ravel()
    assert np.max(np.abs(g)) < 1e-6


def test_positions_given_true_translation_are_exact(K, rng):
    T, P, dd = _object(K, rng, 8, [0.4, 0.0, -0.3])
    tracks = _tracks(K, T, P, dd)
    pts, valid = positions_given_translation(
        K, T, np.array([t.prev_pixel for t in tracks]), np.array([t.curr_pixel for t in tracks]), dd
    )
    assert valid.all()
    assert np.allclose(pts, P, rtol=1e-9)


def test_subset_indices():
    assert np.array_equal(subset_indices(5, 30), np.arange(5))
    idx = subset_indices(100, 30)
    assert len(idx) == 30 and idx[0] == 0 and idx[-1] == 99
    assert np.all(np.diff(idx) > 0)


def test_solve_is_deterministic(K, rng):
    T, P, dd, tracks = oracles.dynamic_object(rng, K, 7)
    a = solve(ReconstructionProblem(tracks, K, T, 12.0))
    b = solve(ReconstructionProblem(tracks, K, T, 12.0))
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.translation, b.translation)


# --- noise consistency -------------------------------------------------------------------

SIGMAS = (0.25, 0.5, 1.0)
SIZES = (2, 5, 10, 20)
SEEDS = 100


@pytest.fixture(scope="module")
def noise_table():
    """Median errors per (sigma, N); the same objects and noise draws are reused across N."""
    K = CameraIntrinsics(460, 460, 320, 240)
    table = {}
    for sigma in SIGMAS:
        for n in SIZES:
            pos, trans = [], []
            for s in range(SEEDS):
                T, P, dd, tracks = oracles.dynamic_object(np.random.default_rng(s), K, max(SIZES))
                noise = np.random.default_rng(10**6 + s).normal(0, sigma, (max(SIZES), 4))
                tracks = [
                    FeatureTrack(t.prev_pixel + np.append(e[:2], 0), t.curr_pixel + np.append(e[2:], 0), 1)
                    for t, e in zip(tracks, noise)
                ][:n]
                prior = float(np.mean(np.linalg.norm(P[:n], axis=1)))
                sol = solve(ReconstructionProblem(tracks, K, T, prior))
                pos.append(np.median(np.linalg.norm(sol.positions - P[:n], axis=1)))
                trans.append(np.linalg.norm(sol.translation - dd))
            table[sigma, n] = (float(np.median(pos)), float(np.median(trans)))
    return table


@pytest.mark.parametrize("sigma", SIGMAS)
def test_translation_error_decreases_with_feature_count(noise_table, sigma):
    errs = [noise_table[sigma, n][1] for n in SIZES]
    assert all(a > b for a, b in zip(errs, errs[1:])), errs


@pytest.mark.parametrize("sigma", SIGMAS)
def test_position_error_improves_from_two_to_twenty_features(noise_table, sigma):
    assert noise_table[sigma, 20][0] < noise_table[sigma, 2][0]


@pytest.mark.xfail(strict=True, reason="per-point error is set by each point's own pixels once the shared translation is known; it plateaus after N = 5")
@pytest.mark.parametrize("sigma", SIGMAS)
def test_position_error_strictly_monotone_in_feature_count(noise_table, sigma):
    errs = [noise_table[sigma, n][0] for n in SIZES]
    assert all(a > b for a, b in zip(errs, errs[1:])), errs
