import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mmrefine.cfar import (
    Detection,
    RangeDopplerMatrix,
    ca_alpha,
    ca_cfar,
    detections_to_points,
    os_alpha,
    os_cfar,
    os_false_alarm,
    read_rdm,
    tested_cells as n_tested,
    training_cells,
    write_rdm,
)
from mmrefine.errors import InvalidRank, MissingAngleMap, WindowTooLarge


def _noise(rng, shape=(64, 64)):
    return RangeDopplerMatrix(rng.exponential(1.0, size=shape), 0.2, 0.25)


def _cells(dets):
    return {(d.range_bin, d.doppler_bin) for d in dets}


def test_training_cell_count():
    assert training_cells(0, 1) == 8
    assert training_cells(1, 2) == 49 - 9
    assert training_cells(2, 4) == 13 * 13 - 25


def test_ca_alpha_textbook_value():
    assert math.isclose(ca_alpha(16, 1e-2), 16 * (100 ** (1 / 16) - 1), rel_tol=1e-15)


@pytest.mark.parametrize("n,k,pfa", [(16, 12, 1e-2), (40, 30, 1e-3), (112, 84, 1e-4), (8, 1, 0.1)])
def test_os_alpha_solves_false_alarm_equation(n, k, pfa):
    a = os_alpha(n, k, pfa)
    assert math.isclose(os_false_alarm(a, n, k), pfa, rel_tol=1e-7)
    # scalar product form evaluated directly
    prod = 1.0
    for i in range(k):
        prod *= (n - i) / (n - i + a)
    assert math.isclose(prod, pfa, rel_tol=1e-7)


def test_os_alpha_rank_one_closed_form():
    # k = 1: N / (N + a) = pfa
    assert math.isclose(os_alpha(8, 1, 0.1), 8 * (1 / 0.1 - 1), rel_tol=1e-9)


def test_zero_matrix_gives_no_detections():
    rdm = RangeDopplerMatrix(np.zeros((16, 16)), 0.2, 0.25)
    assert ca_cfar(rdm, 1, 2, pfa=1e-3) == []
    assert os_cfar(rdm, 1, 2, k=30, pfa=1e-3) == []


def test_strong_target_is_detected(rng):
    rdm = _noise(rng)
    rdm.power[30, 40] = 1e4
    assert (30, 40) in _cells(ca_cfar(rdm, 1, 3, pfa=1e-3))
    assert (30, 40) in _cells(os_cfar(rdm, 1, 3, k=36, pfa=1e-3))


def test_simulated_rdm_targets_are_detected():
    from mmrefine.sim import default_config, generate

    cfg = default_config(duration=0.2, background={"points": 100}, radar={"target_snr_db": 40.0, "snr_jitter_db": 0.0})
    sc = generate(cfg)
    rdm = sc.rdms[0]
    strong = np.argwhere(rdm.power > 5e3)
    found = _cells(ca_cfar(rdm, 1, 3, pfa=1e-3))
    inside = [tuple(c) for c in strong if 4 <= c[0] < rdm.shape[0] - 4 and 4 <= c[1] < rdm.shape[1] - 4]
    assert inside
    # isolated cells detected; neighbouring targets can share a window
    assert sum(c in found for c in inside) >= 0.8 * len(inside)


@pytest.mark.parametrize("detector", ["ca", "os"])
def test_detections_match_explicit_window_oracle(rng, detector):
    rdm = _noise(rng, (14, 15))
    rdm.power[6, 7] = 40.0
    guard, train = 1, 2
    n = training_cells(guard, train)
    if detector == "ca":
        a = ca_alpha(n, 0.05)
        got = ca_cfar(rdm, guard, train, pfa=0.05)
        rule = lambda s, cut: cut > a * (sum(s) / len(s))  # noqa: E731
    else:
        k = 30
        a = os_alpha(n, k, 0.05)
        got = os_cfar(rdm, guard, train, k, pfa=0.05)
        rule = lambda s, cut: cut > a * sorted(s)[k - 1]  # noqa: E731
    ref = oracles.cfar_cells(rdm.power, guard, train, rule)
    assert sorted(_cells(got)) == ref
    assert (6, 7) in _cells(got)


def test_masking_scenario_os_beats_ca(rng):
    rdm = _noise(rng, (40, 40))
    rdm.power[20, 20] = 1e5
    rdm.power[20, 23] = 100.0
    guard, train = 1, 4
    k = int(0.75 * training_cells(guard, train))
    ca = _cells(ca_cfar(rdm, guard, train, pfa=1e-3))
    os_ = _cells(os_cfar(rdm, guard, train, k, pfa=1e-3))
    assert (20, 20) in ca and (20, 23) not in ca
    assert {(20, 20), (20, 23)} <= os_


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(-30, 30))
def test_power_scaling_leaves_detections_unchanged(seed, e):
    rng = np.random.default_rng(seed)
    base = _noise(rng, (24, 24))
    base.power[10, 12] = 30.0
    # a power of two scales every product and sum exactly
    scaled = RangeDopplerMatrix(base.power * 2.0**e, 0.2, 0.25)
    assert _cells(ca_cfar(base, 1, 2, pfa=0.05)) == _cells(ca_cfar(scaled, 1, 2, pfa=0.05))
    assert _cells(os_cfar(base, 1, 2, 30, pfa=0.05)) == _cells(os_cfar(scaled, 1, 2, 30, pfa=0.05))


def test_power_scaling_by_arbitrary_factor(rng):
    base = _noise(rng)
    for c in (1e-3, 3.7, 1e4):
        scaled = RangeDopplerMatrix(base.power * c, 0.2, 0.25)
        assert _cells(ca_cfar(base, 1, 3, pfa=1e-2)) == _cells(ca_cfar(scaled, 1, 3, pfa=1e-2))
        assert _cells(os_cfar(base, 1, 3, 36, pfa=1e-2)) == _cells(os_cfar(scaled, 1, 3, 36, pfa=1e-2))


@pytest.mark.parametrize("detector", ["ca", "os"])
def test_count_non_increasing_as_pfa_decreases(rng, detector):
    rdm = _noise(rng)
    counts = []
    for pfa in [0.2, 0.1, 0.05, 1e-2, 1e-3, 1e-4]:
        if detector == "ca":
            counts.append(len(ca_cfar(rdm, 1, 3, pfa=pfa)))
        else:
            counts.append(len(os_cfar(rdm, 1, 3, 36, pfa=pfa)))
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_db_offset_mode(rng):
    rdm = _noise(rng)
    got = _cells(ca_cfar(rdm, 1, 2, offset_db=6.0))
    ref = oracles.cfar_cells(rdm.power, 1, 2, lambda s, cut: cut > 10**0.6 * (sum(s) / len(s)))
    assert sorted(got) == ref
    counts = [len(ca_cfar(rdm, 1, 2, offset_db=db)) for db in range(1, 9)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    with pytest.raises(ValueError):
        ca_cfar(rdm, 1, 2, pfa=0.1, offset_db=3.0)
    with pytest.raises(ValueError):
        ca_cfar(rdm, 1, 2)


def test_noise_only_false_alarm_rate_small_sample():
    rng = np.random.default_rng(3)
    rdm = RangeDopplerMatrix(rng.exponential(size=(300, 300)), 0.2, 0.25)
    cells = n_tested(rdm, 1, 3)
    for dets in (ca_cfar(rdm, 1, 3, pfa=1e-2), os_cfar(rdm, 1, 3, 36, pfa=1e-2)):
        assert 0.5e-2 <= len(dets) / cells <= 2e-2


def test_window_and_rank_errors(rng):
    rdm = _noise(rng, (8, 8))
    with pytest.raises(WindowTooLarge):
        ca_cfar(rdm, 2, 2, pfa=0.1)
    with pytest.raises(WindowTooLarge):
        os_cfar(rdm, 2, 2, 10, pfa=0.1)
    with pytest.raises(InvalidRank):
        os_cfar(rdm, 1, 1, 17, pfa=0.1)
    with pytest.raises(InvalidRank):
        os_cfar(rdm, 1, 1, 0, pfa=0.1)
    with pytest.raises(ValueError):
        ca_cfar(rdm, 0, 1, pfa=1.0)


def test_rdm_validation():
    with pytest.raises(ValueError):
        RangeDopplerMatrix(np.ones((7, 8)), 1, 1)
    with pytest.raises(ValueError):
        RangeDopplerMatrix(-np.ones((8, 8)), 1, 1)
    with pytest.raises(ValueError):
        RangeDopplerMatrix(np.ones((8, 8)), 1, 1, np.zeros((8, 7)), np.zeros((8, 8)))


def _angled(az, el, shape=(16, 16)):
    return RangeDopplerMatrix(np.ones(shape), 0.5, 0.25, np.full(shape, az), np.full(shape, el))


def test_boresight_point():
    pts = detections_to_points([Detection(10, 3, 20.0)], _angled(0.0, 0.0))
    assert np.allclose(pts, [[0, 5, 0]], atol=1e-15)


def test_zenith_point():
    pts = detections_to_points([Detection(10, 3, 20.0)], _angled(0.0, math.pi / 2))
    assert np.allclose(pts, [[0, 0, 5]], atol=1e-12)


def test_random_angles_match_spherical_oracle(rng):
    az = rng.uniform(-1, 1, (16, 16))
    el = rng.uniform(-0.6, 0.6, (16, 16))
    rdm = RangeDopplerMatrix(np.ones((16, 16)), 0.3, 0.25, az, el)
    dets = [Detection(int(r), int(d), 1.0) for r, d in rng.integers(0, 16, size=(20, 2))]
    pts = detections_to_points(dets, rdm)
    for p, d in zip(pts, dets):
        r = d.range_bin * 0.3
        a, e = az[d.range_bin, d.doppler_bin], el[d.range_bin, d.doppler_bin]
        ref = [r * math.cos(e) * math.sin(a), r * math.cos(e) * math.cos(a), r * math.sin(e)]
        assert np.allclose(p, ref, rtol=1e-14, atol=1e-14)


def test_missing_angle_map(rng):
    with pytest.raises(MissingAngleMap):
        detections_to_points([], _noise(rng))


def test_rdm_round_trip(tmp_path, rng):
    rdm = RangeDopplerMatrix(rng.exponential(size=(10, 12)).astype(np.float32), 0.2, 0.25, rng.normal(size=(10, 12)).astype(np.float32), rng.normal(size=(10, 12)).astype(np.float32))
    write_rdm(rdm, tmp_path, "frame_00000")
    meta = (tmp_path / "frame_00000.json").read_text()
    assert '"RDM v1 10 12 0.2 0.25"' in meta
    back = read_rdm(tmp_path / "frame_00000.json")
    assert np.array_equal(back.power, rdm.power)
    assert np.array_equal(back.azimuth, rdm.azimuth) and np.array_equal(back.elevation, rdm.elevation)
    assert back.range_res == 0.2 and back.doppler_res == 0.25


def test_rdm_read_rejects_truncated_plane(tmp_path, rng):
    write_rdm(_noise(rng, (8, 8)), tmp_path, "x")
    (tmp_path / "x.bin").write_bytes(b"\0" * 12)
    with pytest.raises(ValueError):
        read_rdm(tmp_path / "x.json")
