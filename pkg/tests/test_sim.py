import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drm3d.grid import VoxelGrid
from drm3d.sim import (GroundBaseStation, PowerParams, Scene, Uav, allocate_power, associate_and_schedule,
                       bs_power_process, dbm_to_mw, ground_truth_map, measure_uav, mw_to_dbm, path_gain,
                       path_gain_db, schedule_with_power, shadowing_field, simulate, spawn_uav,
                       step_mobility, thermal_noise_dbm)


def uav(i, pos, vel=(0, 0, 0), dest=None, speed=5.0):
    pos = np.asarray(pos, float)
    return Uav(i, pos, np.asarray(vel, float), pos if dest is None else np.asarray(dest, float), speed)


BOUNDS = (np.zeros(3), np.array([500.0, 500.0, 250.0]))


def test_mobility_straight_line():
    u = uav(0, (0, 0, 100), (5, 0, 0), dest=(400, 0, 100))
    out = step_mobility(u, 1.0, BOUNDS, np.random.default_rng(0))
    np.testing.assert_allclose(out.position, [5, 0, 100])


def test_mobility_zero_velocity_is_fixed_point():
    u = uav(0, (10, 20, 30))
    out = step_mobility(u, 1.0, BOUNDS, np.random.default_rng(0))
    np.testing.assert_array_equal(out.position, u.position)


def test_mobility_arrival_redraws_destination():
    u = uav(0, (498, 0, 100), (5, 0, 0), dest=(500, 0, 100))
    out = step_mobility(u, 1.0, BOUNDS, np.random.default_rng(3))
    np.testing.assert_allclose(out.position, [500, 0, 100])
    assert not np.allclose(out.destination, [500, 0, 100])
    assert math.isclose(np.linalg.norm(out.velocity), 5.0, rel_tol=1e-12)


def test_mobility_stays_in_bounds():
    rng = np.random.default_rng(0)
    u = spawn_uav(0, 10.0, BOUNDS, rng)
    for _ in range(500):
        u = step_mobility(u, 1.0, BOUNDS, rng)
        assert np.all(u.position >= BOUNDS[0]) and np.all(u.position <= BOUNDS[1])


def test_schedule_capacity_not_binding():
    st_ = [GroundBaseStation((0, 0, 0), antenna_streams=4)]
    s = associate_and_schedule([uav(i, (10 * (i + 1), 0, 0)) for i in range(3)], st_)
    assert sorted(s.served[0]) == [0, 1, 2]


def test_schedule_nearest_station():
    st_ = [GroundBaseStation((0, 0, 0)), GroundBaseStation((100, 0, 0))]
    s = associate_and_schedule([uav(7, (30, 0, 0))], st_)
    assert s.served == [[7], []]


def test_schedule_truncates_to_nearest():
    st_ = [GroundBaseStation((0, 0, 0), antenna_streams=2)]
    s = associate_and_schedule([uav(0, (30, 0, 0)), uav(1, (10, 0, 0)), uav(2, (20, 0, 0))], st_)
    assert s.served == [[1, 2]]


def test_schedule_ties_go_to_lower_station():
    st_ = [GroundBaseStation((0, 0, 0)), GroundBaseStation((100, 0, 0))]
    s = associate_and_schedule([uav(0, (50, 0, 0))], st_)
    assert s.served == [[0], []]


def test_allocate_examples():
    st_ = GroundBaseStation((0, 0, 0))
    np.testing.assert_allclose(allocate_power(st_, [uav(0, (7, 0, 0))], 1.0, 4.0), [4.0])
    np.testing.assert_allclose(allocate_power(st_, [uav(0, (7, 0, 0)), uav(1, (90, 0, 0))], 0.0, 10.0), [5, 5])
    np.testing.assert_allclose(allocate_power(st_, [uav(0, (100, 0, 0)), uav(1, (200, 0, 0))], 1.0, 9.0), [3, 6])


def test_allocate_colocated_uses_floor_distance():
    st_ = GroundBaseStation((0, 0, 0))
    # distances floor(1) and 3 -> shares 1/4, 3/4
    out = allocate_power(st_, [uav(0, (0, 0, 0)), uav(1, (3, 0, 0))], 1.0, 8.0, floor_distance=1.0)
    np.testing.assert_allclose(out, [2.0, 6.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(1.0, 1e3), min_size=1, max_size=8), st.floats(0, 3), st.floats(1e-3, 1e3))
def test_allocate_conserves_power(dists, alpha, total):
    st_ = GroundBaseStation((0, 0, 0))
    out = allocate_power(st_, [uav(i, (d, 0, 0)) for i, d in enumerate(dists)], alpha, total)
    assert abs(out.sum() - total) <= 1e-9 * total
    assert np.all(out >= 0)


def test_path_gain_examples():
    st_ = GroundBaseStation((0, 0, 0))
    assert path_gain(st_, (1, 0, 0)) == pytest.approx(-30.0, abs=1e-12)
    assert path_gain(st_, (0, 100, 0)) == pytest.approx(-80.0, abs=1e-12)
    # inside the floor distance the gain saturates
    assert path_gain_db(st_, (0, 0, 0.1), floor_distance=1.0) == pytest.approx(-30.0)


def test_power_process_empty_decays_to_floor():
    p = PowerParams()
    v = bs_power_process(None, None, p, initial_dbm=45.0)
    for n in range(200):
        v = bs_power_process(v, None, p, n)
    assert v == pytest.approx(30.0, abs=1e-9)


def test_power_process_fixed_point_clamped_to_floor():
    p = PowerParams(target_rx_dbm=-70.0)
    v = bs_power_process(None, None, p, initial_dbm=40.0)
    for n in range(200):
        v = bs_power_process(v, -80.0, p, n)
    assert v == pytest.approx(30.0, abs=1e-9)


def test_power_process_slew_and_range():
    p = PowerParams(smoothing=0.0, slew_db=2.0)
    v = bs_power_process(35.0, -120.0, p)  # desired far above max
    assert v == 37.0
    rng = np.random.default_rng(0)
    v = 37.5
    for n in range(1000):
        v2 = bs_power_process(v, rng.uniform(-140, -40), PowerParams(sin_amplitude_db=6.0), n)
        assert 30.0 <= v2 <= 45.0 and abs(v2 - v) <= 3.0 + 1e-12
        v = v2


def small_scene(stations, dims=(8, 8, 4), size=10.0, **kw):
    return Scene(VoxelGrid(dims, size), stations, **kw)


def test_ground_truth_single_term():
    # station placed so the first voxel center is exactly 100 m away
    g = VoxelGrid((1, 1, 1), 2.0)
    st_ = GroundBaseStation((1.0, 1.0, 101.0))
    m = ground_truth_map(Scene(g, [st_]), [40.0], 0)
    assert m.values[0, 0, 0] == pytest.approx(-40.0, abs=1e-12)


def test_ground_truth_two_equal_terms():
    g = VoxelGrid((1, 1, 1), 2.0)
    sts = [GroundBaseStation((1.0, 1.0, 101.0)), GroundBaseStation((1.0, 1.0, -99.0))]
    m = ground_truth_map(Scene(g, sts), [40.0, 40.0], 0)
    assert m.values[0, 0, 0] == pytest.approx(-40 + 10 * math.log10(2), abs=1e-12)
    assert m.values[0, 0, 0] == pytest.approx(-36.99, abs=5e-3)


def test_noise_floor():
    assert thermal_noise_dbm(100e6, 5.0) == pytest.approx(-89.0, abs=1e-12)


def test_measurement_noiseless_equals_map():
    sc = small_scene([GroundBaseStation((40, 40, 0))], meas_sigma_db=0.0)
    m = ground_truth_map(sc, [40.0], 0)
    u = uav(0, (12.0, 33.0, 5.0))
    val, idx, _ = measure_uav(u, sc, m, np.random.default_rng(0), noise_dbm=-np.inf, sigma_db=0.0)
    assert idx == (1, 3, 0)
    assert val == m.values[idx]


def test_measurement_sample_mean():
    sc = small_scene([GroundBaseStation((40, 40, 0))], meas_sigma_db=1.0)
    m = ground_truth_map(sc, [40.0], 0)
    u = uav(0, (12.0, 33.0, 5.0))
    rng = np.random.default_rng(0)
    N = 4000
    vals = [measure_uav(u, sc, m, rng, noise_dbm=-np.inf)[0] for _ in range(N)]
    assert abs(np.mean(vals) - m.values[1, 3, 0]) <= 3.0 / math.sqrt(N)


def test_db_conversions_round_trip():
    x = np.linspace(-150, 50, 11)
    np.testing.assert_allclose(mw_to_dbm(dbm_to_mw(x)), x, atol=1e-12)


def test_schedule_with_power_matches_budget():
    rng = np.random.default_rng(1)
    sts = [GroundBaseStation((100, 100, 25), antenna_streams=3), GroundBaseStation((400, 400, 25), antenna_streams=3)]
    uavs = [spawn_uav(i, 5.0, BOUNDS, rng) for i in range(10)]
    s = schedule_with_power(uavs, sts, [40.0, 33.0], 1.0, 1.0)
    for m, p in enumerate(s.powers_w):
        if len(p):
            assert p.sum() == pytest.approx(10 ** ((40.0, 33.0)[m] / 10) / 1000, rel=1e-9)


def test_shadowing_field_stats():
    g = VoxelGrid((16, 16, 8), 10.0)
    f = shadowing_field(g, 4.0, 30.0, np.random.default_rng(0))
    assert f.shape == g.dims
    assert f.std() == pytest.approx(4.0)
    assert not shadowing_field(g, 0.0, 30.0, np.random.default_rng(0)).any()


def test_simulate_frames_are_consistent():
    sc = small_scene([GroundBaseStation((40, 40, 5), antenna_streams=2)], meas_sigma_db=0.0,
                     power=PowerParams(sin_amplitude_db=6.0))
    rng = np.random.default_rng(0)
    uavs = [spawn_uav(i, 5.0, sc.bounds, rng) for i in range(4)]
    frames = list(simulate(sc, uavs, 6, rng))
    assert [f.time_index for f in frames] == list(range(6))
    for f in frames:
        assert f.values_dbm.shape == (4,)
        assert np.all((f.power_dbm >= 30) & (f.power_dbm <= 45))
        assert np.isfinite(f.radio_map.values).all()
