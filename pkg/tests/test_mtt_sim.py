import math
from dataclasses import replace

import numpy as np
import pytest

from stlab.mtt_sim import (ScenarioSampler, SimParams, SimState, measurement_image, new_scenario,
                           propagate, run_simulation, scenario_rng, sense, simulate_frames)


def _state(params, positions, velocities, sensors, seed=0):
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    return SimState(0, pos, np.asarray(velocities, dtype=float).reshape(-1, 2),
                    np.arange(len(pos)), np.asarray(sensors, dtype=float).reshape(-1, 2),
                    scenario_rng(seed), next_id=len(pos))


def test_table_defaults():
    p = SimParams.table1(1000.0)
    assert (p.p_death, p.p_detect, p.sigma_a, p.sigma_v) == (0.05, 0.95, 1.0, 5.0)
    assert (p.eta_r, p.eta_theta, p.sensor_range, p.tau) == (10.0, 0.035, 2000.0, 1.0)
    assert p.lambda_initial == 10.0 and p.lambda_sensor == 0.25
    assert p.lambda_birth == 0.5 and p.lambda_clutter == 40.0
    assert p.window.n_pixels == 128
    q = SimParams.table1(2000.0)
    assert q.lambda_initial == 40.0 and q.lambda_birth == 2.0 and q.lambda_sensor == 1.0
    assert p.rescaled(2000.0) == q


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        SimParams(p_death=1.5)
    with pytest.raises(ValueError):
        SimParams(lambda_clutter=-1)
    with pytest.raises(ValueError):
        SimParams(sensor_range=0)


def test_mean_initial_targets_in_window():
    p = SimParams.table1(1000.0)
    counts = [int(np.sum(p.window.contains(new_scenario(p, 7, i).positions))) for i in range(600)]
    se = np.std(counts) / math.sqrt(len(counts))
    assert abs(np.mean(counts) - 10.0) < 3 * se


def test_empty_scenario_and_determinism():
    p = SimParams.table1(1000.0, lambda_initial=0.0, lambda_sensor=0.0)
    s = new_scenario(p, 1)
    assert len(s.positions) == 0 and len(s.sensors) == 0
    p = SimParams.table1(1000.0)
    a, b = new_scenario(p, 42, 3), new_scenario(p, 42, 3)
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.sensors, b.sensors)
    assert not np.array_equal(a.positions, new_scenario(p, 42, 4).positions)


def test_noise_free_constant_velocity_step():
    p = SimParams.table1(1000.0, sigma_a=0.0, p_death=0.0, lambda_birth=0.0)
    s = _state(p, [0, 0], [1, 2], np.zeros((0, 2)))
    propagate(s, p)
    assert np.allclose(s.positions, [[1, 2]]) and np.allclose(s.velocities, [[1, 2]])
    assert s.n == 1


def test_all_die_without_births():
    p = SimParams.table1(1000.0, p_death=1.0, lambda_birth=0.0)
    s = new_scenario(p, 0)
    propagate(s, p)
    assert len(s.positions) == 0


def test_velocity_noise_variance():
    p = SimParams.table1(1000.0, p_death=0.0, lambda_birth=0.0)
    n = 10_000
    s = _state(p, np.zeros((n, 2)), np.zeros((n, 2)), np.zeros((0, 2)), seed=3)
    propagate(s, p)
    dv = s.velocities
    assert np.var(dv[:, 0]) == pytest.approx(1.0, rel=0.05)
    assert np.var(dv[:, 1]) == pytest.approx(1.0, rel=0.05)
    # position noise is tau^2/2 times the same draw
    assert np.allclose(s.positions, 0.5 * dv)


def test_ids_never_reused():
    p = SimParams.table1(1000.0)
    s = new_scenario(p, 9)
    seen = set(s.ids.tolist())
    for _ in range(20):
        before = s.next_id
        propagate(s, p)
        new = set(s.ids[s.ids >= before].tolist())
        assert not new & seen
        seen |= new
    assert len(np.unique(s.ids)) == len(s.ids)


def test_birth_count_matches_poisson_mean():
    p = SimParams.table1(1000.0, p_death=0.0)
    s = _state(p, np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)), seed=4)
    counts = []
    for _ in range(400):
        before = len(s.positions)
        propagate(s, p)
        counts.append(len(s.positions) - before)
    lam = p.lambda_birth * p.area_factor
    assert abs(np.mean(counts) - lam) < 3 * math.sqrt(lam / len(counts))


def test_noise_free_measurement_mean():
    p = SimParams.table1(1000.0, eta_r=1e-12, eta_theta=1e-12, lambda_clutter=0.0, p_detect=1.0)
    s = _state(p, [3, 4], [0, 0], [0, 0])
    f = sense(s, p)
    assert len(f) == 1
    assert f.range[0] == pytest.approx(5.0)
    assert f.bearing[0] == pytest.approx(math.atan2(4, 3))
    assert np.allclose(f.cartesian(s.sensors), [[3, 4]])


def test_range_gate():
    p = SimParams.table1(1000.0, lambda_clutter=0.0, p_detect=1.0)
    s = _state(p, [p.sensor_range + 1, 0], [0, 0], [0, 0])
    for _ in range(200):
        assert len(sense(s, p)) == 0


def test_detection_frequency():
    p = SimParams.table1(1000.0, lambda_clutter=0.0)
    s = _state(p, [100, 0], [0, 0], [0, 0], seed=8)
    hits = sum(len(sense(s, p)) for _ in range(10_000))
    assert abs(hits / 10_000 - 0.95) < 0.01


def test_measurement_ranges_and_bearings_valid():
    p = SimParams.table1(1000.0)
    s = new_scenario(p, 2)
    for _ in range(5):
        propagate(s, p)
        f = sense(s, p)
        assert np.all(f.range >= 0)
        assert np.all((f.bearing > -math.pi) & (f.bearing <= math.pi))
        assert np.all(f.range[f.clutter] <= p.sensor_range)


def test_clutter_count_per_sensor():
    p = SimParams.table1(1000.0, p_detect=0.0)
    s = _state(p, np.zeros((0, 2)), np.zeros((0, 2)), [[0, 0], [10, 10]], seed=6)
    counts = [len(sense(s, p)) for _ in range(500)]
    assert abs(np.mean(counts) - 80) < 3 * math.sqrt(80 / 500)


def test_outside_sensor_sees_inside_target():
    p = SimParams.table1(1000.0, lambda_clutter=0.0, p_detect=1.0)
    sensor = [p.window_T / 2 + p.sensor_range / 2, 0.0]
    s = _state(p, [0, 0], [0, 0], sensor)
    f = sense(s, p)
    assert len(f) == 1
    img = measurement_image(f, s.sensors, p)
    assert img.total() > 0


def test_run_simulation_pairs():
    p = SimParams.table1(1000.0)
    pairs = run_simulation(p, 20, seed=1, stack_depth=20)
    assert len(pairs) == 1
    x, y = pairs[0]
    assert x.shape == (20, 128, 128) and y.shape == (128, 128)
    assert len(run_simulation(p, 23, seed=1, stack_depth=20)) == 4
    with pytest.raises(ValueError):
        run_simulation(p, 19, seed=1, stack_depth=20)


def test_no_sensors_gives_zero_inputs():
    p = SimParams.table1(1000.0, lambda_sensor=0.0)
    pairs = run_simulation(p, 4, seed=2, stack_depth=3)
    assert all(not x.any() for x, _ in pairs)
    assert any(y.any() for _, y in pairs)


def test_frames_are_deterministic():
    p = SimParams.table1(1000.0)
    a = simulate_frames(p, 6, seed=5, index=2)
    b = simulate_frames(p, 6, seed=5, index=2)
    assert np.array_equal(a.frames, b.frames) and np.array_equal(a.targets, b.targets)


def test_sampler_returns_last_step():
    p = SimParams.table1(1000.0)
    sampler = ScenarioSampler(p, n_steps=5, stack_depth=3)
    x, y, truth = sampler(1000.0, 0, 1)
    traj = simulate_frames(p, 5, 0, 1)
    assert np.array_equal(x, traj.frames[2:5]) and np.array_equal(y, traj.targets[-1])
    assert np.array_equal(truth, traj.truth[-1])
    x2, _, _ = sampler(2000.0, 0, 1)
    assert x2.shape == (3, 256, 256)


def test_rescaled_windows_share_density():
    p = SimParams.table1(1000.0)
    q = p.rescaled(2000.0)
    dens = lambda s: s.lambda_initial * s.area_factor / (2 * s.half_region) ** 2  # noqa: E731
    assert dens(p) == pytest.approx(dens(q))
    assert replace(q, window_T=1000.0).lambda_initial == 40.0
