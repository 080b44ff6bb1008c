import math

import numpy as np
import pytest

from _oracles import brute_force_amtp, erfinv_bisection
from stlab.convnet import LayerSpec, init_network
from stlab.mid import (ChannelParams, amtp, evaluate_mid, gen_task_config, heuristic_placer,
                       mid_training_pairs, mst_kruskal, mst_prim, power_required, rows_to_csv,
                       task_count)
from stlab.raster import PointSet


def test_task_counts():
    assert task_count(320) == 5 and task_count(640) == 20 and task_count(1600) == 125
    sc = gen_task_config(320, seed=1)
    assert len(sc.task_agents) == 5
    assert np.all(np.abs(sc.task_agents.points) <= 160)
    assert np.array_equal(gen_task_config(640, 3).task_agents.points,
                          gen_task_config(640, 3).task_agents.points)
    with pytest.raises(ValueError):
        gen_task_config(0, 1)


def test_power_examples():
    ch = ChannelParams()
    assert power_required(0.0) == 0.0
    assert power_required(200.0) == pytest.approx(2 ** 2.52 * power_required(100.0))
    ref = erfinv_bisection(0.5) ** 2 * 1e-7 * 100 ** 2.52 / 5e-6
    assert power_required(100.0, ch) == pytest.approx(ref, rel=1e-10)
    assert power_required(100.0) == pytest.approx(498.8, abs=0.05)
    with pytest.raises(ValueError):
        power_required(-1.0)
    with pytest.raises(ValueError):
        ChannelParams(rate=1.0)


def test_power_increasing_and_convex():
    d = np.linspace(1e-3, 1e4, 20001)
    p = power_required(d)
    assert np.all(np.diff(p) > 0)
    assert np.all(np.diff(p, 2) >= -1e-9 * p[1:-1])


def test_amtp_small_cases():
    assert amtp([[0, 0], [100, 0]]) == pytest.approx(power_required(100.0))
    assert amtp([[0, 0], [100, 0], [200, 0]]) == pytest.approx(power_required(100.0))
    with pytest.raises(ValueError):
        amtp([[0, 0]])


def test_amtp_matches_spanning_tree_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(40):
        n = int(rng.integers(2, 7))
        pts = rng.uniform(-200, 200, (n, 2))
        assert amtp(pts) == brute_force_amtp(pts, power_required)
        assert amtp(pts, method="prim") == amtp(pts)


def test_mst_algorithms_agree_with_ties():
    pts = np.array([[0, 0], [1, 0], [0, 1], [1, 1], [2, 0]], float)
    w = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    assert sorted(mst_kruskal(w)) == mst_prim(w)


def test_amtp_rigid_invariance():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-100, 100, (12, 2))
    a = rng.uniform(0, 2 * math.pi)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    moved = pts @ rot.T + [350.0, -20.0]
    assert amtp(moved) == pytest.approx(amtp(pts), rel=1e-9)


def test_heuristic_examples():
    assert len(heuristic_placer(PointSet([[0, 0], [90, 0]]), 100)) == 0
    comm = heuristic_placer(PointSet([[0, 0], [250, 0]]), 100).points
    assert np.allclose(sorted(comm[:, 0]), [250 / 3, 500 / 3]) and np.allclose(comm[:, 1], 0)
    with pytest.raises(ValueError):
        heuristic_placer(PointSet([[0, 0]]), 10)


def test_heuristic_hops_bounded():
    for seed in range(10):
        sc = gen_task_config(640, seed)
        comm = heuristic_placer(sc.task_agents, 30.0)
        agents = np.concatenate([sc.task_agents.points, comm.points])
        w = np.sqrt(((agents[:, None] - agents[None]) ** 2).sum(-1))
        assert max(w[i, j] for i, j in mst_kruskal(w)) <= 30.0 + 1e-9
        assert amtp(agents) <= power_required(30.0) * (1 + 1e-12)


def test_evaluate_rows_and_csv():
    rows = evaluate_mid("heuristic", [320, 640], 3, seed=2)
    assert [r["task_agents"] for r in rows] == [5, 20]
    text = rows_to_csv(rows)
    assert text.splitlines()[0] == "window_m,task_agents,comm_agents_mean,amtp_mean_mw,amtp_std_mw"
    assert rows_to_csv(evaluate_mid("heuristic", [320, 640], 3, seed=2)) == text
    one = evaluate_mid("heuristic", [320], 1, seed=2)
    assert one[0]["amtp_std_mw"] == 0.0
    with pytest.raises(ValueError):
        evaluate_mid("heuristic", [100], 2)


def test_std_shrinks_with_scale():
    rows = evaluate_mid("heuristic", [320, 960], 30, seed=5)
    assert rows[1]["amtp_std_mw"] < rows[0]["amtp_std_mw"]


def test_network_placer_runs_on_padded_window():
    specs = [LayerSpec("encoder", 1, 4, 3, 2), LayerSpec("decoder", 4, 1, 3, 2)]
    params = init_network(specs, seed=0)
    # 333.75 m at 1.25 m/px is 267 px, which the stride-2 net cannot take unpadded
    rows = evaluate_mid(params, [333.75], 2, seed=0)
    assert rows[0]["task_agents"] == 5 and np.isfinite(rows[0]["amtp_mean_mw"])


def test_surrogate_pairs():
    x, y = mid_training_pairs(320.0, 2, seed=0)
    assert x.shape == y.shape == (2, 1, 256, 256)
    assert 2.5 < x[0].sum() <= 5 + 1e-6
