import csv

import numpy as np
import pytest

from actmsense.selection import SensorSelection, read_selection_csv, write_selection_csv
from actmsense.simulator import (InputSchedule, NoiseModel, measure, read_trajectory_csv, rollout,
                                 write_trajectory_csv)


def test_noiseless_zero_rollout(hw_a):
    cfg, _ = hw_a
    traj = rollout(np.zeros(cfg.n), InputSchedule.constant(np.zeros(cfg.m), 10), 10, cfg)
    assert np.all(traj.states == 0)


def test_rollout_deterministic_and_methods_agree(kernels, hw_a):
    cfg, ss = hw_a
    sched = InputSchedule.random(cfg, 300, seed=4)
    x0 = np.full(cfg.n, 0.05)
    a = rollout(x0, sched, 300, cfg)
    b = rollout(x0, sched, 300, cfg)
    np.testing.assert_array_equal(a.states, b.states)
    c = rollout(x0, sched, 300, cfg, ss=ss, method="compact")
    assert np.max(np.abs(a.states - c.states)) <= 1e-9


def test_full_selection_measures_states(hw_a):
    cfg, _ = hw_a
    traj = rollout(np.full(cfg.n, 0.03), InputSchedule.random(cfg, 50, seed=1), 50, cfg)
    np.testing.assert_array_equal(traj.measurements, traj.states[:-1])


def test_noise_structure_and_seed(hw_a):
    cfg, ss = hw_a
    sel = SensorSelection.from_indices(cfg.n, [0, 4, 9])
    nm = NoiseModel.standard(ss, sel, q_var=1e-3, seed=7)
    assert nm.q == cfg.m + 3
    np.testing.assert_array_equal(nm.B_w[:, :cfg.m], ss.B_u)
    np.testing.assert_array_equal(nm.D_w[:, cfg.m:], np.eye(3))
    np.testing.assert_allclose(nm.covariance, 1e-3 * np.eye(cfg.m + 3))
    sched = InputSchedule.random(cfg, 200, seed=2)
    t1 = rollout(np.full(cfg.n, 0.05), sched, 200, cfg, nm, sel)
    t2 = rollout(np.full(cfg.n, 0.05), sched, 200, cfg, nm, sel)
    np.testing.assert_array_equal(t1.states, t2.states)
    np.testing.assert_allclose(t1.measurements - t1.states[:-1, sel.indices],
                               t1.disturbances @ nm.D_w.T, rtol=0, atol=1e-15)
    w = nm.sample(20000)
    assert np.var(w, axis=0) == pytest.approx(np.full(nm.q, 1e-3), rel=0.05)


def test_highway_b_measurement_noise(hw_b):
    cfg, ss = hw_b
    sel = SensorSelection.full(cfg.n)
    nm = NoiseModel.standard(ss, sel, q_var=1e-3, r_var=5e-3)
    np.testing.assert_allclose(nm.R, 5e-3 * np.eye(cfg.n))


def test_measure_examples():
    sel = SensorSelection.from_indices(4, [0])
    assert measure(np.array([1.0, 2, 3, 4]), sel).tolist() == [1.0]
    assert measure(np.array([1.0, 2, 3, 4]), SensorSelection.full(4)).tolist() == [1, 2, 3, 4]


def test_schedule_bounds_and_dwell(hw_a):
    cfg, _ = hw_a
    s = InputSchedule.random(cfg, 250, seed=0, dwell=100)
    assert s.U.shape == (250, cfg.m)
    assert np.all(s.U >= 0) and np.all(s.U <= cfg.diagram.capacity)
    assert np.all(s.U[0] == s.U[99]) and np.any(s.U[99] != s.U[100])
    bad = InputSchedule(np.full((5, cfg.m), 10.0))
    with pytest.raises(ValueError):
        rollout(np.zeros(cfg.n), bad, 5, cfg)


def test_trajectory_csv_roundtrip(tmp_path, hw11):
    cfg, _ = hw11
    sel = SensorSelection.from_indices(cfg.n, [1, 2])
    traj = rollout(np.full(cfg.n, 0.04), InputSchedule.random(cfg, 20, seed=3), 20, cfg, selection=sel)
    path = tmp_path / "t.csv"
    write_trajectory_csv(path, traj)
    with open(path) as fh:
        header = next(csv.reader(fh))
    assert header == ["k"] + [f"x_{i}" for i in range(1, 12)] + [f"u_{i}" for i in range(1, 7)] + ["y_1", "y_2"]
    X, U, Y = read_trajectory_csv(path, cfg.n, cfg.m)
    np.testing.assert_allclose(X, traj.states, rtol=1e-11)
    np.testing.assert_allclose(U, traj.inputs, rtol=1e-11)
    np.testing.assert_allclose(Y, traj.measurements, rtol=1e-11)


def test_selection_csv_roundtrip(tmp_path):
    sel = SensorSelection.from_indices(6, [5, 1, 3])
    path = tmp_path / "s.csv"
    write_selection_csv(path, sel, np.arange(6.0))
    rows = list(csv.DictReader(open(path)))
    assert [r["segment_index"] for r in rows] == ["6", "4", "2"]
    assert read_selection_csv(path, 6) == sel
