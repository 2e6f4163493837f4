import csv
import json

import numpy as np
import pytest

from attennkf.eval import harness as H
from attennkf.eval.metrics import Misaligned, TooShort, relative_errors, segment_by_distance, segment_errors, summarize
from attennkf.lie import exp_so3


def straight(length=25.0, n=2501):
    p = np.zeros((n, 3))
    p[:, 0] = np.linspace(0.0, length, n)
    return p


def curvy(n=3000, seed=0):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 30, n)
    yaw = 0.3 * np.sin(0.2 * t)
    R = np.array([exp_so3([0.02 * np.sin(t_), 0.01 * np.cos(t_), y]) for t_, y in zip(t, yaw)])
    v = np.column_stack([0.5 * np.cos(yaw), 0.5 * np.sin(yaw), 0.01 * np.sin(t)])
    p = np.cumsum(v, axis=0) * (t[1] - t[0]) + rng.standard_normal(3)
    return R, v, p


def test_straight_25m_gives_nine_segments():
    segs = segment_by_distance(straight())
    assert len(segs) == 9
    p = straight()
    for s, e in segs:
        assert p[e, 0] - p[s, 0] == pytest.approx(5.0, abs=0.011)
    assert [p[s, 0] for s, _ in segs] == pytest.approx([2.5 * j for j in range(9)], abs=0.011)


@pytest.mark.parametrize("p", [straight(4.0, 401), np.zeros((100, 3))])
def test_too_short(p):
    with pytest.raises(TooShort):
        segment_by_distance(p)


def test_identical_trajectories_give_zero():
    gt = curvy()
    rep = relative_errors(gt, gt, segment_by_distance(gt[2]))
    assert rep.re_rot == (0.0, 0.0) and rep.re_vel == (0.0, 0.0) and rep.re_pos == (0.0, 0.0)


def test_constant_translation_invariance():
    R, v, p = curvy()
    rep = relative_errors((R, v, p + [3.0, -1.0, 2.0]), (R, v, p), segment_by_distance(p))
    assert rep.re_pos[0] < 1e-12


def test_constant_right_yaw_offset_cancels():
    # a right offset cancels in the relative rotation when it commutes with the motion (yaw about z)
    R, v, p = curvy()
    planar = np.array([exp_so3([0.0, 0.0, np.arctan2(r[1, 0], r[0, 0])]) for r in R])
    est = planar @ exp_so3([0.0, 0.0, 0.1]).T
    rep = relative_errors((est, v, p), (planar, v, p), segment_by_distance(p))
    assert rep.re_rot[0] < 1e-9


def test_global_rigid_transform_invariance():
    R, v, p = curvy()
    rng = np.random.default_rng(1)
    est = (np.array([exp_so3(0.01 * rng.standard_normal(3)) @ r for r in R]), v + 0.01, p + 0.05 * rng.standard_normal(p.shape))
    segs = segment_by_distance(p)
    G, t = exp_so3([0.3, -0.2, 1.0]), np.array([5.0, 1.0, -2.0])

    def move(traj):
        r, vv, pp = traj
        return G @ r, vv @ G.T, pp @ G.T + t

    a = segment_errors(est, (R, v, p), segs)
    b = segment_errors(move(est), move((R, v, p)), segs)
    np.testing.assert_allclose(a[:, [0, 2]], b[:, [0, 2]], atol=1e-9)


def test_known_position_drift():
    # estimate drifts 1 cm per metre along x: RE_pos of a 5 m straight segment is 5 cm
    p = straight()
    R = np.repeat(np.eye(3)[None], len(p), axis=0)
    v = np.zeros_like(p)
    est = p * np.array([1.01, 1.0, 1.0])
    rep = relative_errors((R, v, est), (R, v, p), segment_by_distance(p))
    assert rep.re_pos[0] == pytest.approx(0.05, abs=2e-4)


def test_population_std():
    rep = summarize(np.array([[1.0, 0.0, 2.0], [3.0, 0.0, 4.0]]))
    assert rep.re_rot == (2.0, 1.0) and rep.re_pos == (3.0, 1.0) and rep.segments == 2


def test_misaligned():
    R, v, p = curvy()
    with pytest.raises(Misaligned):
        relative_errors((R[:-1], v[:-1], p[:-1]), (R, v, p), segment_by_distance(p))


class FakeEpisode:
    def __init__(self, seed):
        self.R, self.v, self.p = curvy(seed=seed)
        self.t = np.arange(len(self.p)) * 0.01


def test_run_matrix_rows_and_determinism():
    eps = [FakeEpisode(0), FakeEpisode(1)]

    def noisy(scale):
        def run(i, ep):
            return ep.R, ep.v, ep.p + scale * np.sin(np.arange(len(ep.p)))[:, None] * [1.0, 0.0, 0.0]
        return run

    res = H.run_matrix(eps, {"A": [noisy(0.1)], "B": [noisy(0.1)], "C": [noisy(0.0), noisy(0.2)]})
    assert list(res.rows) == ["A", "B", "C"]
    assert res.rows["A"] == res.rows["B"]
    assert res.rows["C"].re_pos[0] > 0 and len(res.per_seed["C"]) == 2
    assert res.mean_re_pos("C") == pytest.approx(0.5 * res.per_seed["C"][1].re_pos[0])


def test_single_estimator_table():
    res = H.run_matrix([FakeEpisode(0)], {"only": [lambda i, ep: (ep.R, ep.v, ep.p)]})
    lines = H.format_table(res.rows).splitlines()
    assert len(lines) == 2 and lines[1].split()[0] == "only"


def test_table_exports_roundtrip(tmp_path):
    res = H.run_matrix([FakeEpisode(0)], {"X": [lambda i, ep: (ep.R, ep.v, ep.p + 0.01 * np.arange(len(ep.p))[:, None] / len(ep.p))]})
    H.write_table_csv(tmp_path / "t.csv", res.rows)
    H.write_table_json(tmp_path / "t.json", res.rows, {"note": 1})
    back = H.load_table_json(tmp_path / "t.json")
    assert back["X"] == res.rows["X"]
    assert json.loads((tmp_path / "t.json").read_text())["note"] == 1
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0][0] == "estimator" and float(rows[1][5]) == res.rows["X"].re_pos[0]


def test_benchmark_reports_percentiles():
    def run(ep, tick):
        for _ in range(200):
            tick()

    tp = H.benchmark_throughput(run, None)
    assert tp.steps == 200 and tp.steps_per_s > 0
    assert tp.p50_ms <= tp.p99_ms


def test_plot_data_columns(tmp_path):
    ep = FakeEpisode(0)
    H.write_plot_data(tmp_path / "p.csv", ep, {"A": (ep.R, ep.v, ep.p)}, np.zeros((len(ep.p), 4)))
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[0] == ["t", "gt_x", "gt_y", "gt_z", "gt_yaw", "A_x", "A_y", "A_z", "A_yaw", "slip_max"]
    assert len(rows) == len(ep.p) + 1
    assert rows[1][1] == rows[1][5]
