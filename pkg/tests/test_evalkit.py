import itertools
import json
import math

import numpy as np
import pytest

from qebev.bevscene import SceneConfig, generate_sequence
from qebev.dqem import Detection, DetectionFrame
from qebev.evalkit import (
    MatchResult,
    average_precision,
    evaluate_detections,
    greedy_match,
    hungarian_assign,
    match_detections,
    nds,
    tp_errors,
    write_report,
)
from qebev.numerics import make_rng


def box(x, y, w=1.0, l=2.0, h=1.0, theta=0.0, vx=0.0, vy=0.0, z=1.0):
    return np.array([x, y, z, w, l, h, theta, vx, vy], dtype=float)


def brute_force_cost(cost):
    nr, nc = cost.shape
    best = math.inf
    k = min(nr, nc)
    rows = range(nr)
    for rsel in itertools.permutations(rows, k):
        for csel in itertools.permutations(range(nc), k):
            total = sum(cost[r, c] for r, c in zip(rsel, csel))
            best = min(best, total)
    return best


# ---------------------------------------------------------------- hungarian


def test_hungarian_matches_brute_force():
    rng = make_rng(2)
    for _ in range(50):
        n = int(rng.integers(2, 7))
        cost = rng.uniform(0, 10, size=(n, n))
        pairs = hungarian_assign(cost)
        got = sum(cost[r, c] for r, c in pairs)
        assert got == pytest.approx(brute_force_cost(cost), abs=1e-9)
        assert len({r for r, _ in pairs}) == n
        assert len({c for _, c in pairs}) == n


def test_hungarian_rectangular():
    rng = make_rng(3)
    for shape in ((2, 5), (5, 2), (1, 4), (4, 1)):
        cost = rng.uniform(0, 10, size=shape)
        pairs = hungarian_assign(cost)
        assert pairs.shape[0] == min(shape)
        got = sum(cost[r, c] for r, c in pairs)
        assert got == pytest.approx(brute_force_cost(cost), abs=1e-9)


def test_hungarian_empty():
    assert hungarian_assign(np.zeros((0, 3))).size == 0
    assert hungarian_assign(np.zeros((3, 0))).size == 0


def test_hungarian_known_case():
    cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
    pairs = {tuple(p) for p in hungarian_assign(cost)}
    assert pairs == {(0, 1), (1, 0), (2, 2)}


# ---------------------------------------------------------------- matching


def test_match_simple_pairs_and_leftovers():
    pred = np.stack([box(0, 0), box(5, 0)])
    gt = np.stack([box(0.5, 0), box(5.2, 0), box(20, 0)])
    m = match_detections(pred, gt, threshold=2.0)
    assert m.pairs.tolist() == [[0, 0], [1, 1]]
    assert m.unmatched_pred.tolist() == []
    assert m.unmatched_gt.tolist() == [2]
    assert m.threshold == 2.0


def test_match_threshold_discards_far_pairs():
    pred = np.stack([box(0, 0)])
    gt = np.stack([box(3.0, 0)])
    m = match_detections(pred, gt, threshold=2.0)
    assert m.pairs.size == 0
    assert m.unmatched_pred.tolist() == [0]
    assert m.unmatched_gt.tolist() == [0]


def test_match_is_globally_optimal_on_crossing():
    # two preds between two gts: the assignment minimizing total distance
    # crosses, a nearest-first greedy would not
    pred = np.stack([box(1.0, 0), box(2.0, 0)])
    gt = np.stack([box(2.2, 0), box(0.0, 0)])
    m = match_detections(pred, gt, threshold=5.0)
    assert {tuple(p) for p in m.pairs.tolist()} == {(0, 1), (1, 0)}


def test_match_empty_inputs():
    m = match_detections(np.zeros((0, 9)), np.stack([box(0, 0)]), 2.0)
    assert m.pairs.size == 0 and m.unmatched_gt.tolist() == [0]
    m2 = match_detections(np.stack([box(0, 0)]), np.zeros((0, 9)), 2.0)
    assert m2.pairs.size == 0 and m2.unmatched_pred.tolist() == [0]


def test_greedy_match_follows_score_order():
    # the high-score pred claims the shared gt even though the low-score
    # pred is closer to it
    pred = np.stack([box(0.8, 0), box(0.0, 0)])
    scores = np.array([0.9, 0.1])
    gt = np.stack([box(0.1, 0)])
    m = greedy_match(pred, scores, gt, threshold=2.0)
    assert m.pairs.tolist() == [[0, 0]]
    assert m.unmatched_pred.tolist() == [1]


# ---------------------------------------------------------------- tp errors


def two_pair_match():
    return MatchResult(
        pairs=np.array([[0, 0], [1, 1]]),
        unmatched_pred=np.array([], dtype=int),
        unmatched_gt=np.array([], dtype=int),
        threshold=2.0,
    )


def test_tp_errors_hand_computed():
    pred = np.stack([
        box(1.0, 0.0, w=1.0, l=2.0, h=1.0, theta=0.0, vx=1.0, vy=0.0),
        box(0.0, 2.0, w=2.0, l=2.0, h=2.0, theta=0.5, vx=0.0, vy=0.0),
    ])
    gt = np.stack([
        box(0.0, 0.0, w=1.0, l=2.0, h=1.0, theta=0.0, vx=0.0, vy=0.0),
        box(0.0, 0.0, w=1.0, l=4.0, h=2.0, theta=0.0, vx=0.0, vy=1.0),
    ])
    e = tp_errors(two_pair_match(), pred, gt)
    assert e.ate == pytest.approx((1.0 + 2.0) / 2, abs=1e-12)
    # pair 0 dims identical (ratio product 1), pair 1 ratios 1/2, 2/4, 2/2
    assert e.ase == pytest.approx((0.0 + (1 - 0.25)) / 2, abs=1e-12)
    assert e.aoe == pytest.approx((0.0 + 0.5) / 2, abs=1e-12)
    assert e.ave == pytest.approx((1.0 + 1.0) / 2, abs=1e-12)
    assert e.aae == 0.0
    assert e.matched == 2


def test_tp_errors_orientation_wraps():
    pred = np.stack([box(0, 0, theta=math.pi - 0.1)])
    gt = np.stack([box(0, 0, theta=-math.pi + 0.1)])
    m = MatchResult(np.array([[0, 0]]), np.array([], dtype=int),
                    np.array([], dtype=int), 2.0)
    e = tp_errors(m, pred, gt)
    assert e.aoe == pytest.approx(0.2, abs=1e-12)


def test_tp_errors_velocity_override():
    pred = np.stack([box(0, 0, vx=9.0, vy=9.0)])
    gt = np.stack([box(0, 0, vx=1.0, vy=0.0)])
    m = MatchResult(np.array([[0, 0]]), np.array([], dtype=int),
                    np.array([], dtype=int), 2.0)
    fused = np.array([[1.0, 0.0]])
    e = tp_errors(m, pred, gt, pred_velocity=fused)
    assert e.ave == pytest.approx(0.0, abs=1e-12)


def test_tp_errors_no_matches_saturate():
    m = MatchResult(np.zeros((0, 2), dtype=int), np.array([0]),
                    np.array([0]), 2.0)
    e = tp_errors(m, np.stack([box(0, 0)]), np.stack([box(9, 9)]))
    assert (e.ate, e.ase, e.aoe, e.ave, e.aae) == (1.0, 1.0, 1.0, 1.0, 1.0)
    assert e.matched == 0


# ---------------------------------------------------------------- AP


def test_ap_perfect_detections():
    gt = [np.stack([box(0, 0), box(10, 0)])]
    dets = [Detection(0, box(0, 0), 0.9, 0), Detection(0, box(10, 0), 0.8, 1)]
    assert average_precision(dets, gt, 2.0) == pytest.approx(1.0, abs=1e-12)


def test_ap_all_misses_is_zero():
    gt = [np.stack([box(0, 0)])]
    dets = [Detection(0, box(30, 30), 0.9, 0)]
    assert average_precision(dets, gt, 2.0) == 0.0


def test_ap_no_ground_truth_is_none():
    assert average_precision([Detection(0, box(0, 0), 0.9, 0)],
                             [np.zeros((0, 9))], 2.0) is None


def test_ap_no_detections_is_zero():
    assert average_precision([], [np.stack([box(0, 0)])], 2.0) == 0.0


def test_ap_frozen_interpolation_case():
    # ranked TP, FP, TP over two gts: 50 levels at precision 1, the rest
    # interpolate toward 2/3; the exact 101-point mean is frozen here
    gt = [np.stack([box(0, 0), box(10, 0)])]
    dets = [
        Detection(0, box(0.1, 0), 0.9, 0),
        Detection(0, box(5.0, 0), 0.8, 1),
        Detection(0, box(10.2, 0), 0.7, 2),
    ]
    ap = average_precision(dets, gt, 1.0)
    assert ap == pytest.approx(0.7896039603960394, abs=1e-12)


def test_ap_pools_ranking_across_frames():
    # a confident false positive in frame 1 must depress precision for
    # frame 0's true positives ranked below it
    gt = [np.stack([box(0, 0)]), np.stack([box(0, 0)])]
    dets_clean = [
        Detection(0, box(0, 0), 0.9, 0),
        Detection(1, box(0, 0), 0.8, 0),
    ]
    dets_fp = dets_clean + [Detection(1, box(30, 30), 0.95, 1)]
    ap_clean = average_precision(dets_clean, gt, 2.0)
    ap_fp = average_precision(dets_fp, gt, 2.0)
    assert ap_clean == pytest.approx(1.0, abs=1e-12)
    assert ap_fp < ap_clean


def test_ap_one_gt_cannot_match_twice():
    gt = [np.stack([box(0, 0)])]
    dets = [Detection(0, box(0.1, 0), 0.9, 0), Detection(0, box(0.2, 0), 0.8, 1)]
    ap = average_precision(dets, gt, 2.0)
    # the second detection is a duplicate and counts as a false positive:
    # the final recall level interpolates to precision 0.5, the other 100
    # levels stay at 1.0, so AP = 100.5 / 101
    assert ap == pytest.approx(100.5 / 101, abs=1e-12)


# ---------------------------------------------------------------- NDS


def test_nds_hand_case():
    v = nds(0.5, {"mATE": 0.5, "mASE": 0.25, "mAOE": 1.7, "mAVE": 0.0, "mAAE": 0.0})
    assert v == pytest.approx((2.5 + 0.5 + 0.75 + 0.0 + 1.0 + 1.0) / 10, abs=1e-12)


def test_nds_reproduces_published_rows():
    # three published operating points, each reported to three digits
    rows = [
        (0.454, {"mATE": 0.601, "mASE": 0.272, "mAOE": 0.381,
                 "mAVE": 0.235, "mAAE": 0.168}, 0.561),
        (0.362, {"mATE": 0.756, "mASE": 0.276, "mAOE": 0.399,
                 "mAVE": 0.467, "mAAE": 0.189}, 0.472),
        (0.372, {"mATE": 0.598, "mASE": 0.270, "mAOE": 0.438,
                 "mAVE": 0.367, "mAAE": 0.190}, 0.500),
    ]
    for map_, tp, want in rows:
        assert nds(map_, tp) == pytest.approx(want, abs=5e-4)


def test_nds_saturates_large_errors():
    tp = {"mATE": 3.0, "mASE": 1.0, "mAOE": 2.0, "mAVE": 9.0, "mAAE": 1.5}
    assert nds(0.0, tp) == 0.0
    assert nds(1.0, tp) == 0.5


def test_nds_missing_key_raises():
    with pytest.raises(ValueError, match="mAVE"):
        nds(0.5, {"mATE": 0.5, "mASE": 0.5, "mAOE": 0.5, "mAAE": 0.5})


# ---------------------------------------------------------------- end to end


def perfect_run(seed=1, frames=2):
    cfg = SceneConfig(n_objects=3, background_points=10)
    seq = generate_sequence(cfg, frames, 0.5, make_rng(seed))
    det_frames = []
    for t, fr in enumerate(seq.frames):
        dets = [
            Detection(frame=t, box=b.as_array().copy(), score=0.9, query_id=i)
            for i, b in enumerate(fr.boxes)
        ]
        det_frames.append(
            DetectionFrame(timestamp=fr.timestamp, detections=dets, fused=False)
        )
    return det_frames, seq.frames


def test_evaluate_perfect_detections_scores_one():
    det_frames, scene_frames = perfect_run()
    rep = evaluate_detections(det_frames, scene_frames)
    assert rep.nds_ == pytest.approx(1.0, abs=1e-12)
    assert rep.map_ == pytest.approx(1.0, abs=1e-12)
    assert rep.tp.ate == 0.0 and rep.tp.ave == 0.0
    assert set(rep.per_threshold_ap) == {0.5, 1.0, 2.0, 4.0}


def test_evaluate_frame_count_mismatch_names_counts():
    det_frames, scene_frames = perfect_run()
    with pytest.raises(ValueError, match=r"1.*2|2.*1"):
        evaluate_detections(det_frames[:1], scene_frames)


def test_evaluate_timestamp_mismatch():
    det_frames, scene_frames = perfect_run()
    bad = [DetectionFrame(9.9, det_frames[0].detections, False)] + det_frames[1:]
    with pytest.raises(ValueError, match="timestamp"):
        evaluate_detections(bad, scene_frames)


def test_evaluate_config_echo_and_determinism():
    det_frames, scene_frames = perfect_run()
    cfg = {"seed": 7, "note": "x"}
    a = evaluate_detections(det_frames, scene_frames, config=cfg)
    b = evaluate_detections(det_frames, scene_frames, config=cfg)
    assert a.config == cfg
    assert a.nds_ == b.nds_ and a.per_threshold_ap == b.per_threshold_ap


def test_evaluate_imperfect_below_one():
    det_frames, scene_frames = perfect_run(seed=3)
    # perturb one detection well past the smallest threshold
    det_frames[0].detections[0].box[0] += 0.7
    rep = evaluate_detections(det_frames, scene_frames)
    assert rep.nds_ < 1.0
    assert rep.per_threshold_ap[0.5] < 1.0
    assert rep.per_threshold_ap[4.0] == pytest.approx(1.0, abs=1e-12)


def test_write_report_round_trip(tmp_path):
    det_frames, scene_frames = perfect_run()
    rep = evaluate_detections(det_frames, scene_frames, config={"seed": 1})
    path = tmp_path / "report.json"
    write_report(rep, path)
    data = json.loads(path.read_text())
    assert data["NDS"] == pytest.approx(1.0)
    assert data["mAP"] == pytest.approx(1.0)
    assert data["mATE"] == 0.0
    assert data["per_threshold_AP"]["0.5"] == pytest.approx(1.0)
    assert data["config"] == {"seed": 1}
