"""
Tests for box matching, NDS*, closed gap, augmentation and the benchmark table.
"""

import math
import random
from dataclasses import replace

import numpy as np
import pytest

from mvgc.errors import DegenerateBaseline, InvalidSpec, OutOfRange
from mvgc.evalkit import (
    BENCHMARK_ROWS,
    Box3D,
    EvalConfig,
    benchmark_table,
    box_from_dict,
    closed_gap,
    extrinsic_augment,
    load_boxes,
    match_and_score,
    nds_star,
    render_metrics_table,
    save_boxes,
    wrap_angle,
)


NDS_VERIFIED = [
    ("Lyft->nuScenes", "Oracle", 0.587),
    ("Lyft->nuScenes", "Direct Transfer", 0.213),
    ("Lyft->nuScenes", "CAM-Convs", 0.181),
    ("Lyft->nuScenes", "Single-DGOD", 0.198),
    ("Lyft->nuScenes", "DG-BEV", 0.374),
    ("Lyft->nuScenes", "PD-BEV", 0.344),
    ("Lyft->nuScenes", "Ours", 0.421),
    ("nuScenes->Lyft", "Oracle", 0.684),
    ("nuScenes->Lyft", "Direct Transfer", 0.296),
    ("nuScenes->Lyft", "CAM-Convs", 0.316),
    ("nuScenes->Lyft", "Ours", 0.487),
    ("Waymo->nuScenes", "Direct Transfer", 0.133),
    ("Waymo->nuScenes", "Single-DGOD", 0.007),
    ("Waymo->nuScenes", "DG-BEV", 0.472),
    ("Waymo->nuScenes", "Ours", 0.477),
    ("nuScenes->Waymo", "Oracle", 0.649),
    ("nuScenes->Waymo", "Direct Transfer", 0.178),
    ("nuScenes->Waymo", "CAM-Convs", 0.185),
    ("nuScenes->Waymo", "Single-DGOD", 0.164),
]

GAP_VERIFIED = [
    ("Lyft->nuScenes", "Ours", 55.6),
    ("Lyft->nuScenes", "DG-BEV", 43.0),
    ("Lyft->nuScenes", "CAM-Convs", -8.6),
    ("Lyft->nuScenes", "PD-BEV", 35.0),
    ("Waymo->nuScenes", "Ours", 75.8),
    ("nuScenes->Lyft", "PD-BEV", 41.8),
    ("nuScenes->Waymo", "Ours", 59.7),
    ("Waymo->nuScenes", "CAM-Convs", 18.1),
    ("Waymo->nuScenes", "Single-DGOD", -27.8),
    ("Waymo->nuScenes", "DG-BEV", 74.7),
    ("nuScenes->Lyft", "DG-BEV", 36.3),
    ("nuScenes->Lyft", "Single-DGOD", 9.3),
    ("nuScenes->Lyft", "CAM-Convs", 5.2),
    ("nuScenes->Waymo", "CAM-Convs", 1.5),
    ("nuScenes->Waymo", "Single-DGOD", -3.0),
]


def _row(task, method):
    for row in benchmark_table():
        if row["task"] == task and row["method"] == method:
            return row
    raise KeyError((task, method))


@pytest.fixture
def gts():
    return [
        Box3D(10.0, 2.0, 0.8, 4.2, 1.8, 1.6, 0.1, token="a"),
        Box3D(-5.0, 7.0, 0.8, 4.5, 1.9, 1.5, -1.2, token="b"),
        Box3D(20.0, -12.0, 0.9, 3.9, 1.7, 1.7, 2.5, token="c"),
    ]


# =============================================================================
# Aggregates
# =============================================================================


def test_nds_star_perfect_and_worst():
    """Should give 1 for a perfect detector and 0 with no hits and worst errors."""
    assert nds_star(1.0, 0.0, 0.0, 0.0) == 1.0
    assert nds_star(0.0, 1.0, 1.0, 1.0) == 0.0


def test_nds_star_clips_errors_above_one():
    """Should treat TP errors above 1 as 1."""
    assert nds_star(0.5, 2.0, 3.0, 1.5) == pytest.approx(0.25)


def test_nds_star_monotone():
    """Should never fall as mAP rises and never rise as a TP error grows."""
    levels = [0.0, 0.2, 0.5, 0.9, 1.0, 1.4]
    for a, b in zip(levels, levels[1:]):
        for err in levels:
            if b <= 1.0:
                assert nds_star(b, err, 0.3, 0.3) >= nds_star(a, err, 0.3, 0.3)
            assert nds_star(0.6, b, err, 0.3) <= nds_star(0.6, a, err, 0.3)
            assert nds_star(0.6, err, b, 0.3) <= nds_star(0.6, err, a, 0.3)
            assert nds_star(0.6, 0.3, err, b) <= nds_star(0.6, 0.3, err, a)


def test_nds_star_rejects_out_of_range():
    """Should refuse mAP outside [0, 1], negative or non-finite errors."""
    with pytest.raises(OutOfRange):
        nds_star(1.5, 0.0, 0.0, 0.0)
    with pytest.raises(OutOfRange):
        nds_star(0.5, -0.1, 0.0, 0.0)
    with pytest.raises(OutOfRange):
        nds_star(0.5, math.nan, 0.0, 0.0)


def test_closed_gap_values_and_degenerate():
    """Should measure the recovered share of the gap and refuse a zero gap."""
    assert closed_gap(0.421, 0.213, 0.587) == pytest.approx(55.61, abs=0.01)
    assert closed_gap(0.213, 0.213, 0.587) == 0.0
    assert closed_gap(0.587, 0.213, 0.587) == pytest.approx(100.0)
    with pytest.raises(DegenerateBaseline):
        closed_gap(0.4, 0.5, 0.5)


def test_wrap_angle_half_open_interval():
    """Should wrap into (-pi, pi] with pi kept."""
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(1.5 * math.pi) == pytest.approx(-0.5 * math.pi)
    assert wrap_angle(0.3) == pytest.approx(0.3)


# =============================================================================
# Matching
# =============================================================================


def test_predictions_equal_ground_truth(gts):
    """Should give mAP 1, zero TP errors and NDS* 1."""
    metrics = match_and_score(gts, gts)
    assert metrics.mAP == pytest.approx(1.0)
    assert metrics.mATE == 0.0
    assert metrics.mASE == pytest.approx(0.0, abs=1e-12)
    assert metrics.mAOE == 0.0
    assert metrics.nds == pytest.approx(1.0)


def test_no_predictions(gts):
    """Should give zero mAP and worst TP errors."""
    metrics = match_and_score([], gts)
    assert metrics.mAP == 0.0
    assert (metrics.mATE, metrics.mASE, metrics.mAOE) == (1.0, 1.0, 1.0)
    assert metrics.nds == 0.0


def test_offset_prediction_misses_tight_threshold():
    """Should miss the 0.5 m threshold and report the offset as translation error."""
    gt = Box3D(10.0, 0.0, 0.8, 4.0, 2.0, 1.5, 0.0)
    pred = Box3D(10.7, 0.0, 0.8, 4.0, 2.0, 1.5, 0.0, score=0.9)
    metrics = match_and_score([pred], [gt])
    assert metrics.mAP == pytest.approx(0.75)
    assert metrics.mATE == pytest.approx(0.7)
    assert metrics.nds == pytest.approx((3 * 0.75 + 0.3 + 1.0 + 1.0) / 6)


def test_scale_and_orientation_errors():
    """Should report 1 - IoU of aligned boxes and yaw error over pi."""
    gt = Box3D(5.0, 0.0, 0.8, 4.0, 2.0, 1.5, 0.0)
    pred = Box3D(5.0, 0.0, 0.8, 8.0, 2.0, 1.5, math.pi / 2)
    metrics = match_and_score([pred], [gt])
    assert metrics.mASE == pytest.approx(0.5)
    assert metrics.mAOE == pytest.approx(0.5)


def test_score_order_decides_precision():
    """Should rank a confident false positive ahead of the true positive."""
    gt = Box3D(5.0, 0.0, 0.8, 4.0, 2.0, 1.5, 0.0)
    hit = Box3D(5.0, 0.0, 0.8, 4.0, 2.0, 1.5, 0.0, score=0.5)
    miss = Box3D(30.0, 30.0, 0.8, 4.0, 2.0, 1.5, 0.0, score=0.9)
    assert match_and_score([miss, hit], [gt]).mAP == pytest.approx(0.5)
    confident_hit = Box3D(5.0, 0.0, 0.8, 4.0, 2.0, 1.5, 0.0, score=0.95)
    assert match_and_score([miss, confident_hit], [gt]).mAP == pytest.approx(1.0)


def test_out_of_range_and_other_classes_ignored(gts):
    """Should drop boxes beyond the range and boxes of other classes."""
    extra = [
        Box3D(60.0, 0.0, 0.8, 4.0, 2.0, 1.5, 0.0),
        Box3D(3.0, 3.0, 0.8, 1.0, 0.6, 1.7, 0.0, label="pedestrian"),
    ]
    assert match_and_score(gts, gts + extra).mAP == pytest.approx(1.0)
    assert match_and_score(gts, gts + extra, EvalConfig(range_m=100.0)).mAP < 1.0


def _noisy_detections(seed: int):
    rng = np.random.default_rng(seed)
    gts = [
        Box3D(*rng.uniform(-25, 25, 2), 0.8, *rng.uniform(1.5, 4.5, 3), rng.uniform(-3, 3), token=f"gt{i:02d}")
        for i in range(10)
    ]
    preds = [
        replace(
            gt,
            cx=gt.cx + rng.normal(0.0, 0.6),
            cy=gt.cy + rng.normal(0.0, 0.6),
            l=gt.l * rng.uniform(0.8, 1.2),
            yaw=gt.yaw + rng.normal(0.0, 0.3),
            score=float(rng.uniform(0.2, 1.0)),
            token=f"p{i:02d}",
        )
        for i, gt in enumerate(gts)
    ]
    preds += [
        Box3D(*rng.uniform(-25, 25, 2), 0.8, 4.0, 2.0, 1.5, 0.0, score=float(rng.uniform(0.2, 1.0)), token=f"fp{i}")
        for i in range(3)
    ]
    return preds, gts


def test_match_and_score_ignores_input_order():
    """Should score shuffled predictions and ground truths identically."""
    preds, gts = _noisy_detections(3)
    expected = match_and_score(preds, gts)
    shuffle = random.Random(3)
    for _ in range(5):
        shuffle.shuffle(preds)
        shuffle.shuffle(gts)
        assert match_and_score(preds, gts) == expected


def test_match_and_score_invariant_to_joint_translation():
    """Should score the same after moving predictions and ground truths together."""
    preds, gts = _noisy_detections(4)
    expected = match_and_score(preds, gts)
    moved = match_and_score(
        [replace(p, cx=p.cx + 3.0, cy=p.cy - 4.0) for p in preds],
        [replace(g, cx=g.cx + 3.0, cy=g.cy - 4.0) for g in gts],
    )
    assert 0.0 < expected.mAP < 1.0
    for name, value in expected.to_dict().items():
        assert getattr(moved, name) == pytest.approx(value, abs=1e-9), name


def test_eval_config_validation():
    """Should refuse empty, unsorted or nonpositive thresholds."""
    with pytest.raises(InvalidSpec):
        EvalConfig(thresholds=())
    with pytest.raises(InvalidSpec):
        EvalConfig(thresholds=(2.0, 1.0))
    with pytest.raises(InvalidSpec):
        EvalConfig(range_m=0.0)
    assert EvalConfig(tp_threshold=2.0).tp_distance == 2.0
    assert EvalConfig().tp_distance == 4.0


def test_box_validation():
    """Should refuse empty sizes and scores outside [0, 1]."""
    with pytest.raises(InvalidSpec):
        Box3D(0, 0, 0, 0.0, 1, 1, 0)
    with pytest.raises(InvalidSpec):
        Box3D(0, 0, 0, 1, 1, 1, 0, score=1.5)


# =============================================================================
# Augmentation
# =============================================================================


def test_augment_round_trip(gts):
    """Should restore the boxes after rotating by alpha and back."""
    back = extrinsic_augment(extrinsic_augment(gts, alpha=0.7), alpha=-0.7)
    for before, after in zip(gts, back):
        assert abs(after.cx - before.cx) < 1e-12
        assert abs(after.cy - before.cy) < 1e-12
        assert abs(wrap_angle(after.yaw - before.yaw)) < 1e-12
        assert (after.l, after.w, after.h, after.token) == (before.l, before.w, before.h, before.token)


def test_augment_preserves_metrics(gts):
    """Should leave scores unchanged when predictions and truths rotate together."""
    preds = [Box3D(b.cx + 0.3, b.cy, b.cz, b.l, b.w, b.h, b.yaw + 0.2, score=0.8, token=b.token) for b in gts]
    before = match_and_score(preds, gts)
    after = match_and_score(extrinsic_augment(preds, alpha=1.1), extrinsic_augment(gts, alpha=1.1))
    assert after.mAP == pytest.approx(before.mAP)
    assert after.mATE == pytest.approx(before.mATE)
    assert after.mAOE == pytest.approx(before.mAOE)


def test_augment_random_angle_within_band(gts):
    """Should draw a seeded angle inside the band."""
    first = extrinsic_augment(gts, seed=3, band=0.1)
    second = extrinsic_augment(gts, seed=3, band=0.1)
    assert first == second
    alpha = wrap_angle(first[0].yaw - gts[0].yaw)
    assert abs(alpha) <= 0.1


# =============================================================================
# Files and tables
# =============================================================================


def test_boxes_json_round_trip(tmp_path, gts):
    """Should restore equal boxes from JSON."""
    assert load_boxes(save_boxes(gts, tmp_path / "boxes.json")) == gts


def test_load_boxes_rejects_malformed(tmp_path):
    """Should raise InvalidSpec for non-list files and incomplete records."""
    path = tmp_path / "boxes.json"
    path.write_text('{"cx": 1}')
    with pytest.raises(InvalidSpec):
        load_boxes(path)
    with pytest.raises(InvalidSpec):
        box_from_dict({"cx": 1.0})


def test_benchmark_table_covers_every_row():
    """Should recompute one entry per benchmark row."""
    rows = benchmark_table()
    assert len(rows) == len(BENCHMARK_ROWS)
    assert {row["task"] for row in rows} == {
        "Lyft->nuScenes",
        "nuScenes->Lyft",
        "Waymo->nuScenes",
        "nuScenes->Waymo",
    }


@pytest.mark.parametrize("task,method,nds", NDS_VERIFIED)
def test_benchmark_nds_reproduces(task, method, nds):
    """Should reproduce the reported NDS* from its components within 0.001."""
    assert abs(_row(task, method)["nds_computed"] - nds) <= 0.001


@pytest.mark.parametrize("task,method,gap", GAP_VERIFIED)
def test_benchmark_closed_gap_reproduces(task, method, gap):
    """Should reproduce the reported closed gap within 0.1 points."""
    assert abs(_row(task, method)["closed_gap_computed"] - gap) <= 0.1


def test_render_metrics_table_formats():
    """Should render floats with three decimals and gaps as signed percents."""
    text = render_metrics_table(
        [{"method": "Ours", "nds": 0.4213, "closed_gap": 55.61}, {"method": "DT", "nds": 0.213, "closed_gap": None}]
    )
    lines = text.splitlines()
    assert lines[0].split() == ["method", "nds", "closed_gap"]
    assert "0.421" in lines[2]
    assert "+55.6%" in lines[2]
    assert lines[3].split() == ["DT", "0.213"]
    assert render_metrics_table([]) == ""
