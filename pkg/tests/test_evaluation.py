"""Average precision, matching and report rendering against brute references."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from adod.evaluation import (
    EvalConfig,
    average_precision,
    evaluate_detections,
    match_detections,
    mean_ap,
    parse_report_csv,
    precision_recall_points,
    render_report,
    with_class_names,
)
from adod.postprocess import BBox, Detection


def labels_case(rng, n):
    scores = np.sort(rng.uniform(0, 1, n))[::-1]
    flags = rng.uniform(0, 1, n) < 0.4
    labeled = [(float(s), bool(f)) for s, f in zip(scores, flags)]
    tp = int(flags.sum())
    num_gt = tp + int(rng.integers(0, 6))
    return labeled, num_gt


def test_eval_config_validation():
    EvalConfig()
    with pytest.raises(ValueError):
        EvalConfig(iou_match_threshold=0.0)
    with pytest.raises(ValueError):
        EvalConfig(iou_match_threshold=1.0)
    with pytest.raises(ValueError):
        EvalConfig(interpolation="midpoint")


def test_perfect_ranking_gives_unit_ap():
    labeled = [(0.9, True), (0.8, True), (0.7, True)]
    assert average_precision(labeled, 3) == 1.0
    assert average_precision(labeled, 3, "eleven_point") == pytest.approx(1.0)


def test_known_small_ap_case():
    # ranked TP, FP, TP with 2 GT: all-point area = 1*(1/2) + (2/3)*(1/2)
    labeled = [(0.9, True), (0.8, False), (0.7, True)]
    assert average_precision(labeled, 2) == pytest.approx(0.5 + (2.0 / 3.0) / 2.0)


def test_ap_edge_cases():
    assert average_precision([], 5) == 0.0
    assert average_precision([(0.5, False)], 0) == 0.0
    assert average_precision([(0.5, False), (0.4, False)], 3) == 0.0
    with pytest.raises(ValueError, match="num_gt"):
        average_precision([], -1)
    with pytest.raises(ValueError, match="interpolation"):
        average_precision([], 1, "nine_point")


@pytest.mark.parametrize("interpolation", ["all_point", "eleven_point"])
@pytest.mark.parametrize("seed", range(25))
def test_ap_matches_brute_reference(seed, interpolation):
    rng = np.random.default_rng(seed)
    labeled, num_gt = labels_case(rng, int(rng.integers(1, 60)))
    got = average_precision(labeled, num_gt, interpolation)
    want = oracles.ap_brute(labeled, num_gt, interpolation)
    assert got == pytest.approx(want, abs=1e-12)


@given(st.lists(st.booleans(), min_size=1, max_size=40), st.integers(0, 10))
@settings(max_examples=120, deadline=None)
def test_ap_brute_equivalence_property(flags, extra_gt):
    labeled = [(1.0 - i * 1e-3, f) for i, f in enumerate(flags)]
    num_gt = sum(flags) + extra_gt
    for interpolation in ("all_point", "eleven_point"):
        got = average_precision(labeled, num_gt, interpolation)
        assert got == pytest.approx(oracles.ap_brute(labeled, num_gt, interpolation), abs=1e-12)
        assert 0.0 <= got <= 1.0


def test_eleven_point_boundary_guard():
    # recall hits exactly 0.6 after three TPs over 5 GT; the 0.6 grid point
    # must count that precision even when the float sits a hair below
    labeled = [(0.9, True), (0.8, True), (0.7, True)]
    ap = average_precision(labeled, 5, "eleven_point")
    # grid points 0.0 .. 0.6 all see precision 1.0, the rest see nothing
    assert ap == pytest.approx(7.0 / 11.0, abs=1e-12)


def test_mean_ap_rounding():
    assert mean_ap([0.8367, 0.7187, 0.5132, 0.6454, 0.0]) == 54.28
    assert mean_ap([1.0]) == 100.0
    with pytest.raises(ValueError):
        mean_ap([])


def test_match_greedy_takes_best_overlap():
    gt_a = BBox(0.0, 0.0, 0.4, 0.4)
    gt_b = BBox(0.05, 0.05, 0.45, 0.45)
    det = Detection(BBox(0.04, 0.04, 0.44, 0.44), 0, 0.9)
    labeled, num_gt = match_detections([("img", det)], {"img": [gt_a, gt_b]}, 0.5)
    assert labeled == [(0.9, True)]
    assert num_gt == 2
    # the second, lower-scoring duplicate cannot reuse the taken box
    dup = Detection(BBox(0.06, 0.06, 0.46, 0.46), 0, 0.8)
    labeled, _ = match_detections(
        [("img", det), ("img", dup)], {"img": [gt_b]}, 0.5
    )
    assert labeled == [(0.9, True), (0.8, False)]


def test_match_respects_image_boundaries():
    box = BBox(0.1, 0.1, 0.3, 0.3)
    det = Detection(box, 0, 0.9)
    labeled, num_gt = match_detections([("other", det)], {"img": [box]}, 0.5)
    assert labeled == [(0.9, False)]
    assert num_gt == 1


def test_match_below_threshold_is_fp():
    det = Detection(BBox(0.0, 0.0, 0.2, 0.2), 0, 0.9)
    gt = BBox(0.1, 0.1, 0.3, 0.3)  # IoU 1/7
    labeled, _ = match_detections([("img", det)], {"img": [gt]}, 0.5)
    assert labeled == [(0.9, False)]
    labeled, _ = match_detections([("img", det)], {"img": [gt]}, 0.14)
    assert labeled == [(0.9, True)]


def test_match_rank_is_deterministic_under_ties():
    box_a = BBox(0.0, 0.0, 0.2, 0.2)
    box_b = BBox(0.5, 0.5, 0.7, 0.7)
    rows = [
        ("img_b", Detection(box_a, 0, 0.5)),
        ("img_a", Detection(box_b, 0, 0.5)),
        ("img_a", Detection(box_a, 0, 0.5)),
    ]
    labeled, _ = match_detections(rows, {}, 0.5)
    assert [s for s, _ in labeled] == [0.5, 0.5, 0.5]
    # rank order: img_a's boxes lexicographically, then img_b
    rows_sorted = sorted(rows, key=lambda r: (-r[1].score, r[0], r[1].bbox.as_tuple()))
    assert [r[0] for r in rows_sorted] == ["img_a", "img_a", "img_b"]


def test_precision_recall_points_shapes():
    labeled = [(0.9, True), (0.8, False), (0.7, True)]
    recall, precision = precision_recall_points(labeled, 4)
    np.testing.assert_allclose(recall, [0.25, 0.25, 0.5])
    np.testing.assert_allclose(precision, [1.0, 0.5, 2.0 / 3.0])


def test_evaluate_detections_end_to_end():
    gts = {
        "img_a": [(0, BBox(0.1, 0.1, 0.3, 0.3)), (1, BBox(0.5, 0.5, 0.8, 0.8))],
        "img_b": [(0, BBox(0.2, 0.2, 0.4, 0.4))],
    }
    rows = [
        ("img_a", Detection(BBox(0.1, 0.1, 0.3, 0.3), 0, 0.9)),
        ("img_b", Detection(BBox(0.2, 0.2, 0.4, 0.4), 0, 0.8)),
        ("img_a", Detection(BBox(0.5, 0.5, 0.8, 0.8), 1, 0.7)),
        ("img_a", Detection(BBox(0.0, 0.6, 0.2, 0.9), 1, 0.6)),
    ]
    report, pr_curves = evaluate_detections(rows, gts, 2, EvalConfig())
    assert report.ap_percent == (100.0, 100.0)
    assert report.map_percent == 100.0
    assert report.gt_counts == (2, 1)
    assert report.tp_total == 3
    assert report.fp_total == 1
    assert set(pr_curves) == {0, 1}
    recall0, _ = pr_curves[0]
    assert recall0[-1] == 1.0


def test_evaluate_detections_rejects_out_of_range_class():
    rows = [("img", Detection(BBox(0, 0, 0.1, 0.1), 3, 0.5))]
    with pytest.raises(ValueError, match="class 3"):
        evaluate_detections(rows, {}, 2, EvalConfig())


def test_evaluate_detections_empty_inputs():
    report, pr_curves = evaluate_detections([], {}, 3, EvalConfig())
    assert report.ap_percent == (0.0, 0.0, 0.0)
    assert report.map_percent == 0.0
    assert all(r.size == 0 for r, _ in pr_curves.values())


def test_with_class_names():
    report, _ = evaluate_detections([], {}, 2, EvalConfig())
    renamed = with_class_names(report, ["urchin", "kelp"])
    assert renamed.class_names == ("urchin", "kelp")
    with pytest.raises(ValueError, match="class names"):
        with_class_names(report, ["only_one"])


def test_report_rendering_and_csv_round_trip(tmp_path):
    report, _ = evaluate_detections(
        [("img", Detection(BBox(0.1, 0.1, 0.3, 0.3), 0, 0.9))],
        {"img": [(0, BBox(0.1, 0.1, 0.3, 0.3))]},
        2,
        EvalConfig(),
    )
    text = render_report(report, "text")
    assert "mAP" in text and "echinus" in text

    payload = json.loads(render_report(report, "json"))
    assert payload["mAP"] == report.map_percent
    assert payload["counts"]["tp"] == 1

    csv_path = tmp_path / "report.csv"
    csv_path.write_text(render_report(report, "csv"))
    names, aps, gts, map_percent = parse_report_csv(csv_path)
    assert names == list(report.class_names)
    assert aps == list(report.ap_percent)
    assert gts == list(report.gt_counts)
    assert map_percent == report.map_percent

    with pytest.raises(ValueError, match="format"):
        render_report(report, "yaml")
