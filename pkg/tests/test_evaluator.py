import math
from dataclasses import asdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfekit.evaluator import (
    IOU_THRESHOLDS,
    annotations_as_detections,
    average_precision,
    coco_metrics,
    match_detections,
    small_object_map,
    write_per_category_csv,
)
from cfekit.synth import Annotation, AnnotationFile, Category, ImageRecord, generate_dataset, toy_scene_spec
from oracles import ap_ref, coco_ref, greedy_match_ref

SUMMARY = ("ap_5095", "ap_50", "ap_75", "ap_small", "ap_medium", "ap_large", "ap_iou70")


def random_instance(seed, n_images=3, n_cats=3, size=200.0):
    """Ground truth across all area bands plus jittered and spurious detections."""
    rng = np.random.default_rng(seed)
    images = [ImageRecord(i, int(size), int(size), f"{i}.cfei") for i in range(n_images)]
    cats = [Category(c + 1, f"c{c}") for c in range(n_cats)]
    anns, dets = [], []
    for iid in range(n_images):
        for _ in range(int(rng.integers(0, 6))):
            side = float(np.exp(rng.uniform(np.log(4), np.log(150))))
            w, h = side * rng.uniform(0.7, 1.3), side * rng.uniform(0.7, 1.3)
            w, h = min(w, size - 1), min(h, size - 1)
            x, y = rng.uniform(0, size - w), rng.uniform(0, size - h)
            cid = int(rng.integers(1, n_cats + 1))
            anns.append(Annotation(len(anns) + 1, iid, cid, [x, y, w, h]))
            for _ in range(int(rng.integers(0, 3))):
                j = rng.normal(0, 0.15 * side, 4)
                dets.append({"image_id": iid, "category_id": cid, "score": float(rng.random()),
                             "bbox": [x + j[0], y + j[1], max(1.0, w + j[2]), max(1.0, h + j[3])]})
        for _ in range(int(rng.integers(0, 5))):
            side = float(np.exp(rng.uniform(np.log(4), np.log(150))))
            x, y = rng.uniform(0, size - side, 2)
            dets.append({"image_id": iid, "category_id": int(rng.integers(1, n_cats + 1)),
                         "score": float(rng.random()), "bbox": [x, y, side, side]})
    if seed % 3 == 0:
        for d in dets:
            d["score"] = round(d["score"], 1)  # ties across images
    return AnnotationFile(images, anns, cats), dets


def plain(gts):
    return [im.id for im in gts.images], [asdict(a) for a in gts.annotations], [asdict(c) for c in gts.categories]


def close(a, b, tol=1e-9):
    if a is None or b is None:
        return a is None and b is None
    return abs(a - b) <= tol


# -- matching -------------------------------------------------------------------


def test_single_exact_detection_is_tp():
    _, tp, ign, matched = match_detections(np.array([[0, 0, 5, 5.0]]), np.array([0.7]), np.array([[0, 0, 5, 5.0]]), 0.5)
    assert tp.tolist() == [True] and not ign.any() and matched.tolist() == [0]


def test_double_detection_rule():
    order, tp, _, _ = match_detections(np.array([[0, 0, 5, 5.0], [0, 0, 5, 5.0]]), np.array([0.3, 0.9]),
                                       np.array([[0, 0, 5, 5.0]]), 0.5)
    assert order.tolist() == [1, 0] and tp.tolist() == [True, False]


def test_matching_agrees_with_brute_force():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        gts = rng.uniform(0, 40, (5, 2))
        gts = np.concatenate([gts, gts + rng.uniform(3, 20, (5, 2))], axis=1)
        src = gts[rng.integers(0, 5, 20)]
        dets = src + rng.normal(0, 3, (20, 4))
        dets[:, 2:] = np.maximum(dets[:, 2:], dets[:, :2] + 0.5)
        scores = np.round(rng.random(20), 1)
        order, tp, _, _ = match_detections(dets, scores, gts, 0.5)
        status, visit = greedy_match_ref([(d.tolist(), s) for d, s in zip(dets, scores)], gts.tolist(), 0.5)
        assert order.tolist() == visit
        assert tp.tolist() == [status[i] == "tp" for i in visit], seed


# -- average precision ------------------------------------------------------------


def test_ap_examples():
    assert average_precision([True, True], 2) == 1.0
    assert average_precision([False, False], 3) == 0.0
    assert average_precision([], 3) == 0.0
    assert average_precision([], 0) is None
    assert average_precision([False], 0) == 0.0


def test_ap_hand_curve():
    # recall 0.5 at precision 1, recall 1.0 at precision 2/3
    expected = (51 * 1.0 + 50 * (2 / 3)) / 101
    assert average_precision([True, False, True], 2) == pytest.approx(expected, abs=1e-12)
    assert ap_ref([True, False, True], 2) == pytest.approx(expected, abs=1e-12)


@given(st.lists(st.booleans(), max_size=40), st.integers(0, 30))
@settings(max_examples=100, deadline=None)
def test_ap_matches_reference(flags, extra):
    num_gt = sum(flags) + extra
    got, ref = average_precision(flags, num_gt), ap_ref(flags, num_gt)
    assert close(got, ref, 1e-12)
    if got is not None:
        assert 0.0 <= got <= 1.0


def test_ap_rejects_negative_gt_count():
    with pytest.raises(ValueError):
        average_precision([True], -1)


# -- coco_metrics -----------------------------------------------------------------


def test_perfect_detector_scores_one():
    gts, _ = random_instance(5)
    rep = coco_metrics(annotations_as_detections(gts), gts)
    for k in SUMMARY:
        v = getattr(rep, k)
        assert v is None or v == 1.0, k
    assert rep.ap_5095 == 1.0


def test_empty_detections_score_zero():
    gts, _ = random_instance(7)
    rep = coco_metrics([], gts)
    for k in SUMMARY:
        v = getattr(rep, k)
        assert v is None or v == 0.0, k
    assert rep.ap_5095 == 0.0


def test_unknown_references_rejected():
    gts, dets = random_instance(1)
    with pytest.raises(ValueError):
        coco_metrics([{**dets[0], "image_id": 999}] if dets else [{"image_id": 999, "category_id": 1,
                                                                  "bbox": [0, 0, 1, 1], "score": 1.0}], gts)
    with pytest.raises(ValueError):
        coco_metrics([{"image_id": 0, "category_id": 99, "bbox": [0, 0, 1, 1], "score": 1.0}], gts)


def test_three_image_instance_matches_oracle_in_full():
    gts, dets = random_instance(11)
    rep = coco_metrics(dets, gts, small_categories=["c0"])
    ref = coco_ref(dets, *plain(gts), small=["c0"])
    for k in SUMMARY + ("s_map",):
        assert close(getattr(rep, k), ref[k]), k
    for name, v in ref["per_category"].items():
        assert close(rep.per_category[name], v), name


def test_coco_metrics_matches_oracle_on_100_instances():
    for seed in range(100):
        gts, dets = random_instance(seed)
        rep = coco_metrics(dets, gts)
        ref = coco_ref(dets, *plain(gts))
        for k in SUMMARY:
            assert close(getattr(rep, k), ref[k]), (seed, k, getattr(rep, k), ref[k])


def test_per_threshold_mean_and_dominance():
    for seed in range(20):
        gts, dets = random_instance(seed)
        rep = coco_metrics(dets, gts)
        vals = [rep.per_threshold[f"{t:.2f}"] for t in IOU_THRESHOLDS]
        if rep.ap_5095 is not None:
            assert rep.ap_5095 == pytest.approx(sum(vals) / 10, abs=1e-9)
        for name in rep.per_category:
            a50 = rep.per_category_by_threshold["0.50"][name]
            a75 = rep.per_category_by_threshold["0.75"][name]
            if a50 is not None:
                assert a50 >= a75 >= 0.0


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_ap_depends_only_on_score_ranking(seed):
    gts, dets = random_instance(seed)
    warped = [{**d, "score": math.exp(3 * d["score"]) / 30} for d in dets]
    a, b = coco_metrics(dets, gts), coco_metrics(warped, gts)
    for k in SUMMARY:
        assert close(getattr(a, k), getattr(b, k), 1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_duplicate_false_positive_never_helps(seed):
    gts, dets = random_instance(seed)
    rep = coco_metrics(dets, gts)
    fps = [d for d in dets if d["category_id"] not in {a.category_id for a in gts.annotations
                                                        if a.image_id == d["image_id"]}]
    if not fps:
        return
    worse = coco_metrics(dets + [dict(fps[0])], gts)
    for k in SUMMARY:
        before, after = getattr(rep, k), getattr(worse, k)
        if before is not None and after is not None:
            assert after <= before + 1e-12


def test_area_bands_partition_ground_truth():
    gts, _ = random_instance(3, n_images=6)
    areas = [a.bbox[2] * a.bbox[3] for a in gts.annotations]
    small = sum(a < 32 ** 2 for a in areas)
    medium = sum(32 ** 2 <= a <= 96 ** 2 for a in areas)
    large = sum(a > 96 ** 2 for a in areas)
    assert small + medium + large == len(areas)
    # recall only from one band: a perfect detector restricted to small gts is perfect on small only
    keep = [d for d in annotations_as_detections(gts) if d["bbox"][2] * d["bbox"][3] < 32 ** 2]
    rep = coco_metrics(keep, gts)
    if small:
        assert rep.ap_small == 1.0
    if medium:
        assert rep.ap_medium == 0.0


def test_empty_category_flag():
    gts, dets = random_instance(2)
    gts.categories.append(Category(99, "never"))
    default = coco_metrics(dets, gts)
    zeroed = coco_metrics(dets, gts, include_empty_as_zero=True)
    assert default.per_category["never"] is None
    if default.ap_50:
        assert zeroed.ap_50 < default.ap_50


# -- small-object mAP ---------------------------------------------------------------


def test_small_object_map_arithmetic():
    gts, dets = random_instance(4)
    rep = coco_metrics(dets, gts)
    rep.per_category = {"a": 0.4, "b": 0.2, "c": None}
    assert small_object_map(rep, ["a"]) == pytest.approx(0.4)
    assert small_object_map(rep, ["a", "b"]) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        small_object_map(rep, [])
    with pytest.raises(KeyError):
        small_object_map(rep, ["zzz"])


def test_small_object_map_on_synthetic_categories():
    images, ann = generate_dataset(toy_scene_spec(64, seed=9), 30)
    rng = np.random.default_rng(0)
    dets = [{**d, "score": float(rng.random()), "bbox": [v + rng.normal(0, 1.0) for v in d["bbox"]]}
            for d in annotations_as_detections(ann)]
    small = ["traffic light", "traffic sign"]
    rep = coco_metrics(dets, ann, small_categories=small)
    expected = (rep.per_category[small[0]] + rep.per_category[small[1]]) / 2
    assert rep.s_map == pytest.approx(expected, abs=1e-12)


def test_per_category_csv(tmp_path):
    gts, dets = random_instance(6)
    rep = coco_metrics(dets, gts)
    p = tmp_path / "per_category.csv"
    write_per_category_csv(p, rep)
    rows = p.read_text().splitlines()
    assert rows[0] == "category,AP_iou70,AP_50_95,AP_50,AP_75"
    assert len(rows) == len(gts.categories) + 2 and rows[-1].startswith("mean,")
