"""COCO-style AP (IoU sweep, area bands, per category) and BDD-style AP at IoU 0.7.

Matching follows the COCO greedy rule: detections are visited by descending
score and take the highest-IoU unmatched ground truth at or above the IoU
threshold, preferring ground truths inside the evaluated area band.  A
detection matched to an out-of-band ground truth, or unmatched and itself out
of band, is ignored.  AP integrates the precision envelope at 101 recall
points.  Undefined APs (no ground truths and no counted detections) are None
and are left out of means.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .anchors import iou_matrix
from .synth import AnnotationFile

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
BDD_IOU = 0.7
RECALL_POINTS = np.arange(101) / 100.0
AREA_BANDS = ("all", "small", "medium", "large")


def _thr_key(t: float) -> str:
    return f"{t:.2f}"


@dataclass
class EvalReport:
    ap_5095: float | None
    ap_50: float | None
    ap_75: float | None
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None
    ap_iou70: float | None
    per_category: dict[str, float | None]
    per_category_iou70: dict[str, float | None]
    per_threshold: dict[str, float | None] = field(default_factory=dict)
    per_category_by_threshold: dict[str, dict[str, float | None]] = field(default_factory=dict)
    s_map: float | None = None
    s_map_iou70: float | None = None
    small_categories: list[str] = field(default_factory=list)

    HEADLINE = {"coco": "ap_5095", "bdd70": "ap_iou70"}

    def headline(self, iou_mode: str = "coco") -> float | None:
        if iou_mode not in self.HEADLINE:
            raise ValueError(f"unknown iou mode {iou_mode!r}; expected coco or bdd70")
        return getattr(self, self.HEADLINE[iou_mode])

    def summary_fields(self) -> dict[str, float | None]:
        return {k: getattr(self, k) for k in
                ("ap_5095", "ap_50", "ap_75", "ap_small", "ap_medium", "ap_large", "ap_iou70", "s_map")}

    def to_dict(self) -> dict:
        return asdict(self)


def _mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals, dtype=np.float64)) if vals else None


def match_detections(det_boxes: np.ndarray, det_scores: np.ndarray, gt_boxes: np.ndarray, iou_thresh: float,
                     gt_ignore: np.ndarray | None = None, det_ignore_if_unmatched: np.ndarray | None = None,
                     ious: np.ndarray | None = None):
    """Greedy matching for one image and category.

    Returns ``(order, tp, ignored, matched_gt)`` where ``order`` is the
    descending-score visiting order and the other arrays are aligned with it.
    """
    det_scores = np.asarray(det_scores, dtype=np.float64)
    nd, ng = len(det_scores), len(gt_boxes)
    order = np.argsort(-det_scores, kind="stable")
    gt_ignore = np.zeros(ng, dtype=bool) if gt_ignore is None else np.asarray(gt_ignore, dtype=bool)
    det_out = np.zeros(nd, dtype=bool) if det_ignore_if_unmatched is None else np.asarray(det_ignore_if_unmatched)
    if ious is None:
        ious = iou_matrix(det_boxes, gt_boxes) if nd and ng else np.zeros((nd, ng))
    taken = np.zeros(ng, dtype=bool)
    tp = np.zeros(nd, dtype=bool)
    ignored = np.zeros(nd, dtype=bool)
    matched = np.full(nd, -1, dtype=np.int64)
    if ng == 0:
        return order, tp, det_out[order].astype(bool), matched
    for rank, d in enumerate(order):
        best = -1
        for prefer_ignored in (False, True):
            cand = (~taken) & (gt_ignore == prefer_ignored)
            if not cand.any():
                continue
            row = np.where(cand, ious[d], -1.0)
            g = int(np.argmax(row))
            if row[g] >= iou_thresh:
                best = g
                break
        if best >= 0:
            taken[best] = True
            matched[rank] = best
            if gt_ignore[best]:
                ignored[rank] = True
            else:
                tp[rank] = True
        elif det_out[d]:
            ignored[rank] = True
    return order, tp, ignored, matched


def average_precision(tp_flags: Sequence[bool], num_gt: int) -> float | None:
    """101-point interpolated AP for flags already sorted by descending score.

    Returns None when there are no ground truths and no detections.
    """
    tp = np.asarray(tp_flags, dtype=bool)
    if num_gt < 0:
        raise ValueError("num_gt must be non-negative")
    if num_gt == 0:
        return None if tp.size == 0 else 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp, dtype=np.float64)
    cfp = np.cumsum(~tp, dtype=np.float64)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(q.sum(dtype=np.float64) / len(RECALL_POINTS))


def _band_masks(areas: np.ndarray, size_thresholds: tuple[float, float]) -> dict[str, np.ndarray]:
    s2, m2 = size_thresholds[0] ** 2, size_thresholds[1] ** 2
    return {"all": np.ones(areas.shape, dtype=bool), "small": areas < s2,
            "medium": (areas >= s2) & (areas <= m2), "large": areas > m2}


def coco_metrics(dets: Sequence[Mapping], gts: AnnotationFile, size_thresholds: tuple[float, float] = (32, 96),
                 small_categories: Sequence[str] = (), include_empty_as_zero: bool = False) -> EvalReport:
    """Evaluate detection dicts ``{image_id, category_id, bbox [x,y,w,h], score}`` against ``gts``."""
    image_ids = [im.id for im in gts.images]
    known = set(image_ids)
    cats = sorted(gts.categories, key=lambda c: c.id)
    cat_names = {c.id: c.name for c in cats}
    for d in dets:
        if d["image_id"] not in known:
            raise ValueError(f"detection references unknown image_id {d['image_id']}")
        if d["category_id"] not in cat_names:
            raise ValueError(f"detection references unknown category_id {d['category_id']}")

    def xyxy(b):
        return [b[0], b[1], b[0] + b[2], b[1] + b[3]]

    # group by (image, category)
    g_box: dict[tuple[int, int], list] = {}
    for a in gts.annotations:
        g_box.setdefault((a.image_id, a.category_id), []).append(a.bbox)
    d_rec: dict[tuple[int, int], list] = {}
    for d in dets:
        d_rec.setdefault((d["image_id"], d["category_id"]), []).append(d)

    thresholds = sorted(set(IOU_THRESHOLDS) | {BDD_IOU})
    # ap[band][thr][cat]
    ap: dict[str, dict[float, dict[int, float | None]]] = {b: {t: {} for t in thresholds} for b in AREA_BANDS}
    for c in cats:
        cid = c.id
        # per band & threshold: list of (score, image_order, rank, tp)
        pools = {b: {t: [] for t in thresholds} for b in AREA_BANDS}
        ngt = {b: 0 for b in AREA_BANDS}
        for img_pos, iid in enumerate(image_ids):
            gb = np.array([xyxy(b) for b in g_box.get((iid, cid), [])], dtype=np.float64).reshape(-1, 4)
            ga = np.array([b[2] * b[3] for b in g_box.get((iid, cid), [])], dtype=np.float64)
            drs = d_rec.get((iid, cid), [])
            db = np.array([xyxy(d["bbox"]) for d in drs], dtype=np.float64).reshape(-1, 4)
            ds = np.array([float(d["score"]) for d in drs], dtype=np.float64)
            da = np.array([d["bbox"][2] * d["bbox"][3] for d in drs], dtype=np.float64)
            ious = iou_matrix(db, gb) if len(db) and len(gb) else np.zeros((len(db), len(gb)))
            g_bands = _band_masks(ga, size_thresholds)
            d_bands = _band_masks(da, size_thresholds)
            for b in AREA_BANDS:
                ngt[b] += int(g_bands[b].sum())
                if not len(db):
                    continue
                for t in thresholds:
                    order, tp, ign, _ = match_detections(db, ds, gb, t, ~g_bands[b], ~d_bands[b], ious)
                    for rank, d in enumerate(order):
                        if not ign[rank]:
                            pools[b][t].append((ds[d], img_pos, rank, bool(tp[rank])))
        for b in AREA_BANDS:
            for t in thresholds:
                pool = sorted(pools[b][t], key=lambda r: (-r[0], r[1], r[2]))
                ap[b][t][cid] = average_precision([r[3] for r in pool], ngt[b])

    def category_mean(values: dict[int, float | None]) -> float | None:
        if include_empty_as_zero:
            return _mean(0.0 if v is None else v for v in values.values())
        return _mean(values.values())

    coco_t = IOU_THRESHOLDS
    per_thr = {_thr_key(t): category_mean(ap["all"][t]) for t in coco_t}
    band_ap = {b: _mean(category_mean(ap[b][t]) for t in coco_t) for b in AREA_BANDS}
    per_cat = {cat_names[cid]: _mean(ap["all"][t][cid] for t in coco_t) for cid in cat_names}
    per_cat70 = {cat_names[cid]: ap["all"][BDD_IOU][cid] for cid in cat_names}
    per_cat_thr = {_thr_key(t): {cat_names[cid]: ap["all"][t][cid] for cid in cat_names} for t in coco_t}

    report = EvalReport(
        ap_5095=_mean(per_thr.values()),
        ap_50=per_thr[_thr_key(0.5)],
        ap_75=per_thr[_thr_key(0.75)],
        ap_small=band_ap["small"],
        ap_medium=band_ap["medium"],
        ap_large=band_ap["large"],
        ap_iou70=category_mean(ap["all"][BDD_IOU]),
        per_category=per_cat,
        per_category_iou70=per_cat70,
        per_threshold=per_thr,
        per_category_by_threshold=per_cat_thr,
        small_categories=list(small_categories),
    )
    if small_categories:
        report.s_map = small_object_map(report, small_categories)
        report.s_map_iou70 = small_object_map(report, small_categories, per_cat70)
    return report


def small_object_map(report: EvalReport, small_categories: Iterable[str],
                     per_category: Mapping[str, float | None] | None = None) -> float:
    """Mean per-category AP over ``small_categories`` (undefined entries count as 0)."""
    names = list(small_categories)
    if not names:
        raise ValueError("small_categories must be non-empty")
    table = report.per_category if per_category is None else per_category
    unknown = [n for n in names if n not in table]
    if unknown:
        raise KeyError(f"unknown categories: {unknown}")
    vals = [table[n] or 0.0 for n in names]
    return float(sum(vals) / len(vals))


def annotations_as_detections(gts: AnnotationFile, score: float = 1.0) -> list[dict]:
    """Ground truth rewritten as detections (a perfect oracle)."""
    return [{"image_id": a.image_id, "category_id": a.category_id, "bbox": list(a.bbox), "score": score}
            for a in gts.annotations]


def write_report_json(path, report: EvalReport, extra: Mapping | None = None) -> None:
    data = report.to_dict()
    if extra:
        data.update(extra)
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True), encoding="utf-8")


def write_per_category_csv(path, report: EvalReport) -> None:
    """Per-category AP x100, one row per category plus a mean row."""
    def pct(v):
        return "" if v is None else f"{100.0 * v:.2f}"

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "AP_iou70", "AP_50_95", "AP_50", "AP_75"])
        by_thr = report.per_category_by_threshold
        for name in report.per_category:
            w.writerow([name, pct(report.per_category_iou70[name]), pct(report.per_category[name]),
                        pct(by_thr["0.50"][name]), pct(by_thr["0.75"][name])])
        w.writerow(["mean", pct(report.ap_iou70), pct(report.ap_5095), pct(report.ap_50), pct(report.ap_75)])
