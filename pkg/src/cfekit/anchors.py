"""Default boxes, IoU, two-stage ground-truth matching and delta coding.

Boxes are ``(x_min, y_min, x_max, y_max)`` in absolute pixels.  Array
functions take ``(M, 4)`` float arrays; :class:`Box` is the scalar form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

VARIANCES = (0.1, 0.1, 0.2, 0.2)


class Box(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.width, self.height]

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "Box":
        return cls(float(x), float(y), float(x + w), float(y + h))


@dataclass(frozen=True)
class TapSpec:
    h: int
    w: int
    stride: int
    scale: float  # pixels
    aspect_ratios: tuple[float, ...]


@dataclass
class DefaultBoxSet:
    boxes: np.ndarray        # (M, 4)
    tap_index: np.ndarray    # (M,)
    scale: np.ndarray        # (M,)
    aspect: np.ndarray       # (M,)
    image_size: int

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass
class MatchAssignment:
    labels: np.ndarray        # (M,) class index, 0 = background
    matched_gt: np.ndarray    # (M,) gt index or -1
    best_default: np.ndarray  # (G,) default index claimed by each gt in the bipartite step

    @property
    def positives(self) -> np.ndarray:
        return self.matched_gt >= 0


def generate_default_boxes(tap_specs: Sequence[TapSpec], image_size: int) -> DefaultBoxSet:
    if not tap_specs:
        raise ValueError("generate_default_boxes needs at least one tap")
    scales = [t.scale for t in tap_specs]
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise ValueError(f"anchor scales must increase with tap depth, got {scales}")
    boxes, taps, sc, ar = [], [], [], []
    for ti, t in enumerate(tap_specs):
        cy, cx = np.meshgrid((np.arange(t.h) + 0.5) * t.stride, (np.arange(t.w) + 0.5) * t.stride, indexing="ij")
        a = len(t.aspect_ratios)
        ratios = np.asarray(t.aspect_ratios, dtype=np.float64)
        bw = t.scale * np.sqrt(ratios)
        bh = t.scale / np.sqrt(ratios)
        cx = np.repeat(cx.reshape(-1), a)
        cy = np.repeat(cy.reshape(-1), a)
        bw = np.tile(bw, t.h * t.w)
        bh = np.tile(bh, t.h * t.w)
        boxes.append(np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=1))
        taps.append(np.full(len(cx), ti))
        sc.append(np.full(len(cx), t.scale))
        ar.append(np.tile(ratios, t.h * t.w))
    out = np.clip(np.concatenate(boxes), 0.0, float(image_size))
    return DefaultBoxSet(out, np.concatenate(taps), np.concatenate(sc), np.concatenate(ar), image_size)


def default_boxes_for(config, input_size: int | None = None) -> DefaultBoxSet:
    """Default boxes matching a network built from ``config`` (an ArchConfig).

    Anchor sizes are fractions of the training input size, so a resized view
    of the network keeps the same pixel-size anchors on a larger grid.
    """
    from .network import TAP_STRIDES

    size = config.input_size if input_size is None else input_size
    specs = [TapSpec(size // s, size // s, s, frac * config.input_size, config.aspect_ratios)
             for s, frac in zip(TAP_STRIDES, config.anchor_scales)]
    return generate_default_boxes(specs, size)


def iou(a: Box, b: Box) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def match_anchors(defaults: DefaultBoxSet | np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray,
                  threshold: float = 0.5) -> MatchAssignment:
    """Two-stage matching.

    Bipartite step: repeatedly take the highest-IoU pair among unassigned
    ground truths and unclaimed defaults (ties: lowest default index, then
    lowest gt index), so every ground truth owns one default.  Threshold
    step: every unclaimed default whose best IoU exceeds ``threshold`` is
    assigned to its best ground truth (ties: lowest gt index).
    """
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    d = defaults.boxes if isinstance(defaults, DefaultBoxSet) else np.asarray(defaults, dtype=np.float64)
    m = len(d)
    if m == 0:
        raise ValueError("match_anchors needs a non-empty default box set")
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    g = len(gt_boxes)
    labels = np.zeros(m, dtype=np.int64)
    matched = np.full(m, -1, dtype=np.int64)
    best_default = np.full(g, -1, dtype=np.int64)
    if g == 0:
        return MatchAssignment(labels, matched, best_default)
    if g > m:
        raise ValueError(f"{g} ground truths cannot each claim a distinct default among {m}")

    ious = iou_matrix(d, gt_boxes)  # (M, G)
    work = ious.copy()
    for _ in range(g):
        # row-major argmax over (M, G): lowest default index wins ties, then lowest gt
        di, gi = divmod(int(np.argmax(work)), g)
        best_default[gi] = di
        matched[di] = gi
        work[di, :] = -1.0
        work[:, gi] = -1.0

    claimed = np.zeros(m, dtype=bool)
    claimed[best_default] = True
    best_gt = np.argmax(ious, axis=1)
    best_iou = ious[np.arange(m), best_gt]
    extra = (~claimed) & (best_iou > threshold)
    matched[extra] = best_gt[extra]
    pos = matched >= 0
    labels[pos] = gt_labels[matched[pos]]
    return MatchAssignment(labels, matched, best_default)


def _centers(boxes: np.ndarray):
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return boxes[..., 0] + w / 2, boxes[..., 1] + h / 2, w, h


def encode_boxes(gt: np.ndarray, defaults: np.ndarray, variances=VARIANCES) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64)
    defaults = np.asarray(defaults, dtype=np.float64)
    gcx, gcy, gw, gh = _centers(gt)
    dcx, dcy, dw, dh = _centers(defaults)
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise ValueError("encode_box: ground-truth width and height must be positive")
    if np.any(dw <= 0) or np.any(dh <= 0):
        raise ValueError("encode_box: default box width and height must be positive")
    v0, v1, v2, v3 = variances
    return np.stack([(gcx - dcx) / (dw * v0), (gcy - dcy) / (dh * v1),
                     np.log(gw / dw) / v2, np.log(gh / dh) / v3], axis=-1)


def decode_boxes(deltas: np.ndarray, defaults: np.ndarray, variances=VARIANCES,
                 clip_to: float | None = None) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=np.float64)
    dcx, dcy, dw, dh = _centers(np.asarray(defaults, dtype=np.float64))
    v0, v1, v2, v3 = variances
    cx = dcx + deltas[..., 0] * v0 * dw
    cy = dcy + deltas[..., 1] * v1 * dh
    # cap the exponent so untrained heads cannot overflow
    w = dw * np.exp(np.minimum(deltas[..., 2] * v2, 10.0))
    h = dh * np.exp(np.minimum(deltas[..., 3] * v3, 10.0))
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)
    if clip_to is not None:
        out = np.clip(out, 0.0, float(clip_to))
    return out


def encode_box(gt: Box, default: Box, variances=VARIANCES) -> tuple[float, float, float, float]:
    return tuple(float(v) for v in encode_boxes(np.asarray(gt), np.asarray(default), variances))


def decode_box(deltas, default: Box, variances=VARIANCES, clip_to: float | None = None) -> Box:
    return Box(*(float(v) for v in decode_boxes(np.asarray(deltas), np.asarray(default), variances, clip_to)))
