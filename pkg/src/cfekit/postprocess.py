"""Score filtering, class-wise hard NMS, and single / multi-scale inference."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .anchors import Box, decode_boxes, default_boxes_for, iou_matrix
from .autograd import Tensor
from .network import TAP_STRIDES, DetectorNet, flatten_predictions


@dataclass
class Detection:
    box: Box
    category: int
    score: float
    image_id: int | None = None

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "category_id": int(self.category),
                "bbox": [float(v) for v in self.box.to_xywh()], "score": float(self.score)}


@dataclass
class InferenceParams:
    score_threshold: float = 0.01
    nms_iou: float = 0.45
    max_detections: int = 100
    scales: tuple[float, ...] = (1.0,)
    pre_nms_top_k: int = 200

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if not 0 < self.nms_iou < 1:
            raise ValueError(f"nms_iou must lie in (0, 1), got {self.nms_iou}")
        if not self.scales:
            raise ValueError("scales must be non-empty")
        if any(s <= 0 for s in self.scales):
            raise ValueError(f"scales must be positive, got {self.scales}")
        if self.max_detections < 1:
            raise ValueError("max_detections must be positive")


def nms_hard(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in selection order (ties: lower index first)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise ValueError(f"{len(boxes)} boxes but {len(scores)} scores")
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        ious = iou_matrix(boxes[i : i + 1], boxes[order[1:]])[0]
        order = order[1:][ious <= iou_thresh]
    return np.asarray(keep, dtype=np.int64)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_raw(net: DetectorNet, images: np.ndarray, batch_size: int = 32):
    """Forward ``images`` in inference mode; returns ``(probs (N, M, K+1), boxes (N, M, 4))``."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    was_training = net.training
    net.eval()
    defaults = default_boxes_for(net.config, net.input_size)
    cfg = net.config
    probs, boxes = [], []
    try:
        for s in range(0, len(images), batch_size):
            conf, loc = flatten_predictions(net(Tensor(images[s : s + batch_size])),
                                            cfg.anchors_per_cell, cfg.num_classes)
            probs.append(_softmax(conf.data.astype(np.float64)))
            boxes.append(decode_boxes(loc.data, defaults.boxes, clip_to=net.input_size))
    finally:
        net.train(was_training)
    return np.concatenate(probs), np.concatenate(boxes)


def select_detections(probs: np.ndarray, boxes: np.ndarray, params: InferenceParams,
                      image_size: float | None = None) -> list[Detection]:
    """Per-category threshold and NMS, then global top ``max_detections``."""
    dets: list[Detection] = []
    for k in range(1, probs.shape[1]):
        sc = probs[:, k]
        idx = np.flatnonzero(sc > params.score_threshold)
        if idx.size == 0:
            continue
        if idx.size > params.pre_nms_top_k:
            idx = idx[np.argsort(-sc[idx], kind="stable")[: params.pre_nms_top_k]]
        cand = boxes[idx]
        if image_size is not None:
            cand = np.clip(cand, 0.0, float(image_size))
        ok = (cand[:, 2] > cand[:, 0]) & (cand[:, 3] > cand[:, 1])
        idx, cand = idx[ok], cand[ok]
        for j in nms_hard(cand, sc[idx], params.nms_iou):
            dets.append(Detection(Box(*(float(v) for v in cand[j])), k, float(sc[idx[j]])))
    return _top(dets, params.max_detections)


def _top(dets: list[Detection], n: int) -> list[Detection]:
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in order[:n]]


def _check_size(net: DetectorNet, image: np.ndarray) -> None:
    if image.shape[-2:] != (net.input_size, net.input_size):
        raise ValueError(f"image size {image.shape[-2]}x{image.shape[-1]} != network input {net.input_size}")


def detect_batch(net: DetectorNet, images: np.ndarray, params: InferenceParams,
                 batch_size: int = 32) -> list[list[Detection]]:
    images = np.asarray(images)
    _check_size(net, images)
    probs, boxes = predict_raw(net, images, batch_size)
    return [select_detections(p, b, params) for p, b in zip(probs, boxes)]


def detect_single_scale(net: DetectorNet, image: np.ndarray, params: InferenceParams) -> list[Detection]:
    image = np.asarray(image.data if isinstance(image, Tensor) else image)
    if image.ndim == 4:
        image = image[0]
    _check_size(net, image)
    return detect_batch(net, image[None], params)[0]


# ---------------------------------------------------------------------------
# multi-scale


def scaled_size(size: int, scale: float) -> int:
    target = size * scale
    if abs(target - round(target)) > 1e-9 or round(target) < 1:
        raise ValueError(f"scale {scale} does not map a {size}px image to an integer size")
    return int(round(target))


def resize_nearest(images: np.ndarray, new_size: int) -> np.ndarray:
    """Nearest-neighbour resize of ``(..., H, W)`` square images, pixel-centre aligned."""
    size = images.shape[-1]
    src = np.minimum(((np.arange(new_size) + 0.5) * size / new_size).astype(np.int64), size - 1)
    return images[..., src[:, None], src[None, :]]


def padded_size(size: int) -> int:
    step = TAP_STRIDES[-1]
    return max(2 * step, -(-size // step) * step)


def map_boxes_to_original(boxes: np.ndarray, scale: float, image_size: float | None = None) -> np.ndarray:
    out = np.asarray(boxes, dtype=np.float64) / scale
    if image_size is not None:
        out = np.clip(out, 0.0, float(image_size))
    return out


def _scale_pass(net: DetectorNet, images: np.ndarray, scale: float, params: InferenceParams,
                batch_size: int) -> list[list[Detection]]:
    size = images.shape[-1]
    new = scaled_size(size, scale)
    canvas = padded_size(new)
    resized = resize_nearest(images, new) if new != size else images
    if canvas != new:
        fill = resized.mean(axis=(-2, -1), keepdims=True)
        padded = np.broadcast_to(fill, resized.shape[:-2] + (canvas, canvas)).copy()
        padded[..., :new, :new] = resized
        resized = padded
    view = net if canvas == net.input_size else net.at_size(canvas)
    probs, boxes = predict_raw(view, resized.astype(np.float32), batch_size)
    out = []
    for p, b in zip(probs, boxes):
        b = map_boxes_to_original(b, scale, size)
        out.append(select_detections(p, b, params, image_size=size))
    return out


def detect_multi_scale_batch(net: DetectorNet, images: np.ndarray, params: InferenceParams,
                             batch_size: int = 32) -> list[list[Detection]]:
    """Run each scale, map boxes back, pool per image and apply one final class-wise NMS.

    Pooled detections keep scale order (then per-scale rank) before the final
    NMS so the merge is deterministic.
    """
    images = np.asarray(images)
    _check_size(net, images)
    if not params.scales:
        raise ValueError("scales must be non-empty")
    per_scale = [_scale_pass(net, images, s, params, batch_size) for s in params.scales]
    if len(per_scale) == 1:
        return per_scale[0]
    return [merge_detections([ps[i] for ps in per_scale], params) for i in range(len(images))]


def merge_detections(groups: Sequence[Sequence[Detection]], params: InferenceParams) -> list[Detection]:
    pooled = [d for g in groups for d in g]
    merged: list[Detection] = []
    for k in sorted({d.category for d in pooled}):
        cat = [d for d in pooled if d.category == k]
        boxes = np.array([d.box for d in cat], dtype=np.float64)
        scores = np.array([d.score for d in cat])
        merged.extend(cat[j] for j in nms_hard(boxes, scores, params.nms_iou))
    return _top(merged, params.max_detections)


def detect_multi_scale(net: DetectorNet, image: np.ndarray, params: InferenceParams) -> list[Detection]:
    image = np.asarray(image.data if isinstance(image, Tensor) else image)
    if image.ndim == 4:
        image = image[0]
    return detect_multi_scale_batch(net, image[None], params)[0]


# ---------------------------------------------------------------------------
# JSON lines


def write_detections_jsonl(path, detections: Iterable[Detection]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in detections:
            fh.write(json.dumps(d.to_json()) + "\n")


def read_detections_jsonl(path) -> list[dict]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
        missing = {"image_id", "category_id", "bbox", "score"} - set(rec)
        if missing:
            raise ValueError(f"{path}:{lineno}: missing keys {sorted(missing)}")
        out.append(rec)
    return out
