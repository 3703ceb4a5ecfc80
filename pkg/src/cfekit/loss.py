"""Multibox objective: smooth-L1 localization plus mined softmax cross-entropy."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .anchors import VARIANCES, DefaultBoxSet, MatchAssignment, encode_boxes
from .autograd import Tensor, record_op

log = logging.getLogger(__name__)

NEG_POS_RATIO = 3.0


@dataclass
class LossBreakdown:
    total: float
    loc: float
    conf: float
    num_matched: int
    value: Tensor | None = field(default=None, repr=False)
    negatives: np.ndarray | None = field(default=None, repr=False)


@dataclass
class Targets:
    """Per-image training targets aligned with a DefaultBoxSet."""

    labels: np.ndarray   # (N, M) int
    loc: np.ndarray      # (N, M, 4)

    @property
    def positives(self) -> np.ndarray:
        return self.labels > 0


def build_targets(assignments: list[MatchAssignment], gt_boxes: list[np.ndarray], defaults: DefaultBoxSet,
                  variances=VARIANCES) -> Targets:
    m = len(defaults)
    labels = np.zeros((len(assignments), m), dtype=np.int64)
    loc = np.zeros((len(assignments), m, 4), dtype=np.float64)
    for i, (a, gts) in enumerate(zip(assignments, gt_boxes)):
        labels[i] = a.labels
        pos = a.matched_gt >= 0
        if pos.any():
            loc[i, pos] = encode_boxes(np.asarray(gts, dtype=np.float64)[a.matched_gt[pos]],
                                       defaults.boxes[pos], variances)
    return Targets(labels, loc)


def hard_negative_mining(conf_loss: np.ndarray, positives: np.ndarray, ratio: float) -> np.ndarray:
    """Pick the ``floor(ratio * #positives)`` highest-loss negatives (ties: lower index)."""
    conf_loss = np.asarray(conf_loss, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    neg = np.zeros(conf_loss.shape, dtype=bool)
    cand = np.flatnonzero(~positives)
    n_take = min(int(np.floor(ratio * positives.sum())), len(cand))
    if n_take <= 0:
        return neg
    order = np.argsort(-conf_loss[cand], kind="stable")
    neg[cand[order[:n_take]]] = True
    return neg


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _smooth_l1(d: np.ndarray) -> np.ndarray:
    ad = np.abs(d)
    return np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)


def multibox_loss_from_targets(conf: Tensor, loc: Tensor, targets: Targets, neg_pos_ratio: float = NEG_POS_RATIO,
                               negatives: np.ndarray | None = None) -> LossBreakdown:
    """Loss for flattened predictions ``conf (N, M, K+1)`` and ``loc (N, M, 4)``.

    Mining runs per image.  Passing ``negatives`` freezes the mined set, which
    makes the loss a smooth function of the predictions (used by gradient
    checks).
    """
    if neg_pos_ratio < 0:
        raise ValueError(f"neg_pos_ratio must be non-negative, got {neg_pos_ratio}")
    n, m, k1 = conf.shape
    dt = conf.dtype
    labels = targets.labels
    pos = labels > 0
    num_pos = int(pos.sum())

    logp = _log_softmax(conf.data.astype(np.float64))
    ce = -np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]  # (N, M)
    if negatives is None:
        # background loss ranks negatives
        bg_loss = -logp[..., 0]
        negatives = np.stack([hard_negative_mining(bg_loss[i], pos[i], neg_pos_ratio) for i in range(n)])
    negatives = negatives & ~pos
    sel = pos | negatives

    diff = loc.data.astype(np.float64) - targets.loc
    sl1 = _smooth_l1(diff).sum(axis=-1)

    if num_pos == 0:
        log.debug("multibox_loss: batch has no matched defaults")
        zero = np.asarray(0.0, dtype=dt)
        value = record_op(zero, (conf, loc), lambda g: (np.zeros(conf.shape, dt), np.zeros(loc.shape, dt)))
        return LossBreakdown(0.0, 0.0, 0.0, 0, value, negatives)

    loc_loss = float(sl1[pos].sum()) / num_pos
    conf_loss = float(ce[sel].sum()) / num_pos
    total = loc_loss + conf_loss

    def grad_fn(g):
        scale = float(g) / num_pos
        probs = np.exp(logp)
        probs[np.arange(n)[:, None], np.arange(m)[None, :], labels] -= 1.0
        dconf = (probs * sel[..., None] * scale).astype(dt)
        dsl1 = np.where(np.abs(diff) < 1.0, diff, np.sign(diff))
        dloc = (dsl1 * pos[..., None] * scale).astype(dt)
        return dconf, dloc

    value = record_op(np.asarray(total, dtype=dt), (conf, loc), grad_fn)
    return LossBreakdown(total, loc_loss, conf_loss, num_pos, value, negatives)


def multibox_loss(head_outputs: tuple[Tensor, Tensor], assignments: list[MatchAssignment],
                  gts: list[np.ndarray], defaults: DefaultBoxSet,
                  neg_pos_ratio: float = NEG_POS_RATIO) -> LossBreakdown:
    conf, loc = head_outputs
    return multibox_loss_from_targets(conf, loc, build_targets(assignments, gts, defaults), neg_pos_ratio)
