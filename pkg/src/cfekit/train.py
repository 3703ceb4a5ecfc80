"""Momentum SGD and the deterministic training loop."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .anchors import default_boxes_for, match_anchors
from .autograd import Tape, Tensor, backward
from .loss import NEG_POS_RATIO, Targets, build_targets, multibox_loss_from_targets
from .network import DetectorNet, flatten_predictions
from .serialization import save_weights

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e4


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrainSchedule:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    neg_pos_ratio: float = NEG_POS_RATIO
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    grad_clip_norm: float | None = None

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive integers")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive when set")

    def lr_at(self, epoch: int) -> float:
        n = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.learning_rate * self.lr_decay_factor ** n

    @classmethod
    def load(cls, path) -> "TrainSchedule":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        extra = set(data) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown training config keys: {sorted(extra)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d


class SGD:
    """Momentum SGD with decoupled weight decay on rank-4 conv weights."""

    def __init__(self, params: dict[str, Tensor], schedule: TrainSchedule):
        self.params = params
        self.lr = schedule.learning_rate
        self.momentum = schedule.momentum
        self.clip = schedule.grad_clip_norm
        self.weight_decay = schedule.weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.incidents = 0

    def step(self, grads: dict[str, np.ndarray]) -> bool:
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.incidents += 1
            log.warning("non-finite gradient; step skipped (%d so far)", self.incidents)
            return False
        scale = 1.0
        if self.clip is not None:
            norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
            if norm > self.clip:
                scale = self.clip / norm
        lr = self.lr
        for name, p in self.params.items():
            g = grads[name] if scale == 1.0 else grads[name] * scale
            v = self.velocity[name]
            if self.momentum:
                v *= self.momentum
                v += g
                upd = v
            else:
                upd = g
            if self.weight_decay and p.data.ndim == 4:
                p.data -= (lr * self.weight_decay) * p.data
            p.data -= (lr * upd).astype(p.data.dtype)
        return True


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], schedule: TrainSchedule,
             optimizer: SGD | None = None) -> SGD:
    """One update; pass the returned optimizer back in to keep velocity state."""
    opt = optimizer or SGD(params, schedule)
    opt.step(grads)
    return opt


@dataclass
class EpochLoss:
    epoch: int
    loc: float
    conf: float
    total: float


@dataclass
class TrainResult:
    net: DetectorNet
    trace: list[EpochLoss]
    incidents: int = 0
    files: dict[str, str] = field(default_factory=dict)


def prepare_targets(net: DetectorNet, boxes: list[np.ndarray], labels: list[np.ndarray]) -> Targets:
    defaults = default_boxes_for(net.config)
    assignments = [match_anchors(defaults, b, lab, 0.5) for b, lab in zip(boxes, labels)]
    return build_targets(assignments, boxes, defaults)


def write_trace_csv(path, trace: list[EpochLoss]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loc", "conf", "total"])
        for e in trace:
            w.writerow([e.epoch, repr(e.loc), repr(e.conf), repr(e.total)])


def train(net: DetectorNet, dataset, schedule: TrainSchedule, out_dir=None,
          on_epoch: Callable[[EpochLoss], None] | None = None) -> TrainResult:
    """Train ``net`` in place on ``dataset`` (a DetectionSet).

    Shuffling is driven by ``schedule.seed`` only, so identical inputs give
    bit-identical weights and traces.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("training dataset is empty")
    targets = prepare_targets(net, dataset.boxes, dataset.labels)
    params = net.named_parameters()
    opt = SGD(params, schedule)
    rng = np.random.default_rng(schedule.seed)
    k = net.config.num_classes
    a = net.config.anchors_per_cell
    trace: list[EpochLoss] = []
    net.train()

    for epoch in range(schedule.epochs):
        opt.lr = schedule.lr_at(epoch)
        order = rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for start in range(0, n, schedule.batch_size):
            idx = np.sort(order[start : start + schedule.batch_size])
            x = Tensor(dataset.images[idx])
            batch_targets = Targets(targets.labels[idx], targets.loc[idx])
            with Tape() as tape:
                conf, loc = flatten_predictions(net(x), a, k)
                lb = multibox_loss_from_targets(conf, loc, batch_targets, schedule.neg_pos_ratio)
            if not np.isfinite(lb.total) or lb.total > DIVERGENCE_LIMIT:
                raise TrainingDiverged(f"loss {lb.total:.4g} at epoch {epoch} exceeds {DIVERGENCE_LIMIT:g}", trace)
            if lb.num_matched:
                grads = backward(lb.value, tape, params)
                opt.step(grads)
            sums += (lb.loc, lb.conf, lb.total)
            batches += 1
        loc_m, conf_m, tot_m = sums / batches
        entry = EpochLoss(epoch, float(loc_m), float(conf_m), float(tot_m))
        trace.append(entry)
        log.info("epoch %d  loc %.4f  conf %.4f  total %.4f", epoch, loc_m, conf_m, tot_m)
        if on_epoch is not None:
            on_epoch(entry)

    net.eval()
    result = TrainResult(net, trace, opt.incidents)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_weights(out / "weights.cfew", net.state_dict())
        write_trace_csv(out / "loss_trace.csv", trace)
        result.files = {"weights": str(out / "weights.cfew"), "loss_trace": str(out / "loss_trace.csv")}
    return result
