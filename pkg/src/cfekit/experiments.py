"""Toy-scale ablation ladder and multi-scale comparison on synthetic scenes."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .evaluator import EvalReport, coco_metrics
from .network import ArchConfig, DetectorNet
from .postprocess import InferenceParams, detect_batch, detect_multi_scale_batch
from .synth import AnnotationFile, DetectionSet, generate_dataset, toy_scene_spec
from .train import TrainSchedule, train

log = logging.getLogger(__name__)

SMALL_CATEGORIES = ("traffic light", "traffic sign")
LADDER = ("ssd_baseline", "cfe_top", "cfenet_full")


@dataclass
class AblationConfig:
    train_count: int = 1000
    val_count: int = 150
    image_size: int = 64
    widths: tuple[int, int, int] = (8, 16, 32)
    variants: tuple[str, ...] = LADDER
    seeds: tuple[int, ...] = (0, 1, 2)
    data_seed: int = 0
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 0.05
    lr_decay_epochs: tuple[int, ...] = (15,)
    weight_decay: float = 5e-3
    grad_clip_norm: float | None = 5.0
    multiscale_variant: str | None = "cfenet_full"
    scales: tuple[float, ...] = (0.75, 1.0, 1.5)

    def schedule(self, seed: int) -> TrainSchedule:
        return TrainSchedule(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                             seed=seed, lr_decay_epochs=self.lr_decay_epochs, weight_decay=self.weight_decay,
                             grad_clip_norm=self.grad_clip_norm)


@dataclass
class RunRecord:
    variant: str
    seed: int
    parameters: int
    final_loss: float
    seconds: float
    single: dict
    multi: dict | None = None
    per_category_50: dict = field(default_factory=dict)
    per_category_75: dict = field(default_factory=dict)


@dataclass
class AblationResult:
    config: AblationConfig
    runs: list[RunRecord] = field(default_factory=list)

    def mean(self, variant: str, metric: str, mode: str = "single") -> float:
        vals = [getattr(r, mode)[metric] for r in self.runs if r.variant == variant]
        return float(np.mean([0.0 if v is None else v for v in vals]))

    def to_dict(self) -> dict:
        return {"config": asdict(self.config), "runs": [asdict(r) for r in self.runs]}


def make_datasets(cfg: AblationConfig) -> tuple[DetectionSet, DetectionSet]:
    spec = toy_scene_spec(cfg.image_size, seed=cfg.data_seed)
    imgs, ann = generate_dataset(spec, cfg.train_count + cfg.val_count)
    train_ids = [im.id for im in ann.images[: cfg.train_count]]
    val_ids = [im.id for im in ann.images[cfg.train_count :]]
    return (DetectionSet.from_annotations(imgs[: cfg.train_count], ann.subset(train_ids)),
            DetectionSet.from_annotations(imgs[cfg.train_count :], ann.subset(val_ids)))


def detections_to_records(per_image, image_ids, ann: AnnotationFile) -> list[dict]:
    cls_to_cat = {v: k for k, v in ann.category_index().items()}
    out = []
    for dets, iid in zip(per_image, image_ids):
        for d in dets:
            out.append({"image_id": iid, "category_id": cls_to_cat[d.category],
                        "bbox": [float(v) for v in d.box.to_xywh()], "score": d.score})
    return out


def evaluate_net(net: DetectorNet, data: DetectionSet, params: InferenceParams,
                 multiscale: bool = False) -> EvalReport:
    run = detect_multi_scale_batch if multiscale else detect_batch
    per_image = run(net, data.images, params)
    return coco_metrics(detections_to_records(per_image, data.image_ids, data.annotations), data.annotations,
                        small_categories=SMALL_CATEGORIES)


def run_ablation(cfg: AblationConfig, datasets=None, progress=None) -> AblationResult:
    train_set, val_set = datasets if datasets is not None else make_datasets(cfg)
    result = AblationResult(cfg)
    for seed in cfg.seeds:
        for variant in cfg.variants:
            t0 = time.time()
            arch = ArchConfig(variant=variant, input_size=cfg.image_size, num_classes=10,
                              widths=cfg.widths, init_seed=seed)
            net = DetectorNet(arch)
            tr = train(net, train_set, cfg.schedule(seed))
            report = evaluate_net(net, val_set, InferenceParams())
            single = report.summary_fields()
            multi = None
            if variant == cfg.multiscale_variant:
                multi = evaluate_net(net, val_set, InferenceParams(scales=cfg.scales), multiscale=True).summary_fields()
            rec = RunRecord(variant, seed, net.parameter_count(), tr.trace[-1].total, time.time() - t0, single, multi,
                            report.per_category_by_threshold["0.50"], report.per_category_by_threshold["0.75"])
            result.runs.append(rec)
            log.info("%s seed %d: ap50 %.4f ap_small %.4f (%.0fs)", variant, seed, single["ap_50"] or 0.0,
                     single["ap_small"] or 0.0, rec.seconds)
            if progress is not None:
                progress(rec)
    return result
