"""``cfekit`` command line: gen, train, eval, infer, gradcheck, bench, ablation.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autograd import ShapeError, finite_diff_check
from .serialization import FormatError, load_weights

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("cfekit")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunManifest:
    command: list[str]
    config_paths: dict[str, str | None]
    seed: int | None
    out_dir: str
    wall_clock_seconds: float = 0.0
    artifacts: dict[str, str] = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def sha256_of(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _checksums(out_dir: Path) -> dict[str, str]:
    out = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            out[p.relative_to(out_dir).as_posix()] = sha256_of(p)
    return out


def _read_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise DataError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{p}: invalid JSON ({exc})") from exc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _parse_scales(text: str) -> tuple[float, ...]:
    try:
        scales = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise UsageError(f"--multiscale expects comma-separated numbers, got {text!r}") from exc
    if not scales or any(s <= 0 for s in scales):
        raise UsageError(f"--multiscale scales must be positive, got {text!r}")
    return scales


# ---------------------------------------------------------------------------
# subcommands; each returns {"configs": {...}, "seed": ...} for the manifest


def cmd_gen(args, out: Path) -> dict:
    from .synth import SceneSpec, generate_dataset, toy_scene_spec, write_dataset

    if args.count is None or args.count < 1:
        raise UsageError("--count must be a positive integer")
    spec_path = args.spec or args.config
    if spec_path:
        try:
            spec = SceneSpec.from_dict(_read_json(spec_path))
        except (TypeError, KeyError) as exc:
            raise UsageError(f"{spec_path}: {exc}") from exc
    else:
        spec = toy_scene_spec()
    if args.seed is not None:
        spec = SceneSpec(**{**spec.__dict__, "seed": args.seed})
    images, ann = generate_dataset(spec, args.count)
    splits = write_dataset(out, images, ann, split_seed=spec.seed)
    _write_json(out / "scene_spec.json", spec.to_dict())
    log.info("wrote %d images (%s)", len(images), ", ".join(f"{k} {len(v)}" for k, v in splits.items()))
    return {"configs": {"spec": spec_path}, "seed": spec.seed}


def _arch_from_args(args):
    from .network import ArchConfig

    d = _read_json(args.arch) if args.arch else {}
    if getattr(args, "variant", None):
        d["variant"] = args.variant
    if getattr(args, "input_size", None):
        d["input_size"] = args.input_size
    return ArchConfig.from_dict(d)


def cmd_train(args, out: Path) -> dict:
    from .network import DetectorNet
    from .synth import load_dataset
    from .train import TrainSchedule, train

    arch = _arch_from_args(args)
    sched = TrainSchedule(**_read_json(args.config)) if args.config else TrainSchedule()
    if args.epochs is not None:
        sched.epochs = args.epochs
    seed = sched.seed if args.seed is None else args.seed
    sched.seed = seed
    arch.init_seed = seed
    data = load_dataset(args.data, args.split)
    if data.images.shape[-1] != arch.input_size:
        raise DataError(f"images in {args.data} are {data.images.shape[-1]} px but the network expects "
                        f"{arch.input_size} px")
    if arch.num_classes != len(data.annotations.categories):
        arch.num_classes = len(data.annotations.categories)
    net = DetectorNet(arch)
    res = train(net, data, sched, out_dir=out)
    _write_json(out / "arch.json", arch.to_dict())
    _write_json(out / "train_config.json", sched.to_dict())
    log.info("final loss %.4f (%d skipped steps)", res.trace[-1].total, res.incidents)
    return {"configs": {"arch": args.arch, "train": args.config}, "seed": seed}


def _load_model(args):
    from .network import ArchConfig, DetectorNet

    weights = Path(args.weights)
    if not weights.exists():
        raise DataError(f"weights file not found: {weights}")
    arch_path = Path(args.arch) if args.arch else weights.with_name("arch.json")
    arch = ArchConfig.from_dict(_read_json(arch_path))
    net = DetectorNet(arch)
    net.load_state_dict(load_weights(weights))
    net.eval()
    return net, str(arch_path)


def _inference_params(args):
    from .postprocess import InferenceParams

    d = _read_json(args.config) if args.config else {}
    if getattr(args, "multiscale", None):
        d["scales"] = _parse_scales(args.multiscale)
    if "scales" in d:
        d["scales"] = tuple(d["scales"])
    return InferenceParams(**d)


def _run_detector(net, data, params):
    from .postprocess import detect_batch, detect_multi_scale_batch

    multi = tuple(params.scales) != (1.0,)
    return (detect_multi_scale_batch if multi else detect_batch)(net, data.images, params)


def cmd_eval(args, out: Path) -> dict:
    from .evaluator import coco_metrics, write_per_category_csv, write_report_json
    from .experiments import SMALL_CATEGORIES, detections_to_records
    from .postprocess import read_detections_jsonl
    from .synth import load_dataset

    data = load_dataset(args.data, args.split)
    configs = {"params": args.config}
    if args.detections:
        records = read_detections_jsonl(args.detections)
        configs["detections"] = args.detections
    else:
        if not args.weights:
            raise UsageError("eval needs --weights or --detections")
        net, arch_path = _load_model(args)
        configs["arch"] = arch_path
        params = _inference_params(args)
        records = detections_to_records(_run_detector(net, data, params), data.image_ids, data.annotations)
    names = {c.name for c in data.annotations.categories}
    report = coco_metrics(records, data.annotations, small_categories=[n for n in SMALL_CATEGORIES if n in names])
    headline = report.headline(args.iou_mode)
    write_report_json(out / "report.json", report, extra={"iou_mode": args.iou_mode, "headline": headline})
    write_per_category_csv(out / "per_category.csv", report)
    print(f"{args.iou_mode} headline: {100.0 * (headline or 0.0):.2f}")
    return {"configs": configs, "seed": None}


def cmd_infer(args, out: Path) -> dict:
    from .experiments import detections_to_records
    from .synth import load_dataset

    data = load_dataset(args.data, args.split)
    net, arch_path = _load_model(args)
    params = _inference_params(args)
    records = detections_to_records(_run_detector(net, data, params), data.image_ids, data.annotations)
    with open(out / "detections.jsonl", "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    log.info("%d detections on %d images", len(records), len(data))
    return {"configs": {"arch": arch_path, "params": args.config}, "seed": None}


def detector_loss_fn(net, x, seed: int):
    """Multibox loss on two random boxes per image with the mined negatives frozen,
    so the checked function is smooth in the parameters."""
    from .autograd import Tensor
    from .loss import multibox_loss_from_targets
    from .network import flatten_predictions
    from .train import prepare_targets

    rng = np.random.default_rng(seed + 1)
    size = net.input_size
    boxes, labels = [], []
    for _ in range(len(x)):
        wh = rng.uniform(0.1, 0.5, (2, 2)) * size
        xy = rng.uniform(0, 1, (2, 2)) * (size - wh)
        boxes.append(np.concatenate([xy, xy + wh], axis=1))
        labels.append(rng.integers(1, net.config.num_classes + 1, 2))
    targets = prepare_targets(net, boxes, labels)
    a, k = net.config.anchors_per_cell, net.config.num_classes
    conf, loc = flatten_predictions(net(Tensor(x)), a, k)
    frozen = multibox_loss_from_targets(conf, loc, targets).negatives

    def loss_fn(n, inp):
        c, lc = flatten_predictions(n(inp), a, k)
        return multibox_loss_from_targets(c, lc, targets, negatives=frozen).value

    return loss_fn


GRADCHECK_TOY = {"variant": "cfenet_full", "input_size": 64, "num_classes": 1, "widths": [4, 4, 4], "k": 7}


def cmd_gradcheck(args, out: Path) -> dict:
    from .network import ArchConfig, DetectorNet

    d = dict(GRADCHECK_TOY)
    if args.arch:
        d.update(_read_json(args.arch))
    seed = 0 if args.seed is None else args.seed
    d["init_seed"] = seed
    arch = ArchConfig.from_dict(d)
    net = DetectorNet(arch)
    x = np.random.default_rng(seed).random((2, 3, arch.input_size, arch.input_size))
    loss_fn = detector_loss_fn(net, x, seed)
    def corrupt(grads):
        name = sorted(grads)[0]
        grads[name] = grads[name] + 1.0
        return grads

    hook = corrupt if args.corrupt_gradient else None
    t0 = time.time()
    report = finite_diff_check(net, x, eps=args.eps, loss_fn=loss_fn, analytic_hook=hook)
    result = {"max_relative_error": float(report.max_error), "tolerance": args.tol,
              "passed": bool(report.passed(args.tol)),
              "worst_parameter": report.worst_parameter, "worst_index": list(report.worst_index),
              "analytic": report.analytic, "numeric": report.numeric, "parameters_checked": report.n_checked,
              "per_parameter": {k: float(v) for k, v in report.per_parameter.items()}, "seconds": time.time() - t0, "arch": arch.to_dict()}
    _write_json(out / "gradcheck.json", result)
    print(f"max relative error {report.max_error:.3e} at {report.worst_parameter}{list(report.worst_index)} "
          f"({report.n_checked} parameters)")
    if not report.passed(args.tol):
        raise NumericFailure(f"gradient check failed: {report.max_error:.3e} >= {args.tol:g}")
    return {"configs": {"arch": args.arch}, "seed": seed}


def cmd_bench(args, out: Path) -> dict:
    from .bench import factorization_macs, measure_latency
    from .network import VARIANTS, ArchConfig

    base = _read_json(args.arch) if args.arch else {}
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variant(s) {unknown}; expected one of {', '.join(VARIANTS)}")
    rows = []
    for v in variants:
        cfg = ArchConfig.from_dict({**base, "variant": v, "input_size": args.input_size})
        stats = measure_latency(cfg, iterations=args.iterations)
        rows.append(stats.to_dict())
        print(f"{v:16s} mean {stats.mean_ms:8.2f} ms  median {stats.median_ms:8.2f} ms  p95 {stats.p95_ms:8.2f} ms  "
              f"MACs {stats.macs:,}")
    channels = ArchConfig.from_dict({**base, "input_size": args.input_size}).widths[1]
    fact = factorization_macs(channels, k=base.get("k", 7))
    print(f"CFE spatial stage MACs: factorized {fact.factorized_spatial:,} vs unfactorized "
          f"{fact.unfactorized_spatial:,} (ratio {fact.spatial_ratio:.4f})")
    _write_json(out / "bench.json", {"latency": rows, "factorization": fact.to_dict()})
    return {"configs": {"arch": args.arch}, "seed": None}


def cmd_ablation(args, out: Path) -> dict:
    from .experiments import AblationConfig, run_ablation

    d = _read_json(args.config) if args.config else {}
    try:
        cfg = AblationConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
    except TypeError as exc:
        raise UsageError(f"bad ablation config: {exc}") from exc
    if args.seed is not None:
        cfg.data_seed = args.seed
    res = run_ablation(cfg)
    _write_json(out / "ablation.json", res.to_dict())
    for v in cfg.variants:
        print(f"{v:16s} ap_50 {100 * res.mean(v, 'ap_50'):6.2f}  ap_small {100 * res.mean(v, 'ap_small'):6.2f}")
    return {"configs": {"ablation": args.config}, "seed": cfg.data_seed}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .network import VARIANTS

    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", required=True, help="output directory for artifacts and the run manifest")
    common.add_argument("--config", default=None, help="JSON config for the subcommand")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="cfekit", description="Toy CFENet detector: data, training, inference and evaluation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="render a synthetic dataset")
    g.add_argument("--spec", default=None, help="scene spec JSON")
    g.add_argument("--count", type=int, default=None)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train one variant")
    t.add_argument("--data", required=True)
    t.add_argument("--split", default="train")
    t.add_argument("--arch", default=None, help="architecture JSON")
    t.add_argument("--variant", choices=VARIANTS, default=None)
    t.add_argument("--input-size", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    for name, fn, text in (("eval", cmd_eval, "evaluate a model or a detections file"),
                           ("infer", cmd_infer, "write detections as JSON lines")):
        e = sub.add_parser(name, parents=[common], help=text)
        e.add_argument("--data", required=True)
        e.add_argument("--split", default="val")
        e.add_argument("--weights", default=None if name == "eval" else argparse.SUPPRESS,
                       required=name == "infer")
        e.add_argument("--arch", default=None, help="architecture JSON (default: arch.json next to weights)")
        e.add_argument("--multiscale", default=None, help="comma-separated scales, e.g. 0.75,1.0,1.5")
        if name == "eval":
            e.add_argument("--iou-mode", choices=("coco", "bdd70"), default="coco")
            e.add_argument("--detections", default=None, help="evaluate this JSON-lines file instead of a model")
        e.set_defaults(fn=fn)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    gc.add_argument("--arch", default=None)
    gc.add_argument("--eps", type=float, default=1e-6)
    gc.add_argument("--tol", type=float, default=1e-3)
    gc.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    gc.set_defaults(fn=cmd_gradcheck)

    b = sub.add_parser("bench", parents=[common], help="forward latency and MAC counts per variant")
    b.add_argument("--arch", default=None)
    b.add_argument("--variants", default=None, help="comma-separated subset of variants")
    b.add_argument("--input-size", type=int, default=128)
    b.add_argument("--iterations", type=int, default=10)
    b.set_defaults(fn=cmd_bench)

    a = sub.add_parser("ablation", parents=[common], help="train and evaluate the variant ladder over seeds")
    a.set_defaults(fn=cmd_ablation)
    return p


def main(argv: list[str] | None = None) -> int:
    from .synth import AnnotationError
    from .train import TrainingDiverged

    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"cfekit: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    out = Path(args.out)
    t0 = time.time()
    info = None
    code = EXIT_OK
    try:
        out.mkdir(parents=True, exist_ok=True)
        info = args.fn(args, out)
    except UsageError as exc:
        print(f"cfekit: usage error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except (DataError, FileNotFoundError, FormatError, AnnotationError, ShapeError, KeyError) as exc:
        print(f"cfekit: data error: {exc}", file=sys.stderr)
        code = EXIT_DATA
    except (NumericFailure, TrainingDiverged, FloatingPointError) as exc:
        print(f"cfekit: numeric failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    except (ValueError, TypeError) as exc:
        print(f"cfekit: usage error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    if out.is_dir():
        configs = info["configs"] if info else {"config": args.config}
        seed = info["seed"] if info else args.seed
        manifest = RunManifest(["cfekit", *argv], configs, seed, str(out), time.time() - t0, _checksums(out))
        manifest.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
