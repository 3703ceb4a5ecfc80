"""Tiny-VGG detector with optional CFE, Inception and FFB blocks.

Five variants form a nested ladder::

    ssd_baseline    plain trunk, heads on the three taps
    incep_top       + Inception blocks at the two trunk ("top") positions
    cfe_top         + CFE blocks at the two trunk positions
    cfe_top_bottom  + CFE blocks on the tap_small / tap_mid detection branches
    cfenet_full     + FFBs regenerating tap_small and tap_mid
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autograd import ShapeError, Tensor, record_op
from .layers import (
    CFEBlock,
    CFEConfig,
    Conv2d,
    ConvBNReLU,
    FFBBlock,
    FFBConfig,
    Identity,
    InceptionBlock,
    MaxPool,
    Module,
    RField,
    Sequential,
)

VARIANTS = ("ssd_baseline", "incep_top", "cfe_top", "cfe_top_bottom", "cfenet_full")
TAP_NAMES = ("tap_small", "tap_mid", "tap_deep")
TAP_STRIDES = (8, 16, 32)
SUPPORTED_INPUT_SIZES = (64, 128, 256)


@dataclass
class ArchConfig:
    variant: str = "cfenet_full"
    input_size: int = 128
    num_classes: int = 10
    widths: tuple[int, int, int] = (32, 64, 128)
    k: int = 7
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    anchor_scales: tuple[float, float, float] = (0.1, 0.3, 0.6)
    cfe_after_ffb: bool = True
    head_init_std: float = 0.01
    cfe_branch_scale: float = 0.1
    init_seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.aspect_ratios = tuple(float(a) for a in self.aspect_ratios)
        self.anchor_scales = tuple(float(s) for s in self.anchor_scales)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.input_size not in SUPPORTED_INPUT_SIZES:
            raise ValueError(f"input_size must be one of {SUPPORTED_INPUT_SIZES}, got {self.input_size}")
        if len(self.widths) != 3 or min(self.widths) < 4 or any(w % 4 for w in self.widths):
            raise ValueError(f"widths must be three positive multiples of 4, got {self.widths}")
        if len(self.anchor_scales) != 3:
            raise ValueError("anchor_scales needs one entry per tap (3)")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if not self.cfe_branch_scale > 0:
            raise ValueError(f"cfe_branch_scale must be positive, got {self.cfe_branch_scale}")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.aspect_ratios)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["aspect_ratios"] = list(self.aspect_ratios)
        d["anchor_scales"] = list(self.anchor_scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown architecture config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ArchConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _top_block(kind: str, channels: int, k: int, rng, branch_scale: float = 1.0) -> Module:
    if kind == "cfe":
        return CFEBlock(CFEConfig(channels, k, branch_scale=branch_scale), rng)
    if kind == "incep":
        return InceptionBlock(channels, rng)
    return Identity()


class DetectorNet(Module):
    def __init__(self, config: ArchConfig):
        super().__init__()
        self.config = config
        self.input_size = config.input_size
        rng = np.random.default_rng(config.init_seed)
        c1, c2, c3 = config.widths
        v = config.variant
        a = config.anchors_per_cell

        self.stage_small = Sequential(
            ConvBNReLU(3, c1, 3, rng), MaxPool(2),
            ConvBNReLU(c1, c1, 3, rng), MaxPool(2),
            ConvBNReLU(c1, c2, 3, rng), MaxPool(2),
            ConvBNReLU(c2, c2, 3, rng),
        )
        top = {"incep_top": "incep"}.get(v, "cfe" if v in ("cfe_top", "cfe_top_bottom", "cfenet_full") else "none")
        self.top_small = _top_block(top, c2, config.k, rng, config.cfe_branch_scale)
        self.stage_mid = Sequential(MaxPool(2), ConvBNReLU(c2, c3, 3, rng), ConvBNReLU(c3, c3, 1, rng))
        self.top_mid = _top_block(top, c3, config.k, rng, config.cfe_branch_scale)
        self.stage_deep = Sequential(ConvBNReLU(c3, c3 // 2, 1, rng), ConvBNReLU(c3 // 2, c3, 3, rng, stride=2))

        bottom = v in ("cfe_top_bottom", "cfenet_full")
        self.has_ffb = v == "cfenet_full"
        self.bottom_small = CFEBlock(CFEConfig(c2, config.k, branch_scale=config.cfe_branch_scale), rng) if bottom else Identity()
        self.bottom_mid = CFEBlock(CFEConfig(c3, config.k, branch_scale=config.cfe_branch_scale), rng) if bottom else Identity()
        if self.has_ffb:
            self.ffb_small = FFBBlock(FFBConfig(c2, c3, c2), rng)
            self.ffb_mid = FFBBlock(FFBConfig(c3, c3, c3), rng)

        self.tap_channels = (c2, c3, c3)
        k1 = config.num_classes + 1
        self.heads = []
        for i, ch in enumerate(self.tap_channels):
            cls_head = Conv2d(ch, a * k1, 3, rng)
            box_head = Conv2d(ch, a * 4, 3, rng)
            # near-neutral initial predictions keep the first updates from wrecking the trunk
            for head in (cls_head, box_head):
                head.weight.data[:] = rng.normal(0.0, config.head_init_std, head.weight.shape)
            setattr(self, f"cls_{TAP_NAMES[i]}", cls_head)
            setattr(self, f"box_{TAP_NAMES[i]}", box_head)
            self.heads.append((cls_head, box_head))

    # -- geometry -------------------------------------------------------------

    def tap_sizes(self, input_size: int | None = None) -> list[int]:
        size = self.input_size if input_size is None else input_size
        return [size // s for s in TAP_STRIDES]

    def at_size(self, input_size: int) -> "DetectorNet":
        """Parameter-sharing view of the network that accepts ``input_size`` images."""
        if input_size % TAP_STRIDES[-1] or input_size < 2 * TAP_STRIDES[-1]:
            raise ShapeError(f"input size {input_size} is not a multiple of {TAP_STRIDES[-1]} that is >= "
                             f"{2 * TAP_STRIDES[-1]}")
        view = copy.copy(self)
        object.__setattr__(view, "input_size", input_size)
        return view

    # -- forward --------------------------------------------------------------

    def branch_features(self, x: Tensor) -> dict[str, Tensor]:
        """Features feeding each detection head, keyed by tap name."""
        tap_small = self.stage_small(x)
        tap_mid = self.stage_mid(self.top_small(tap_small))
        tap_deep = self.stage_deep(self.top_mid(tap_mid))
        small, mid = tap_small, tap_mid
        if self.has_ffb:
            if self.config.cfe_after_ffb:
                small = self.bottom_small(self.ffb_small(tap_small, tap_mid))
                mid = self.bottom_mid(self.ffb_mid(tap_mid, tap_deep))
            else:
                small = self.ffb_small(self.bottom_small(tap_small), tap_mid)
                mid = self.ffb_mid(self.bottom_mid(tap_mid), tap_deep)
        else:
            small = self.bottom_small(small)
            mid = self.bottom_mid(mid)
        return {"tap_small": small, "tap_mid": mid, "tap_deep": tap_deep}

    def forward(self, x: Tensor) -> list[tuple[Tensor, Tensor]]:
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected a (N, 3, H, W) batch, got {x.shape}")
        if x.shape[2] != self.input_size or x.shape[3] != self.input_size:
            raise ShapeError(f"batch spatial size {x.shape[2]}x{x.shape[3]} != network input size "
                             f"{self.input_size}")
        feats = self.branch_features(x)
        return [(cls(feats[name]), box(feats[name])) for name, (cls, box) in zip(TAP_NAMES, self.heads)]

    def receptive_fields(self) -> dict[str, RField]:
        r0 = RField()
        r_small = self.stage_small.receptive(r0)
        r_mid = self.stage_mid.receptive(self.top_small.receptive(r_small))
        r_deep = self.stage_deep.receptive(self.top_mid.receptive(r_mid))
        small, mid = r_small, r_mid
        if self.has_ffb:
            if self.config.cfe_after_ffb:
                small = self.bottom_small.receptive(self.ffb_small.receptive2(r_small, r_mid))
                mid = self.bottom_mid.receptive(self.ffb_mid.receptive2(r_mid, r_deep))
            else:
                small = self.ffb_small.receptive2(self.bottom_small.receptive(r_small), r_mid)
                mid = self.ffb_mid.receptive2(self.bottom_mid.receptive(r_mid), r_deep)
        else:
            small = self.bottom_small.receptive(small)
            mid = self.bottom_mid.receptive(mid)
        return {"tap_small": small, "tap_mid": mid, "tap_deep": r_deep}


def build_network(variant: str, input_size: int, num_classes: int, **overrides) -> DetectorNet:
    return DetectorNet(ArchConfig(variant=variant, input_size=input_size, num_classes=num_classes, **overrides))


def forward_features(net: DetectorNet, batch: Tensor) -> list[tuple[Tensor, Tensor]]:
    """Per-tap ``(class_logits, box_deltas)`` for ``batch``."""
    return net(batch)


def receptive_field_of(net: DetectorNet, tap: str) -> int:
    fields = net.receptive_fields()
    if tap not in fields:
        raise KeyError(f"unknown tap {tap!r}; expected one of {', '.join(TAP_NAMES)}")
    return fields[tap].size


def flatten_predictions(outputs: list[tuple[Tensor, Tensor]], anchors_per_cell: int,
                        num_classes: int) -> tuple[Tensor, Tensor]:
    """Reorder head maps to per-default-box rows.

    Row order is tap, then cell row, cell column, anchor: the same order
    ``generate_default_boxes`` emits.  Returns ``(conf (N, M, K+1), loc (N, M, 4))``.
    """
    a = anchors_per_cell

    def flatten(maps: list[Tensor], depth: int) -> Tensor:
        n = maps[0].shape[0]
        pieces, shapes = [], []
        for m in maps:
            _, ch, h, w = m.shape
            if ch != a * depth:
                raise ShapeError(f"head has {ch} channels, expected {a}*{depth}")
            pieces.append(m.data.reshape(n, a, depth, h, w).transpose(0, 3, 4, 1, 2).reshape(n, h * w * a, depth))
            shapes.append((h, w))
        out = np.concatenate(pieces, axis=1)

        def grad_fn(g):
            grads, start = [], 0
            for h, w in shapes:
                seg = g[:, start : start + h * w * a]
                start += h * w * a
                grads.append(np.ascontiguousarray(
                    seg.reshape(n, h, w, a, depth).transpose(0, 3, 4, 1, 2).reshape(n, a * depth, h, w)))
            return grads

        return record_op(out, tuple(maps), grad_fn)

    conf = flatten([c for c, _ in outputs], num_classes + 1)
    loc = flatten([b for _, b in outputs], 4)
    return conf, loc
