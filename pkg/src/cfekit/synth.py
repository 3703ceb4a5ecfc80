"""Deterministic synthetic small-object scenes and a COCO-like annotation format."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .serialization import load_image, save_image

SHAPES = ("rect", "frame", "ellipse", "ring", "triangle", "diamond", "plus", "xcross", "vbar", "hbar")


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class CategorySpec:
    name: str
    shape: str
    size_range: tuple[int, int]
    weight: float = 1.0
    small: bool = False

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape kind {self.shape!r}")
        lo, hi = self.size_range
        if lo < 3 or hi < lo:
            raise ValueError(f"{self.name}: size range {self.size_range} must satisfy 3 <= lo <= hi")


@dataclass
class SceneSpec:
    image_size: int = 64
    categories: list[CategorySpec] = field(default_factory=list)
    objects_per_image: tuple[int, int] = (1, 4)
    clutter_level: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.categories = [c if isinstance(c, CategorySpec) else CategorySpec(**{**c, "size_range": tuple(c["size_range"])})
                           for c in self.categories]
        self.objects_per_image = tuple(int(v) for v in self.objects_per_image)
        if not self.categories:
            raise ValueError("scene spec needs at least one category")
        lo, hi = self.objects_per_image
        if lo < 0 or hi < lo:
            raise ValueError(f"objects_per_image {self.objects_per_image} is not a valid range")
        if all(c.size_range[1] >= 32 for c in self.categories):
            raise ValueError("at least one category must have an upper size below 32 px")
        if any(c.size_range[1] > self.image_size for c in self.categories):
            raise ValueError("a category size range exceeds the image size")
        if not 0 <= self.clutter_level <= 1:
            raise ValueError("clutter_level must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects_per_image"] = list(self.objects_per_image)
        for c in d["categories"]:
            c["size_range"] = list(c["size_range"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown scene spec keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def toy_scene_spec(image_size: int = 64, seed: int = 0, clutter_level: float = 0.5,
                   objects_per_image: tuple[int, int] = (1, 4)) -> SceneSpec:
    """Ten categories in BDD order; ``traffic light``/``traffic sign`` are the small ones
    and ``train`` is nearly absent."""
    f = image_size / 64
    s = lambda lo, hi: (max(3, round(lo * f)), max(3, round(hi * f)))  # noqa: E731
    cats = [
        CategorySpec("bike", "xcross", s(10, 24)),
        CategorySpec("bus", "frame", s(22, 44)),
        CategorySpec("car", "rect", s(12, 30), weight=2.0),
        CategorySpec("motor", "triangle", s(10, 22)),
        CategorySpec("person", "ellipse", s(12, 28), weight=1.5),
        CategorySpec("rider", "ring", s(12, 26)),
        CategorySpec("traffic light", "vbar", (5, min(14, round(14 * f))), weight=1.5, small=True),
        CategorySpec("traffic sign", "diamond", (5, min(14, round(14 * f))), weight=1.5, small=True),
        CategorySpec("train", "hbar", s(24, 44), weight=0.002),
        CategorySpec("truck", "plus", s(16, 40)),
    ]
    return SceneSpec(image_size, cats, objects_per_image, clutter_level, seed)


# ---------------------------------------------------------------------------
# rasterization (integer arithmetic only)


def shape_extent(shape: str, size: int) -> tuple[int, int]:
    """(width, height) of the drawing canvas for a nominal size."""
    if shape in ("rect", "frame"):
        return size, max(3, size * 7 // 10)
    if shape == "ellipse":
        return max(3, size // 2), size
    if shape == "vbar":
        return max(2, size * 2 // 5), size
    if shape == "hbar":
        return size, max(3, size // 3)
    return size, size


def shape_mask(shape: str, w: int, h: int) -> np.ndarray:
    y, x = np.mgrid[0:h, 0:w].astype(np.int64)
    u = 2 * x + 1 - w  # in [-(w-1), w-1]
    v = 2 * y + 1 - h
    if shape in ("rect", "vbar", "hbar"):
        return np.ones((h, w), dtype=bool)
    if shape == "frame":
        t = max(1, min(w, h) // 5)
        return (x < t) | (x >= w - t) | (y < t) | (y >= h - t)
    if shape == "ellipse":
        return u * u * h * h + v * v * w * w <= w * w * h * h
    if shape == "ring":
        r = u * u * h * h + v * v * w * w
        return (r <= w * w * h * h) & (100 * r >= 30 * w * w * h * h)
    if shape == "triangle":
        return np.abs(u) * h <= (2 * y + 1) * w
    if shape == "diamond":
        return np.abs(u) * h + np.abs(v) * w <= w * h
    if shape == "plus":
        t = max(1, w // 3)
        c0 = (w - t) // 2
        r0 = (h - t) // 2
        return ((x >= c0) & (x < c0 + t)) | ((y >= r0) & (y < r0 + t))
    if shape == "xcross":
        t = max(1, min(w, h) // 6)
        k = 2 * t * max(w, h)
        return (np.abs(u * h - v * w) <= k) | (np.abs(u * h + v * w) <= k)
    raise ValueError(f"unknown shape {shape!r}")


def _tight(mask: np.ndarray) -> np.ndarray:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return mask[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]


# ---------------------------------------------------------------------------
# annotation file


@dataclass
class ImageRecord:
    id: int
    width: int
    height: int
    file: str


@dataclass
class Annotation:
    id: int
    image_id: int
    category_id: int
    bbox: list[float]  # [x, y, w, h], absolute pixels


@dataclass
class Category:
    id: int
    name: str


@dataclass
class AnnotationFile:
    images: list[ImageRecord] = field(default_factory=list)
    annotations: list[Annotation] = field(default_factory=list)
    categories: list[Category] = field(default_factory=list)

    def validate(self) -> None:
        dims = {im.id: (im.width, im.height) for im in self.images}
        cat_ids = {c.id for c in self.categories}
        for k, ann in enumerate(self.annotations):
            where = f"annotations[{k}] (id {ann.id})"
            if ann.image_id not in dims:
                raise AnnotationError(f"{where}: image_id {ann.image_id} does not exist")
            if ann.category_id not in cat_ids:
                raise AnnotationError(f"{where}: category_id {ann.category_id} does not exist")
            x, y, w, h = ann.bbox
            iw, ih = dims[ann.image_id]
            if w <= 0 or h <= 0:
                raise AnnotationError(f"{where}: bbox {ann.bbox} has non-positive size")
            if x < 0 or y < 0 or x + w > iw or y + h > ih:
                raise AnnotationError(f"{where}: bbox {ann.bbox} leaves the {iw}x{ih} image")

    def category_index(self) -> dict[int, int]:
        """category id -> network class index (1-based; 0 is background)."""
        return {c.id: i + 1 for i, c in enumerate(sorted(self.categories, key=lambda c: c.id))}

    def by_image(self) -> dict[int, list[Annotation]]:
        out: dict[int, list[Annotation]] = {im.id: [] for im in self.images}
        for ann in self.annotations:
            out[ann.image_id].append(ann)
        return out

    def subset(self, image_ids: Sequence[int]) -> "AnnotationFile":
        keep = set(image_ids)
        return AnnotationFile([im for im in self.images if im.id in keep],
                              [a for a in self.annotations if a.image_id in keep], list(self.categories))

    def to_dict(self) -> dict:
        return {"images": [asdict(i) for i in self.images],
                "annotations": [asdict(a) for a in self.annotations],
                "categories": [asdict(c) for c in self.categories]}

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationFile":
        try:
            f = cls([ImageRecord(**i) for i in d["images"]],
                    [Annotation(**{**a, "bbox": [float(v) for v in a["bbox"]]}) for a in d["annotations"]],
                    [Category(**c) for c in d["categories"]])
        except (KeyError, TypeError) as exc:
            raise AnnotationError(f"malformed annotation structure: {exc}") from exc
        f.validate()
        return f


def save_annotations(path, file: AnnotationFile) -> None:
    file.validate()
    Path(path).write_text(json.dumps(file.to_dict(), indent=1, ensure_ascii=False), encoding="utf-8")


def load_annotations(path) -> AnnotationFile:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}") from exc
    try:
        return AnnotationFile.from_dict(data)
    except AnnotationError as exc:
        raise AnnotationError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# generation


def _background(rng: np.random.Generator, size: int, clutter: float) -> np.ndarray:
    cells = max(2, size // 8)
    coarse = rng.integers(20, 90, size=(3, cells, cells))
    rep = -(-size // cells)
    img = np.repeat(np.repeat(coarse, rep, axis=1), rep, axis=2)[:, :size, :size]
    amp = int(round(clutter * 30))
    if amp:
        img = img + rng.integers(-amp, amp + 1, size=img.shape)
    for _ in range(int(round(clutter * 4))):
        # thin axis-aligned distractor strokes
        length = int(rng.integers(size // 8, size // 3))
        r, c = int(rng.integers(0, size)), int(rng.integers(0, size - length))
        tone = rng.integers(60, 130, size=3)
        if rng.integers(2):
            img[:, r, c : c + length] = tone[:, None]
        else:
            img[:, c : c + length, r] = tone[:, None]
    return np.clip(img, 0, 255)


def _render_image(spec: SceneSpec, index: int):
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    img = _background(rng, size, spec.clutter_level)
    weights = np.array([c.weight for c in spec.categories], dtype=np.float64)
    weights /= weights.sum()
    lo, hi = spec.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    occupied = np.zeros((size, size), dtype=bool)
    objects = []
    tries = 0
    while len(objects) < n_obj:
        tries += 1
        if tries > 2000:
            raise RuntimeError(f"could not place {n_obj} objects in image {index}; sizes too large")
        ci = int(rng.choice(len(spec.categories), p=weights))
        cat = spec.categories[ci]
        nominal = int(rng.integers(cat.size_range[0], cat.size_range[1] + 1))
        w, h = shape_extent(cat.shape, nominal)
        mask = _tight(shape_mask(cat.shape, w, h))
        mh, mw = mask.shape
        if mw > size or mh > size:
            continue
        x0 = int(rng.integers(0, size - mw + 1))
        y0 = int(rng.integers(0, size - mh + 1))
        # keep a one-pixel gap between objects
        if occupied[max(0, y0 - 1) : y0 + mh + 1, max(0, x0 - 1) : x0 + mw + 1].any():
            continue
        occupied[y0 : y0 + mh, x0 : x0 + mw] = True
        color = rng.integers(150, 256, size=3)
        region = img[:, y0 : y0 + mh, x0 : x0 + mw]
        region[:, mask] = color[:, None]
        objects.append((ci, [x0, y0, mw, mh]))
    return (img.astype(np.float32) / np.float32(255.0)), objects


def generate_dataset(spec: SceneSpec, count: int, first_id: int = 0):
    """Render ``count`` images; returns ``(images (count, 3, S, S) float32, AnnotationFile)``.

    Image ``i`` depends only on ``(spec.seed, i)``.
    """
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    size = spec.image_size
    images = np.empty((count, 3, size, size), dtype=np.float32)
    ann = AnnotationFile(categories=[Category(i + 1, c.name) for i, c in enumerate(spec.categories)])
    aid = 1
    for i in range(count):
        img, objects = _render_image(spec, i)
        images[i] = img
        image_id = first_id + i
        ann.images.append(ImageRecord(image_id, size, size, f"images/{image_id:06d}.cfei"))
        for ci, bbox in objects:
            ann.annotations.append(Annotation(aid, image_id, ci + 1, [float(v) for v in bbox]))
            aid += 1
    return images, ann


def size_histogram(file: AnnotationFile, bins: Sequence[float]) -> dict[str, list[int]]:
    """Counts of sqrt(area) per category.

    ``bins`` are ascending edges; bucket ``i`` holds values in
    ``[bins[i-1], bins[i])`` with an open first and last bucket, so there are
    ``len(bins) + 1`` counts per category.
    """
    edges = np.asarray(bins, dtype=np.float64)
    if edges.size == 0 or np.any(np.diff(edges) <= 0):
        raise ValueError("bins must be non-empty and strictly ascending")
    names = {c.id: c.name for c in file.categories}
    out = {c.name: [0] * (len(edges) + 1) for c in file.categories}
    for ann in file.annotations:
        side = float(np.sqrt(ann.bbox[2] * ann.bbox[3]))
        out[names[ann.category_id]][int(np.searchsorted(edges, side, side="right"))] += 1
    return out


def split_ids(image_ids: Sequence[int], seed: int = 0, ratios=(7, 1, 2)) -> dict[str, list[int]]:
    ids = np.asarray(sorted(image_ids))
    perm = np.random.default_rng(seed).permutation(len(ids))
    total = sum(ratios)
    n_train = int(round(len(ids) * ratios[0] / total))
    n_val = int(round(len(ids) * ratios[1] / total))
    parts = np.split(ids[perm], [n_train, n_train + n_val])
    return {name: sorted(int(i) for i in p) for name, p in zip(("train", "val", "test"), parts)}


# ---------------------------------------------------------------------------
# in-memory training view and on-disk layout


@dataclass
class DetectionSet:
    images: np.ndarray            # (N, 3, S, S)
    boxes: list[np.ndarray]       # xyxy per image
    labels: list[np.ndarray]      # class index per box
    image_ids: list[int]
    annotations: AnnotationFile

    def __len__(self) -> int:
        return len(self.image_ids)

    @classmethod
    def from_annotations(cls, images: np.ndarray, ann: AnnotationFile) -> "DetectionSet":
        index = ann.category_index()
        per = ann.by_image()
        boxes, labels, ids = [], [], []
        for im in ann.images:
            anns = per[im.id]
            b = np.array([[a.bbox[0], a.bbox[1], a.bbox[0] + a.bbox[2], a.bbox[1] + a.bbox[3]] for a in anns],
                         dtype=np.float64).reshape(-1, 4)
            boxes.append(b)
            labels.append(np.array([index[a.category_id] for a in anns], dtype=np.int64))
            ids.append(im.id)
        return cls(images, boxes, labels, ids, ann)


def write_dataset(out_dir, images: np.ndarray, ann: AnnotationFile, split_seed: int = 0) -> dict[str, list[int]]:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for img, rec in zip(images, ann.images):
        save_image(out / rec.file, img)
    save_annotations(out / "annotations.json", ann)
    splits = split_ids([im.id for im in ann.images], split_seed)
    for name, ids in splits.items():
        (out / f"{name}.txt").write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")
    return splits


def load_dataset(data_dir, split: str | None = None) -> DetectionSet:
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory not found: {root}")
    ann_path = root / "annotations.json"
    if not ann_path.exists():
        raise FileNotFoundError(f"annotation file not found: {ann_path}")
    ann = load_annotations(ann_path)
    if split is not None:
        split_path = root / f"{split}.txt"
        if not split_path.exists():
            raise FileNotFoundError(f"split file not found: {split_path}")
        ids = [int(t) for t in split_path.read_text(encoding="utf-8").split()]
        ann = ann.subset(ids)
    images = np.stack([load_image(root / rec.file) for rec in ann.images]) if ann.images else \
        np.zeros((0, 3, 1, 1), np.float32)
    return DetectionSet.from_annotations(images, ann)
