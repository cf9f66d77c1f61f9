"""Sketch datasets: ingestion from disk, training-time augmentation,
stratified folds and seeded synthetic generators."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError
from scipy import ndimage

from .errors import ContractError, LoadError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".pgm", ".jpg", ".jpeg", ".bmp"}
BACKGROUND = 1.0


@dataclass
class SketchSample:
    image: np.ndarray
    label: int
    source_id: str


@dataclass
class SketchDataset:
    samples: list[SketchSample]
    classes: list[str]
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def ids(self) -> list[str]:
        return [s.source_id for s in self.samples]

    @property
    def side(self) -> int:
        return self.samples[0].image.shape[0]

    def subset(self, ids) -> "SketchDataset":
        index = {s.source_id: s for s in self.samples}
        return SketchDataset([index[i] for i in ids], self.classes)


# -- disk ------------------------------------------------------------------

def read_raster(path, side: int) -> np.ndarray:
    """Grayscale image scaled to ``side`` x ``side`` with values in [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("L")
        if im.size != (side, side):
            im = im.resize((side, side), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def load_dataset(root, side: int = 255) -> SketchDataset:
    """Read ``root/<class>/<image>`` rasters as grayscale ``side``x``side``.

    Classes are ordered by directory name.  Unreadable files are skipped
    with a warning and counted in ``skipped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise LoadError(f"{root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise LoadError(f"{root} has no class directories")
    samples, skipped = [], 0
    for label, name in enumerate(classes):
        files = sorted(p for p in (root / name).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise LoadError(f"class directory {name!r} contains no images")
        for f in files:
            try:
                img = read_raster(f, side)
            except (OSError, UnidentifiedImageError, ValueError) as exc:
                log.warning("skipping unreadable %s: %s", f, exc)
                skipped += 1
                continue
            samples.append(SketchSample(img, label, f"{name}/{f.stem}"))
    return SketchDataset(samples, classes, skipped)


def save_dataset(dataset: SketchDataset, root) -> Path:
    """Write the dataset in the layout :func:`load_dataset` reads (8-bit PNG)."""
    root = Path(root)
    for s in dataset.samples:
        cls_name, stem = s.source_id.split("/", 1) if "/" in s.source_id else (dataset.classes[s.label], s.source_id)
        out = root / cls_name / f"{stem}.png"
        out.parent.mkdir(parents=True, exist_ok=True)
        pixels = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(pixels, mode="L").save(out)
    return root


# -- augmentation ----------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    angle: int = 0
    flip: bool = False
    dx: int = 0
    dy: int = 0


def augmentation_space_size(max_rotation: int = 5, max_shift: int = 31) -> int:
    """Distinct discrete draws: rotations x right-shifts x down-shifts x flip."""
    return (2 * max_rotation + 1) * (max_shift + 1) ** 2 * 2


def draw_augment(rng: np.random.Generator, max_rotation: int = 5, max_shift: int = 31) -> AugmentParams:
    return AugmentParams(
        angle=int(rng.integers(-max_rotation, max_rotation + 1)),
        flip=bool(rng.random() < 0.5),
        dx=int(rng.integers(0, max_shift + 1)),
        dy=int(rng.integers(0, max_shift + 1)),
    )


def shift(image: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Move content ``dx`` pixels right and ``dy`` down, filling background."""
    h, w = image.shape
    out = np.full_like(image, BACKGROUND)
    out[dy:, dx:] = image[:h - dy, :w - dx]
    return out


def apply_augment(image: np.ndarray, params: AugmentParams, crop: int) -> np.ndarray:
    """rotate -> flip -> shift -> top-left crop."""
    h, w = image.shape
    if crop > min(h, w):
        raise ContractError(f"crop {crop} exceeds the {h}x{w} canvas")
    out = image
    if params.angle:
        out = ndimage.rotate(out, params.angle, reshape=False, order=1, mode="constant", cval=BACKGROUND)
    if params.flip:
        out = out[:, ::-1]
    if params.dx or params.dy:
        out = shift(out, params.dx, params.dy)
    return np.ascontiguousarray(out[:crop, :crop])


def augment(sample: SketchSample, rng: np.random.Generator, crop: int = 224,
            max_rotation: int = 5, max_shift: int | None = None) -> SketchSample:
    """Random training view.  ``max_shift`` defaults to the canvas margin
    ``side - crop`` (31 for 255 -> 224)."""
    side = sample.image.shape[0]
    if max_shift is None:
        max_shift = side - crop
    if max_shift < 0 or crop + max_shift > side:
        raise ContractError(f"crop {crop} plus shift {max_shift} exceeds canvas {side}")
    params = draw_augment(rng, max_rotation, max_shift)
    return SketchSample(apply_augment(sample.image, params, crop), sample.label, sample.source_id)


def eval_view(image: np.ndarray, crop: int) -> np.ndarray:
    """Deterministic test-time view: half the maximum shift, no rotation or flip."""
    margin = image.shape[0] - crop
    if margin < 0:
        raise ContractError(f"crop {crop} exceeds canvas {image.shape[0]}")
    half = margin // 2
    return apply_augment(image, AugmentParams(dx=half, dy=half), crop)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, sample) so worker order never
    changes results."""
    return np.random.default_rng([seed, epoch, index])


# -- folds -----------------------------------------------------------------

@dataclass
class FoldPlan:
    folds: list[list[str]]
    validation: list[list[str]]
    seed: int
    val_fraction: float = 0.15

    def split(self, test_fold: int) -> tuple[list[str], list[str], list[str]]:
        """(fit ids, validation ids, test ids) with fold ``test_fold`` held out."""
        val = set(self.validation[test_fold])
        train = sorted(i for k, f in enumerate(self.folds) if k != test_fold for i in f)
        fit = [i for i in train if i not in val]
        return fit, sorted(val), sorted(self.folds[test_fold])

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "val_fraction": self.val_fraction,
                           "folds": self.folds, "validation": self.validation}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        d = json.loads(text)
        return cls(d["folds"], d["validation"], d["seed"], d.get("val_fraction", 0.15))


def make_folds(dataset: SketchDataset, seed: int, n_folds: int = 3, val_fraction: float = 0.15) -> FoldPlan:
    """Stratified fold assignment; each class is dealt round-robin after a
    seeded shuffle of its sorted ids."""
    by_class: dict[int, list[str]] = {}
    for s in dataset.samples:
        by_class.setdefault(s.label, []).append(s.source_id)
    rng = np.random.default_rng(seed)
    folds: list[list[str]] = [[] for _ in range(n_folds)]
    for rank, label in enumerate(sorted(by_class)):
        ids = sorted(by_class[label])
        if len(ids) < n_folds:
            raise ContractError(f"class {label} has {len(ids)} samples, fewer than {n_folds} folds")
        for i, j in enumerate(rng.permutation(len(ids))):
            folds[(rank + i) % n_folds].append(ids[j])
    folds = [sorted(f) for f in folds]
    validation = []
    for k in range(n_folds):
        train = sorted(i for j, f in enumerate(folds) if j != k for i in f)
        n_val = int(round(val_fraction * len(train)))
        pick = np.random.default_rng([seed, k]).permutation(len(train))[:n_val]
        validation.append(sorted(train[i] for i in pick))
    return FoldPlan(folds, validation, seed, val_fraction)


# -- synthetic sketches ----------------------------------------------------

def _polygon(n, phase=0.0):
    t = np.linspace(0, 2 * np.pi, n + 1) + phase
    return [np.stack([np.cos(t), np.sin(t)], axis=1)]


def _star(points=5):
    t = np.linspace(0, 2 * np.pi, 2 * points + 1) + np.pi / 2
    r = np.where(np.arange(2 * points + 1) % 2 == 0, 1.0, 0.4)
    return [np.stack([r * np.cos(t), r * np.sin(t)], axis=1)]


def _zigzag():
    x = np.linspace(-1, 1, 7)
    y = np.where(np.arange(7) % 2 == 0, -0.5, 0.5)
    return [np.stack([x, y], axis=1)]


def _spiral():
    t = np.linspace(0, 4 * np.pi, 60)
    r = 0.15 + 0.85 * t / t[-1]
    return [np.stack([r * np.cos(t), r * np.sin(t)], axis=1)]


def _house():
    body = np.array([[-0.7, 1.0], [-0.7, 0.0], [0.7, 0.0], [0.7, 1.0], [-0.7, 1.0]])
    roof = np.array([[-0.9, 0.0], [0.0, -1.0], [0.9, 0.0]])
    return [body, roof]


SHAPES = [
    ("circle", lambda: _polygon(32)),
    ("triangle", lambda: _polygon(3, -np.pi / 2)),
    ("square", lambda: _polygon(4, np.pi / 4)),
    ("star", _star),
    ("cross", lambda: [np.array([[-1.0, 0.0], [1.0, 0.0]]), np.array([[0.0, -1.0], [0.0, 1.0]])]),
    ("zigzag", _zigzag),
    ("spiral", _spiral),
    ("house", _house),
    ("x", lambda: [np.array([[-1.0, -1.0], [1.0, 1.0]]), np.array([[-1.0, 1.0], [1.0, -1.0]])]),
    ("rings", lambda: [p * r for r in (1.0, 0.45) for p in _polygon(32)]),
]


def shape_strokes(label: int) -> tuple[str, list[np.ndarray]]:
    """Stroke template for a class; classes past the named list become
    regular polygons of increasing order."""
    if label < len(SHAPES):
        name, fn = SHAPES[label]
        return name, fn()
    sides = label - len(SHAPES) + 5
    return f"polygon{sides}", _polygon(sides)


def render_strokes(strokes, side: int, rng: np.random.Generator) -> np.ndarray:
    """Rasterise jittered strokes as a binary image (background 1, ink 0)."""
    size = rng.uniform(0.28, 0.40) * side
    theta = np.deg2rad(rng.uniform(-25, 25))
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    center = side / 2 + rng.uniform(-0.08, 0.08, size=2) * side
    aspect = np.array([1.0, rng.uniform(0.8, 1.2)])
    img = Image.new("L", (side, side), 255)
    draw = ImageDraw.Draw(img)
    width = max(1, int(round(side / 40)))
    for stroke in strokes:
        pts = (stroke * aspect) @ rot.T
        pts = pts + rng.normal(0.0, 0.04, size=pts.shape)
        pts = pts * size + center
        draw.line([tuple(p) for p in pts], fill=0, width=width, joint="curve")
    return (np.asarray(img) > 127).astype(np.float64)


def generate_synthetic_sketches(n_classes: int, per_class: int, side: int, seed: int) -> SketchDataset:
    """Seeded dataset of class-parameterised stroke figures."""
    if side < 32:
        raise ContractError("synthetic sketches need side >= 32")
    if n_classes < 1 or per_class < 1:
        raise ContractError("need at least one class and one sample per class")
    classes, samples = [], []
    for label in range(n_classes):
        name, strokes = shape_strokes(label)
        cname = f"{label:03d}_{name}"
        classes.append(cname)
        for i in range(per_class):
            rng = np.random.default_rng([seed, label, i])
            samples.append(SketchSample(render_strokes(strokes, side, rng), label, f"{cname}/{i:05d}"))
    return SketchDataset(samples, classes)


# -- feature clouds ---------------------------------------------------------

@dataclass
class FeatureCloud:
    n_classes: int
    dim: int
    spread: float
    seed: int
    means: np.ndarray
    points: np.ndarray
    labels: np.ndarray = field(repr=False)


def generate_feature_cloud(n_classes: int, d: int, spread: float, seed: int,
                           per_class: int = 50, separation: float = 1.0,
                           rank: int | None = None) -> FeatureCloud:
    """Balanced Gaussian blobs: means ~ N(0, separation^2 I), points at
    ``mean + spread * N(0, I)``.

    With ``rank`` the means vary only in the first ``rank`` coordinates;
    the remaining ones carry noise alone.
    """
    if d < 2:
        raise ContractError("feature clouds need d >= 2")
    if n_classes < 1 or per_class < 1 or spread < 0:
        raise ContractError("invalid cloud size or spread")
    rank = d if rank is None else rank
    if not 1 <= rank <= d:
        raise ContractError(f"rank must lie in [1, {d}]")
    rng = np.random.default_rng(seed)
    means = np.zeros((n_classes, d))
    means[:, :rank] = rng.normal(0.0, separation, size=(n_classes, rank))
    labels = np.repeat(np.arange(n_classes), per_class)
    points = means[labels] + spread * rng.normal(size=(labels.size, d))
    return FeatureCloud(n_classes, d, float(spread), seed, means, points, labels)


def cloud_to_csv(cloud: FeatureCloud, path) -> Path:
    path = Path(path)
    header = ",".join(["label"] + [f"x{i}" for i in range(cloud.dim)])
    rows = np.column_stack([cloud.labels, cloud.points])
    fmt = ["%d"] + ["%.17g"] * cloud.dim
    np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt=fmt)
    return path
