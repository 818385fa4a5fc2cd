"""Toy captioned-shapes dataset, on-disk ingestion, pyramids, tags and splits."""

from __future__ import annotations

import itertools
import json
import re
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from vital._kernels import area_downsample
from vital.errors import ConfigError

SIZES = ("small", "large")
POSITIONS = ("top left", "top right", "bottom left", "bottom right", "center")
SHAPES = ("circle", "square", "triangle", "cross", "diamond")
DEFAULT_COLORS = (
    ("red", (220, 40, 40)),
    ("green", (40, 180, 60)),
    ("blue", (50, 80, 220)),
    ("yellow", (230, 210, 40)),
)
ATTRIBUTES = ("size", "color", "shape", "position")

_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass(eq=False)
class ImageRecord:
    image: np.ndarray  # H x W x 3, float32 in [-1, 1]
    label: int
    captions: list[str]
    tags: frozenset[str]
    record_id: str = ""
    attributes: dict | None = None


@dataclass
class ImagePyramid:
    images_by_scale: list[np.ndarray]

    @property
    def scales(self):
        return [im.shape[0] for im in self.images_by_scale]


@dataclass
class ToySpec:
    num_classes: int = 4
    shapes: list[str] = field(default_factory=lambda: ["circle", "square"])
    colors: list = field(default_factory=lambda: [[n, list(c)] for n, c in DEFAULT_COLORS[:2]])
    canvas: int = 32
    captions_per_image: int = 3
    samples_per_class: int = 50
    seed: int = 0
    stages: int = 3
    omit_attributes: list[str] = field(default_factory=list)
    noise: float = 0.02

    @classmethod
    def from_dict(cls, d: dict) -> "ToySpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown fields {sorted(unknown)}", field=sorted(unknown)[0])
        spec = cls(**d)
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return asdict(self)

    def class_list(self) -> list[tuple[str, str]]:
        """(color, shape) pairs for every label, in label order."""
        color_names = [c[0] for c in self.colors]
        pairs = [(c, s) for s, c in itertools.product(self.shapes, color_names)]
        return pairs[: self.num_classes]

    def validate(self):
        if not self.shapes:
            raise ConfigError("must be non-empty", field="shapes")
        if not self.colors:
            raise ConfigError("must be non-empty", field="colors")
        for s in self.shapes:
            if s not in SHAPES:
                raise ConfigError(f"unknown shape {s!r}; choose from {SHAPES}", field="shapes")
        for c in self.colors:
            if len(c) != 2 or len(c[1]) != 3:
                raise ConfigError("each color is [name, [r, g, b]]", field="colors")
        if not 1 <= self.num_classes <= len(self.shapes) * len(self.colors):
            raise ConfigError("must be in [1, |shapes| * |colors|]", field="num_classes")
        step = 2 ** (self.stages - 1)
        if self.canvas <= 0 or self.canvas % step or self.canvas // step < 4:
            raise ConfigError(
                f"canvas {self.canvas} must be positive and a multiple of {step} "
                f"with a coarsest scale of at least 4", field="canvas")
        if self.captions_per_image < 1:
            raise ConfigError("must be >= 1", field="captions_per_image")
        if self.samples_per_class < 1:
            raise ConfigError("must be >= 1", field="samples_per_class")
        for a in self.omit_attributes:
            if a not in ATTRIBUTES:
                raise ConfigError(f"unknown attribute {a!r}", field="omit_attributes")


def load_stopwords() -> frozenset[str]:
    text = resources.files("vital.data").joinpath("stopwords.txt").read_text()
    return frozenset(w.strip() for w in text.split() if w.strip())


def words(caption: str) -> list[str]:
    return _WORD_RE.findall(caption.lower())


def extract_tags(caption: str, stopwords=None) -> set[str]:
    if stopwords is None:
        stopwords = load_stopwords()
    return {w for w in words(caption) if w not in stopwords}


def record_tags(captions, stopwords=None) -> frozenset[str]:
    if stopwords is None:
        stopwords = load_stopwords()
    tags = set()
    for cap in captions:
        tags |= extract_tags(cap, stopwords)
    return frozenset(tags)


# ---------------------------------------------------------------------------
# toy renderer

def _shape_mask(shape, yy, xx, cy, cx, r):
    dy = yy - cy
    dx = xx - cx
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.85 * r
    if shape == "triangle":
        return (dy >= -r) & (dy <= 0.8 * r) & (np.abs(dx) <= 0.55 * (dy + r))
    if shape == "cross":
        arm = 0.32 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ValueError(shape)


def render_shape(attrs: dict, rgb, canvas: int, rng: np.random.Generator, noise=0.02) -> np.ndarray:
    """Rasterize one shape at 2x resolution and area-downsample to ``canvas``."""
    big = 2 * canvas
    yy, xx = np.mgrid[0:big, 0:big] + 0.5
    r = big * (0.17 if attrs["size"] == "small" else 0.29)
    anchors = {
        "top left": (0.3, 0.3), "top right": (0.3, 0.7),
        "bottom left": (0.7, 0.3), "bottom right": (0.7, 0.7), "center": (0.5, 0.5),
    }
    ay, ax = anchors[attrs["position"]]
    cy = big * ay + rng.uniform(-0.04, 0.04) * big
    cx = big * ax + rng.uniform(-0.04, 0.04) * big
    mask = _shape_mask(attrs["shape"], yy, xx, cy, cx, r)
    color = np.asarray(rgb, dtype=np.float64) / 127.5 - 1.0
    color = np.clip(color + rng.uniform(-0.06, 0.06, size=3), -1, 1)
    img = np.full((big, big, 3), -0.7)
    img[mask] = color
    img = area_downsample(img, 2)
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, -1.0, 1.0).astype(np.float32)


_TEMPLATES = (
    ("a {np} near the {pos}.", "a {np}."),
    ("there is a {np} at the {pos}.", "there is a {np}."),
    ("this picture shows a {np} in the {pos}.", "this picture shows a {np}."),
    ("we see a {np} placed at the {pos}.", "we see a {np} placed somewhere."),
    ("the {pos} holds a {np}.", "it holds a {np}."),
)


def render_caption(attrs: dict, template: int, omit=()) -> str:
    parts = [attrs[a] for a in ("size", "color") if a not in omit]
    parts.append(attrs["shape"] if "shape" not in omit else "object")
    np_ = " ".join(parts)
    with_pos, without_pos = _TEMPLATES[template]
    if "position" in omit:
        return without_pos.format(np=np_)
    return with_pos.format(np=np_, pos=attrs["position"])


def generate_toy_dataset(spec: ToySpec) -> list[ImageRecord]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    rgb = {name: tuple(c) for name, c in spec.colors}
    stopwords = load_stopwords()
    records = []
    for label, (color, shape) in enumerate(spec.class_list()):
        for _ in range(spec.samples_per_class):
            attrs = {
                "shape": shape,
                "color": color,
                "size": SIZES[rng.integers(len(SIZES))],
                "position": POSITIONS[rng.integers(len(POSITIONS))],
            }
            image = render_shape(attrs, rgb[color], spec.canvas, rng, spec.noise)
            n_cap = spec.captions_per_image
            templates = rng.choice(len(_TEMPLATES), size=n_cap, replace=n_cap > len(_TEMPLATES))
            captions = [render_caption(attrs, int(t), spec.omit_attributes) for t in templates]
            records.append(ImageRecord(
                image=image, label=label, captions=captions,
                tags=record_tags(captions, stopwords),
                record_id=f"img{len(records):05d}", attributes=attrs,
            ))
    return records


# ---------------------------------------------------------------------------
# persistence / ingestion

def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def save_toy_dataset(records: list[ImageRecord], spec: ToySpec, out_dir) -> Path:
    out = Path(out_dir)
    classes = [f"{c}_{s}" for c, s in spec.class_list()]
    (out / "captions").mkdir(parents=True, exist_ok=True)
    for name in classes:
        (out / name).mkdir(exist_ok=True)
    meta_records = []
    for rec in records:
        cls = classes[rec.label]
        Image.fromarray(to_uint8(rec.image), mode="RGB").save(out / cls / f"{rec.record_id}.png")
        (out / "captions" / f"{rec.record_id}.txt").write_text("\n".join(rec.captions) + "\n", encoding="utf-8")
        meta_records.append({"id": rec.record_id, "label": rec.label, "class_name": cls,
                             "attributes": rec.attributes})
    meta = {"toy_spec": spec.to_dict(), "classes": classes, "records": meta_records}
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")
    return out


@dataclass
class LoadReport:
    root: str
    loaded: int = 0
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def to_dict(self):
        return {"root": self.root, "loaded": self.loaded,
                "skipped": [{"path": p, "reason": r} for p, r in self.skipped]}


def load_caption_dataset(root, layout: dict | None = None) -> tuple[list[ImageRecord], LoadReport]:
    """Load ``<root>/<class>/<id>.(png|jpg)`` images with ``<root>/captions/<id>.txt``.

    ``layout`` keys: ``canvas`` (default 32), ``captions_dir`` (default
    ``"captions"``), ``extensions``, ``classes`` (explicit label order; otherwise
    ``meta.json`` then sorted directory names).  Bad records are skipped and
    listed in the returned report.
    """
    layout = dict(layout or {})
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"not a directory: {root}", field="data")
    canvas = int(layout.get("canvas", 32))
    cap_dir = root / layout.get("captions_dir", "captions")
    exts = tuple(layout.get("extensions", (".png", ".jpg", ".jpeg")))
    report = LoadReport(root=str(root))

    classes = layout.get("classes")
    if classes is None and (root / "meta.json").is_file():
        classes = json.loads((root / "meta.json").read_text(encoding="utf-8")).get("classes")
    if classes is None:
        classes = sorted(p.name for p in root.iterdir() if p.is_dir() and p != cap_dir)
    stopwords = load_stopwords()
    records = []
    for label, name in enumerate(classes):
        class_dir = root / name
        if not class_dir.is_dir():
            report.skipped.append((str(class_dir), "missing class directory"))
            continue
        for path in sorted(p for p in class_dir.iterdir() if p.suffix.lower() in exts):
            cap_path = cap_dir / f"{path.stem}.txt"
            if not cap_path.is_file():
                report.skipped.append((str(path), "missing caption file"))
                continue
            captions = [ln.strip() for ln in cap_path.read_text(encoding="utf-8").splitlines() if ln.strip()]
            if not captions:
                report.skipped.append((str(path), "empty caption file"))
                continue
            try:
                with Image.open(path) as im:
                    im = im.convert("RGB")
                    if im.size != (canvas, canvas):
                        im = im.resize((canvas, canvas), Image.BOX)
                    arr = np.asarray(im)
            except OSError as exc:
                report.skipped.append((str(path), f"unreadable image: {exc}"))
                continue
            records.append(ImageRecord(image=from_uint8(arr), label=label, captions=captions,
                                       tags=record_tags(captions, stopwords), record_id=path.stem))
    report.loaded = len(records)
    return records, report


# ---------------------------------------------------------------------------
# pyramids and splits

def make_pyramid(image: np.ndarray, scales) -> ImagePyramid:
    scales = [int(s) for s in scales]
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise ValueError(f"scales must be strictly increasing: {scales}")
    size = image.shape[0]
    if scales[-1] > size:
        raise ValueError(f"scale {scales[-1]} exceeds source size {size}")
    if scales[-1] != size:
        raise ValueError(f"finest scale {scales[-1]} must equal image size {size}")
    levels = []
    for s in scales:
        if size % s:
            raise ValueError(f"scale {s} does not divide source size {size}")
        levels.append(area_downsample(image, size // s).astype(np.float32))
    return ImagePyramid(levels)


def stack_pyramids(records, scales) -> list[np.ndarray]:
    """Per-scale arrays of shape N x 3 x s x s (channel-first) for all records."""
    per_scale = [[] for _ in scales]
    for rec in records:
        for i, lvl in enumerate(make_pyramid(rec.image, scales).images_by_scale):
            per_scale[i].append(lvl.transpose(2, 0, 1))
    return [np.stack(x).astype(np.float32) for x in per_scale]


def split(dataset: list[ImageRecord], test_fraction: float, seed: int):
    """Stratified split.  The test set holds ``round(N * test_fraction)`` records,
    spread over classes by largest remainder, with at least one record per class
    on each side."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    by_label: dict[int, list[int]] = {}
    for i, rec in enumerate(dataset):
        by_label.setdefault(rec.label, []).append(i)
    labels = sorted(by_label)
    for label in labels:
        if len(by_label[label]) < 2:
            raise ValueError(f"class {label} has fewer than 2 samples")
    quota = {lb: len(by_label[lb]) * test_fraction for lb in labels}
    n_test = {lb: int(np.floor(q)) for lb, q in quota.items()}
    spare = int(np.floor(len(dataset) * test_fraction + 0.5)) - sum(n_test.values())
    for lb in sorted(labels, key=lambda lb: (-(quota[lb] - n_test[lb]), lb))[:max(spare, 0)]:
        n_test[lb] += 1
    for lb in labels:
        n_test[lb] = min(len(by_label[lb]) - 1, max(1, n_test[lb]))
    rng = np.random.default_rng(seed)
    test_idx = set()
    for label in labels:
        test_idx.update(rng.permutation(by_label[label])[: n_test[label]].tolist())
    train = [r for i, r in enumerate(dataset) if i not in test_idx]
    test = [r for i, r in enumerate(dataset) if i in test_idx]
    return train, test
