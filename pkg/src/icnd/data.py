"""Synthetic structured backgrounds, defect injection, manifests and corpora."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, InvalidInputError
from .pgm import read_pgm, write_pgm
from .vit import FeatureStack

PATTERNS = ("lines", "grid", "vias")
DEFECT_KINDS = ("blob", "scratch", "missing_structure", "bridge")
SPLITS = ("train_normal", "labeled_defect", "unlabeled", "test")


def gen_structured_background(h, w, pattern="lines", period=8, phase=0, contrast=0.5,
                              noise_sigma=0.0, seed=0):
    """Two-level periodic layout plus seeded Gaussian pixel noise, clipped to [0, 1].

    ``lines`` are vertical stripes of half-period width, ``grid`` adds
    horizontal stripes of quarter-period width in both axes, and ``vias`` are
    half-period squares on the lattice.
    """
    if h <= 0 or w <= 0:
        raise DimensionError(f"invalid image size {h}x{w}")
    if period < 4:
        raise InvalidInputError(f"period must be at least 4 px, got {period}")
    if noise_sigma < 0:
        raise InvalidInputError("noise_sigma must be nonnegative")
    if pattern not in PATTERNS:
        raise InvalidInputError(f"unknown pattern {pattern!r}")
    yy, xx = np.mgrid[0:h, 0:w]
    px = (xx + phase) % period
    py = (yy + phase) % period
    if pattern == "lines":
        on = px < period // 2
    elif pattern == "grid":
        width = max(1, period // 4)
        on = (px < width) | (py < width)
    else:
        on = (px < period // 2) & (py < period // 2)
    lo, hi = 0.5 - contrast / 2, 0.5 + contrast / 2
    img = np.where(on, hi, lo)
    if noise_sigma > 0:
        img = img + np.random.default_rng(seed).normal(0.0, noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _disc(h, w, cy, cx, radius):
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2


def _segment(h, w, cy, cx, length, angle, half_width):
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = math.sin(angle), math.cos(angle)
    ry, rx = yy - cy, xx - cx
    along = ry * dy + rx * dx
    across = np.abs(-ry * dx + rx * dy)
    return (np.abs(along) <= length / 2) & (across <= half_width)


def inject_defect(image, kind, size, intensity_delta, seed=0):
    """Paint one defect; returns ``(image, mask)`` with mask == changed pixels.

    Every masked pixel moves by at least ``|intensity_delta| / 2``: when the
    requested direction would clip, the pixel moves the other way instead.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if intensity_delta == 0:
        raise InvalidInputError("intensity_delta must be nonzero")
    if abs(intensity_delta) > 1:
        raise InvalidInputError("intensity_delta must lie in [-1, 1]")
    if kind not in DEFECT_KINDS:
        raise InvalidInputError(f"unknown defect kind {kind!r}")
    if size < 1 or size + 2 > min(h, w):
        raise InvalidInputError(f"defect size {size} does not fit a {h}x{w} image")
    rng = np.random.default_rng(seed)
    margin = int(math.ceil(size / 2)) + 1
    cy = int(rng.integers(margin, h - margin))
    cx = int(rng.integers(margin, w - margin))
    if kind == "blob":
        region = _disc(h, w, cy, cx, size / 2)
    elif kind == "scratch":
        region = _segment(h, w, cy, cx, size, rng.uniform(0, math.pi), max(0.75, size / 24))
    elif kind == "bridge":
        angle = 0.0 if rng.random() < 0.5 else math.pi / 2
        region = _segment(h, w, cy, cx, size, angle, max(1.5, size / 8))
    else:
        half_h = max(1, size // 4)
        box = np.zeros((h, w), dtype=bool)
        box[max(0, cy - half_h):cy + half_h + 1, max(0, cx - size // 2):cx + size // 2 + 1] = True
        bright = box & (img > np.median(img[box]))
        region = bright if bright.any() else box
    d = abs(intensity_delta)
    sign = np.sign(intensity_delta)
    want = img + sign * d
    other = img - sign * d
    clipped = (want < 0) | (want > 1)
    moved = np.where(clipped & (np.abs(np.clip(other, 0, 1) - img) > np.abs(np.clip(want, 0, 1) - img)),
                     other, want)
    out = np.where(region, np.clip(moved, 0.0, 1.0), img)
    mask = (out != img).astype(np.float64)
    return out, mask


def feature_mask_pseudo_defect(features, mask_ratio, seed=0):
    """Replace ⌈ratio·N⌉ random token rows in every layer with matched Gaussian noise.

    The noise is zero-mean and scaled by the layer's overall standard
    deviation. Centring it on the mean token instead would make the fake rows
    nearly collinear with real ones on strongly repetitive images.

    Returns the corrupted stack and a boolean token mask (True = replaced).
    """
    if not 0 < mask_ratio <= 0.5:
        raise InvalidInputError(f"mask_ratio must lie in (0, 0.5], got {mask_ratio}")
    layers = features.layers
    n = layers.shape[1]
    count = math.ceil(mask_ratio * n)
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=count, replace=False)
    token_mask = np.zeros(n, dtype=bool)
    token_mask[idx] = True
    sd = layers.std(axis=(1, 2), keepdims=True)
    noise = sd * rng.normal(size=(layers.shape[0], count, layers.shape[2]))
    out = layers.copy()
    out[:, idx] = noise
    return FeatureStack(out, features.grid), token_mask


def mask_token_batch(layers, mask_ratio, rng):
    """Vectorised variant for a (B, L, N, C) batch; returns (layers, (B, N) mask)."""
    b, nl, n, c = layers.shape
    count = math.ceil(mask_ratio * n)
    idx = np.argsort(rng.random((b, n)), axis=1)[:, :count]
    token_mask = np.zeros((b, n), dtype=bool)
    np.put_along_axis(token_mask, idx, True, axis=1)
    sd = layers.std(axis=(2, 3), keepdims=True)
    noise = sd * rng.normal(size=layers.shape)
    return np.where(token_mask[:, None, :, None], noise, layers), token_mask


# -- manifests ---------------------------------------------------------------

@dataclass
class Record:
    path: str
    split: str
    label: int | None = None
    mask: str | None = None


@dataclass
class Manifest:
    """Image records plus the seed and config that produced them.

    ``label`` on ``unlabeled`` and ``test`` records is ground truth kept for
    evaluation; training code must not read it.
    """

    records: list
    seed: int
    config: dict = field(default_factory=dict)
    root: Path | None = None

    def __post_init__(self):
        self.config = json.loads(json.dumps(self.config))  # normalise tuples to lists
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            raise InvalidInputError("manifest paths must be unique")
        classes = {c["id"] for c in self.config.get("classes", [])}
        for r in self.records:
            if r.split not in SPLITS:
                raise InvalidInputError(f"unknown split {r.split!r}")
            if r.split == "labeled_defect" and (r.label is None or r.mask is None):
                raise InvalidInputError(f"labeled record {r.path} needs a label and a mask")
            if classes and r.label is not None and r.label not in classes:
                raise InvalidInputError(f"{r.path}: label {r.label} not a declared class")

    def to_dict(self):
        return {"records": [asdict(r) for r in self.records], "seed": self.seed,
                "config": self.config}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d, root=None):
        return cls([Record(**r) for r in d["records"]], int(d["seed"]), d.get("config", {}), root)

    @classmethod
    def from_json(cls, text, root=None):
        return cls.from_dict(json.loads(text), root)

    def save(self, path):
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        self.root = path.parent

    @classmethod
    def load(cls, path):
        path = Path(path)
        return cls.from_json(path.read_text(encoding="utf-8"), root=path.parent)

    def select(self, split):
        return [r for r in self.records if r.split == split]

    def resolve(self, rel):
        return (self.root / rel) if self.root is not None else Path(rel)

    def image(self, record):
        return read_pgm(self.resolve(record.path))

    def mask(self, record):
        return None if record.mask is None else read_pgm(self.resolve(record.mask))

    @property
    def class_names(self):
        return {c["id"]: c["name"] for c in self.config.get("classes", [])}


# -- corpus ------------------------------------------------------------------

@dataclass
class DefectClass:
    name: str
    kind: str
    size_range: tuple
    delta_range: tuple


def default_classes():
    """Five classes with disjoint (kind, size, contrast) ranges; first three are base."""
    return [
        DefectClass("particle", "blob", (16, 20), (0.22, 0.28)),
        DefectClass("scratch", "scratch", (44, 52), (-0.28, -0.22)),
        DefectClass("open", "missing_structure", (32, 40), (-0.18, -0.13)),
        DefectClass("bridge", "bridge", (36, 44), (0.22, 0.28)),
        DefectClass("void", "blob", (30, 36), (-0.28, -0.22)),
    ]


@dataclass
class CorpusConfig:
    size: int = 224
    patterns: tuple = ("lines", "grid", "vias")
    periods: tuple = (7, 14)
    contrast_range: tuple = (0.3, 0.4)
    noise_sigma: float = 0.03
    n_train_normal: int = 64
    n_test_normal: int = 32
    classes: list = field(default_factory=default_classes)
    n_base: int = 3
    n_labeled: int = 20
    n_unlabeled: int = 20
    unlabeled_base: int = 0
    n_test_per_class: int = 0
    n_test_defect: int = 0

    def to_dict(self):
        d = asdict(self)
        d["classes"] = [dict(asdict(c) if isinstance(c, DefectClass) else c, id=i + 1)
                        for i, c in enumerate(self.classes)]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["classes"] = [DefectClass(c["name"], c["kind"], tuple(c["size_range"]), tuple(c["delta_range"]))
                        for c in d.get("classes", [])]
        for k in ("patterns", "periods", "contrast_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _background(cfg, rng):
    return gen_structured_background(
        cfg.size, cfg.size,
        pattern=cfg.patterns[rng.integers(len(cfg.patterns))],
        period=int(cfg.periods[rng.integers(len(cfg.periods))]),
        phase=int(rng.integers(0, 64)),
        contrast=float(rng.uniform(*cfg.contrast_range)),
        noise_sigma=cfg.noise_sigma,
        seed=int(rng.integers(2 ** 31)))


def sample_defect(cfg, cls, rng):
    """Draw one defect image of class ``cls``; returns (background, image, mask)."""
    bg = _background(cfg, rng)
    size = int(rng.integers(cls.size_range[0], cls.size_range[1] + 1))
    delta = float(rng.uniform(*cls.delta_range))
    img, mask = inject_defect(bg, cls.kind, size, delta, seed=int(rng.integers(2 ** 31)))
    return bg, img, mask


def build_synthetic_corpus(config, seed, out_dir):
    """Write a seeded corpus of PGM images and masks; return its manifest.

    The corpus is a pure function of ``(config, seed)``. Class ids start at 1;
    the first ``n_base`` classes get ``labeled_defect`` records, every class
    gets ``unlabeled`` records (base classes only ``unlabeled_base`` each).
    """
    cfg = config if isinstance(config, CorpusConfig) else CorpusConfig.from_dict(config)
    if cfg.n_base > len(cfg.classes):
        raise InvalidInputError("n_base exceeds the number of classes")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence(seed)
    records = []

    def emit(name, split, img, mask=None, label=None):
        rel = f"images/{name}.pgm"
        write_pgm(img, out / rel)
        mrel = None
        if mask is not None:
            mrel = f"masks/{name}.pgm"
            write_pgm(mask, out / mrel)
        records.append(Record(rel, split, label, mrel))

    plan = [("train_normal", None, cfg.n_train_normal), ("test", None, cfg.n_test_normal)]
    for ci, _ in enumerate(cfg.classes):
        label = ci + 1
        if ci < cfg.n_base:
            plan.append(("labeled_defect", label, cfg.n_labeled))
            plan.append(("unlabeled", label, cfg.unlabeled_base))
        else:
            plan.append(("unlabeled", label, cfg.n_unlabeled))
        plan.append(("test", label, cfg.n_test_per_class))
    children = ss.spawn(len(plan) + 1)
    for (split, label, count), child in zip(plan, children):
        rng = np.random.default_rng(child)
        for i in range(count):
            tag = "normal" if label is None else f"c{label}"
            name = f"{split}_{tag}_{i:04d}"
            if label is None:
                emit(name, split, _background(cfg, rng))
            else:
                _, img, mask = sample_defect(cfg, cfg.classes[label - 1], rng)
                emit(name, split, img, mask, label)
    # mixed-class defect test images (for detection benchmarks)
    rng = np.random.default_rng(children[-1])
    for i in range(cfg.n_test_defect):
        label = int(rng.integers(len(cfg.classes))) + 1
        _, img, mask = sample_defect(cfg, cfg.classes[label - 1], rng)
        emit(f"test_defect_{i:04d}", "test", img, mask, label)
    manifest = Manifest(records, int(seed), cfg.to_dict())
    manifest.save(out / "manifest.json")
    return manifest
