"""Procedural rope imagery with graded damage overlays and paired text.

Every damage renderer is a convex blend between the clean render and a
target pattern, with the blend weight strictly increasing in the severity
scalar. That keeps pixels in [0, 1] without clamping and makes the
"more severe means visibly more different" property exact rather than
approximate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .taxonomy import (CHAFING, CLASSES, COMPRESSION, CORE_OUT, CUT_STRANDS,
                       NUM_CLASSES, PLACKING, class_by_index, severity_bin)

IMAGE_SIZE = 64
GRID = 8                      # damage regions are tracked on the patch grid
PATCH = IMAGE_SIZE // GRID

SPLIT_NAMES = ("train", "val", "test")
SPLIT_CODES = {"train": 0, "val": 1, "test": 2}

# class-index order; train imbalance max/min = 145/5 = 29, test keeps
# Strand Coreout as the largest class and CoreOut+CutStrands the smallest
DEFAULT_COUNTS = {
    "train": (40, 38, 52, 50, 42, 46, 35, 33, 40, 78, 47, 49, 5, 145),
    "val": (6, 6, 8, 8, 7, 7, 5, 5, 6, 12, 7, 8, 2, 23),
    "test": (6, 7, 8, 8, 7, 8, 6, 6, 7, 11, 8, 8, 2, 28),
}

_PALETTE = (
    (0.62, 0.48, 0.33),
    (0.55, 0.41, 0.27),
    (0.70, 0.57, 0.40),
    (0.48, 0.38, 0.28),
)


@dataclass(frozen=True)
class RopeSpec:
    """Parameters of the clean twisted-strand background."""

    strand_count: int            # stripes across the rope, 4..7
    twist_frequency: float       # lay slant, cycles across the width
    base_color: tuple
    noise_level: float


@dataclass(frozen=True)
class DamageSpec:
    damage_type: str
    severity: float              # continuous ground truth in [0, 1]
    region: tuple                # (r0, c0, r1, c1) patch coords, end-exclusive
    partner_type: Optional[str] = None
    partner_region: Optional[tuple] = None


@dataclass
class Sample:
    sample_id: str
    image: np.ndarray            # (3, 64, 64) floats in [0, 1]
    class_index: int
    severity_scalar: float
    description: str


def rope_spec(rng: np.random.Generator) -> RopeSpec:
    return RopeSpec(
        strand_count=int(rng.integers(4, 8)),
        twist_frequency=float(rng.uniform(1.5, 3.0)),
        base_color=tuple(_PALETTE[int(rng.integers(len(_PALETTE)))]),
        noise_level=float(rng.uniform(0.01, 0.04)),
    )


def render_rope(spec: RopeSpec, rng: np.random.Generator) -> np.ndarray:
    y, x = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    phase = 2.0 * np.pi * (spec.strand_count * y / IMAGE_SIZE
                           + spec.twist_frequency * x / IMAGE_SIZE)
    shade = 0.72 + 0.25 * np.sin(phase)
    fibre = 0.04 * np.sin(2.0 * np.pi * 9.0 * x / IMAGE_SIZE + 0.8 * np.sin(phase))
    noise = ndimage.gaussian_filter(rng.normal(size=(IMAGE_SIZE, IMAGE_SIZE)), 1.2)
    noise = noise / max(noise.std(), 1e-9) * spec.noise_level
    tex = shade + fibre + noise
    image = np.stack([c * tex for c in spec.base_color])
    return np.clip(image, 0.02, 0.98)


# --- damage overlays --------------------------------------------------------

def _region_window(region: tuple) -> np.ndarray:
    """Smooth (raised-cosine) spatial weight over a patch-grid bbox."""
    r0, c0, r1, c1 = region
    win = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    h, w = (r1 - r0) * PATCH, (c1 - c0) * PATCH
    wy = 0.5 - 0.5 * np.cos(2.0 * np.pi * (np.arange(h) + 0.5) / h)
    wx = 0.5 - 0.5 * np.cos(2.0 * np.pi * (np.arange(w) + 0.5) / w)
    win[r0 * PATCH:r1 * PATCH, c0 * PATCH:c1 * PATCH] = np.outer(wy, wx)
    return win


def damage_region(rng: np.random.Generator, damage_type: str) -> tuple:
    if damage_type == CUT_STRANDS:
        w = int(rng.integers(4, 7))
        c0 = int(rng.integers(0, GRID - w + 1))
        return (0, c0, GRID, c0 + w)
    if damage_type == COMPRESSION:
        w = int(rng.integers(3, 6))
        c0 = int(rng.integers(0, GRID - w + 1))
        return (0, c0, GRID, c0 + w)
    if damage_type == CORE_OUT:
        side = int(rng.integers(4, 6))
        r0 = (GRID - side) // 2 + int(rng.integers(-1, 2))
        c0 = (GRID - side) // 2 + int(rng.integers(-1, 2))
        r0 = int(np.clip(r0, 0, GRID - side))
        c0 = int(np.clip(c0, 0, GRID - side))
        return (r0, c0, r0 + side, c0 + side)
    h = int(rng.integers(3, 6))
    w = int(rng.integers(3, 6))
    r0 = int(rng.integers(0, GRID - h + 1))
    c0 = int(rng.integers(0, GRID - w + 1))
    return (r0, c0, r0 + h, c0 + w)


def _blend(image, target, weight):
    # weight in [0, 1] per pixel keeps the result inside [0, 1]
    return image + weight[None, :, :] * (target - image)


def _chafing(image, s, region, rng):
    hf = rng.uniform(-1.0, 1.0, size=(IMAGE_SIZE, IMAGE_SIZE))
    hf = ndimage.gaussian_filter(hf, 0.6)
    hf = hf / max(np.abs(hf).max(), 1e-9)
    target = np.broadcast_to(0.5 + 0.45 * hf, image.shape)
    return _blend(image, target, (0.15 + 0.75 * s) * _region_window(region))


def _cut_strands(image, s, region, rng):
    r0, c0, r1, c1 = region
    cx = (c0 + c1) / 2.0 * PATCH
    slope = float(rng.uniform(0.35, 0.75)) * float(rng.choice((-1.0, 1.0)))
    y, x = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    dist = np.abs((x - cx) - slope * (y - IMAGE_SIZE / 2.0))
    half_width = 1.0 + 3.0 * s
    band = np.clip(1.0 - dist / (half_width + 1.5), 0.0, 1.0)
    band *= _region_window(region) > 0.02        # confined to the region
    return _blend(image, np.full_like(image, 0.06), (0.55 + 0.40 * s) * band)


def _placking(image, s, region, rng):
    window = _region_window(region)
    amp = 4.0 * window                           # fixed peak displacement, px
    y, x = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    coords_y = np.clip(y + amp, 0, IMAGE_SIZE - 1)
    warped = np.stack([
        ndimage.map_coordinates(ch, [coords_y, x], order=1, mode="nearest")
        for ch in image])
    # displaced loops stand proud of the lay and catch the light
    ridge = np.clip(np.sin(2.0 * np.pi * y / 8.0), 0.0, 1.0) * window
    target = warped + 0.5 * ridge[None] * (0.95 - warped)
    beta = 0.30 + 0.70 * s
    mask = (window > 0.0).astype(np.float64)
    return image + beta * mask[None] * (target - image)


def _compression(image, s, region, rng):
    # fixed-strength flattening; the class carries no severity grade
    r0, c0, r1, c1 = region
    y, x = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    cy = IMAGE_SIZE / 2.0
    squeeze_y = np.clip(cy + (y - cy) * 1.8, 0, IMAGE_SIZE - 1)
    squeezed = np.stack([
        ndimage.map_coordinates(ch, [squeeze_y, x], order=1, mode="nearest")
        for ch in image])
    return image + 0.85 * _region_window(region)[None] * (squeezed - image)


def _core_out(image, s, region, rng):
    r0, c0, r1, c1 = region
    cy, cx = (r0 + r1) / 2.0 * PATCH, (c0 + c1) / 2.0 * PATCH
    ry, rx = (r1 - r0) / 2.0 * PATCH, (c1 - c0) / 2.0 * PATCH
    y, x = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    d2 = ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2
    bump = np.clip(1.0 - d2, 0.0, 1.0) ** 2
    return _blend(image, np.full_like(image, 0.93), (0.40 + 0.55 * s) * bump)


_RENDERERS = {
    CHAFING: _chafing,
    CUT_STRANDS: _cut_strands,
    PLACKING: _placking,
    COMPRESSION: _compression,
    CORE_OUT: _core_out,
}


def apply_damage(image: np.ndarray, damage_type: str, s: float, region: tuple,
                 rng: np.random.Generator) -> np.ndarray:
    if damage_type not in _RENDERERS:
        raise ValueError(f"unknown damage type: {damage_type}")
    return _RENDERERS[damage_type](image, float(s), region, rng)


_BIN_RANGES = {"Low": (0.0, 1.0 / 3.0), "Medium": (1.0 / 3.0, 2.0 / 3.0),
               "High": (2.0 / 3.0, 1.0)}


def draw_severity(class_index: int, rng: np.random.Generator) -> float:
    cls = class_by_index(class_index)
    if cls.severity is not None:
        lo, hi = _BIN_RANGES[cls.severity]
        return float(rng.uniform(lo, hi))
    # ungraded classes still need a render intensity; keep it clearly visible
    return float(rng.uniform(0.5, 0.9))


# --- descriptions -----------------------------------------------------------

_ADVERBS = {
    "High": ("severe", "extensive", "pronounced"),
    "Medium": ("moderate", "noticeable", "partial"),
    "Low": ("minor", "slight", "superficial"),
}

_TYPE_PHRASES = {
    CHAFING: ("surface abrasion with fibre bundle exposure",
              "chafing and fuzzing of the outer yarns",
              "abrasion wear across the sheath"),
    CUT_STRANDS: ("cut strands with severed fibre bundles",
                  "strand cuts across the lay",
                  "severed outer strands"),
    PLACKING: ("placking with displaced strand loops",
               "pulled loops standing proud of the lay",
               "plack distortion of the braid"),
    COMPRESSION: ("compression flattening of the cross section",
                  "crushed profile from compression set",
                  "compression damage with a flattened lay"),
    CORE_OUT: ("core protrusion through the outer strands",
               "extruded core visible at the surface",
               "coreout with the core standing exposed"),
}

_PLAIN_TAILS = ("", " along the rope", " at mid span")
_JOINERS = (" combined with ", " together with ", " alongside ")


def describe(class_index: int, severity_scalar: float,
             rng: np.random.Generator) -> str:
    cls = class_by_index(class_index)
    phrase = _TYPE_PHRASES[cls.damage_type][int(rng.integers(3))]
    if cls.severity is not None:
        adverb = _ADVERBS[severity_bin(severity_scalar)][int(rng.integers(3))]
        return f"{adverb} {phrase}"
    if cls.partner_type is not None:
        partner = _TYPE_PHRASES[cls.partner_type][int(rng.integers(3))]
        return f"{phrase}{_JOINERS[int(rng.integers(3))]}{partner}"
    return f"{phrase}{_PLAIN_TAILS[int(rng.integers(3))]}"


# --- sample assembly --------------------------------------------------------

def generate_sample(class_index: int, seed, sample_id: str = "") -> Sample:
    cls = class_by_index(class_index)
    rng = np.random.default_rng(seed)
    spec = rope_spec(rng)
    image = render_rope(spec, rng)
    s = draw_severity(class_index, rng)
    region = damage_region(rng, cls.damage_type)
    partner_region = (damage_region(rng, cls.partner_type)
                      if cls.partner_type else None)
    image = apply_damage(image, cls.damage_type, s, region, rng)
    if cls.partner_type is not None:
        image = apply_damage(image, cls.partner_type, s, partner_region, rng)
    description = describe(class_index, s, rng)
    return Sample(sample_id=sample_id, image=image, class_index=class_index,
                  severity_scalar=s, description=description)


@dataclass
class Dataset:
    seed: int
    splits: dict
    channel_mean: np.ndarray     # train statistics, (3,)
    channel_std: np.ndarray

    @property
    def class_weights(self) -> np.ndarray:
        counts = np.bincount(
            [s.class_index for s in self.splits["train"]], minlength=NUM_CLASSES)
        total = counts.sum()
        return total / (NUM_CLASSES * counts)


def make_splits(counts: Optional[dict] = None, seed: int = 0) -> Dataset:
    counts = dict(DEFAULT_COUNTS if counts is None else counts)
    for name in SPLIT_NAMES:
        if name not in counts or len(counts[name]) != NUM_CLASSES:
            raise ValueError(f"counts for split '{name}' must cover all classes")
        if any(int(c) < 1 for c in counts[name]):
            raise ValueError(f"counts for split '{name}' must be positive")
    splits = {}
    for name in SPLIT_NAMES:
        samples = []
        for class_index, n in enumerate(counts[name]):
            for i in range(int(n)):
                ss = np.random.SeedSequence(
                    (seed, SPLIT_CODES[name], class_index, i))
                sid = f"{name}-c{class_index:02d}-{i:03d}"
                samples.append(generate_sample(class_index, ss, sid))
        splits[name] = samples
    train_stack = np.stack([s.image for s in splits["train"]])
    mean = train_stack.mean(axis=(0, 2, 3))
    std = train_stack.std(axis=(0, 2, 3))
    return Dataset(seed=seed, splits=splits, channel_mean=mean, channel_std=std)


# --- augmentation -----------------------------------------------------------

def _resample(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return np.stack([
        ndimage.map_coordinates(ch, [rows, cols], order=1, mode="nearest")
        for ch in image])


def random_resized_crop(image, rng, lo=0.8, hi=1.0):
    area = float(rng.uniform(lo, hi))
    side = max(2, int(round(IMAGE_SIZE * np.sqrt(area))))
    r0 = int(rng.integers(0, IMAGE_SIZE - side + 1))
    c0 = int(rng.integers(0, IMAGE_SIZE - side + 1))
    lin = np.linspace(0.0, side - 1.0, IMAGE_SIZE)
    rows, cols = np.meshgrid(r0 + lin, c0 + lin, indexing="ij")
    return _resample(image, rows, cols)


def random_flips(image, rng):
    if rng.uniform() < 0.5:
        image = image[:, :, ::-1]
    if rng.uniform() < 0.5:
        image = image[:, ::-1, :]
    return np.ascontiguousarray(image)


def random_rotation(image, rng, max_deg=15.0):
    theta = np.deg2rad(float(rng.uniform(-max_deg, max_deg)))
    c = (IMAGE_SIZE - 1) / 2.0
    y, x = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    rows = c + np.cos(theta) * (y - c) - np.sin(theta) * (x - c)
    cols = c + np.sin(theta) * (y - c) + np.cos(theta) * (x - c)
    return _resample(image, rows, cols)


def color_jitter(image, rng, lo=0.7, hi=1.3):
    out = image * float(rng.uniform(lo, hi))                  # brightness
    grey = out.mean()
    out = grey + float(rng.uniform(lo, hi)) * (out - grey)    # contrast
    return np.clip(out, 0.0, 1.0)


def train_transform(image, rng):
    image = random_resized_crop(image, rng)
    image = random_flips(image, rng)
    image = random_rotation(image, rng)
    return color_jitter(image, rng)


def normalize(image, mean, std):
    return (image - np.asarray(mean)[:, None, None]) / np.asarray(std)[:, None, None]


def augment(image, seed, mean, std, train: bool = True):
    """Full input pipeline; val/test is plain normalization."""
    if train:
        image = train_transform(image, np.random.default_rng(seed))
    return normalize(image, mean, std)


def noise_images(n: int, seed) -> np.ndarray:
    """Uniform-noise frames for out-of-distribution screening."""
    return np.random.default_rng(seed).uniform(size=(n, 3, IMAGE_SIZE, IMAGE_SIZE))


# --- disk layout ------------------------------------------------------------

def export_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "seed": ds.seed,
        "image_size": IMAGE_SIZE,
        "channel_mean": ds.channel_mean.tolist(),
        "channel_std": ds.channel_std.tolist(),
        "class_weights": ds.class_weights.tolist(),
        "counts": {name: [int(c) for c in np.bincount(
            [s.class_index for s in ds.splits[name]], minlength=NUM_CLASSES)]
            for name in SPLIT_NAMES},
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2))
    for name in SPLIT_NAMES:
        split_dir = root / name
        (split_dir / "images").mkdir(parents=True, exist_ok=True)
        lines = []
        for s in ds.splits[name]:
            rel = f"images/{s.sample_id}.npy"
            np.save(split_dir / rel, s.image.astype(np.float32))
            cls = CLASSES[s.class_index]
            lines.append(json.dumps({
                "id": s.sample_id,
                "class_index": s.class_index,
                "type": cls.damage_type,
                "severity_bin": cls.severity,
                "severity_scalar": s.severity_scalar,
                "description": s.description,
                "path": rel,
            }))
        (split_dir / "manifest.jsonl").write_text("\n".join(lines) + "\n")


def _load_image(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64)
    from PIL import Image                       # optional, real-photo ingest
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def load_dataset(root) -> Dataset:
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    splits = {}
    for name in SPLIT_NAMES:
        samples = []
        for line in (root / name / "manifest.jsonl").read_text().splitlines():
            rec = json.loads(line)
            image = _load_image(root / name / rec["path"])
            samples.append(Sample(
                sample_id=rec["id"], image=image,
                class_index=int(rec["class_index"]),
                severity_scalar=float(rec["severity_scalar"]),
                description=rec["description"]))
        splits[name] = samples
    return Dataset(seed=int(meta["seed"]), splits=splits,
                   channel_mean=np.asarray(meta["channel_mean"]),
                   channel_std=np.asarray(meta["channel_std"]))
