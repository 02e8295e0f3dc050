"""Manifest ingestion, stratified splitting, crop sampling and the synthetic corpus."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .pyramid import write_png

SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.70, 0.10, 0.20)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    image_path: Path
    label: int
    split: str | None = None

    @property
    def id(self) -> str:
        return self.image_path.stem


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be three values summing to 1: {self.fractions}")
        if min(self.fractions) < 0:
            raise ValueError("split fractions must be non-negative")


@dataclass
class Crop:
    tensor: np.ndarray  # C x h x w
    sample_id: str | None = None
    scale: int | None = None


def load_manifest(path, check_images: bool = True) -> tuple[list[Sample], list[str]]:
    """Read a ``path,label[,split]`` CSV.

    Relative paths resolve against the manifest's directory. Samples come back
    sorted by path; labels are indexed 0..K-1 in alphabetical class order.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ManifestError(f"empty manifest: {path}")
        missing = {"path", "label"} - set(reader.fieldnames)
        if missing:
            raise ManifestError(f"manifest {path} lacks column(s) {sorted(missing)}")
        rows = list(reader)
    if not rows:
        raise ManifestError(f"empty manifest: {path}")

    seen: set[Path] = set()
    parsed = []
    for lineno, row in enumerate(rows, start=2):
        p = Path(row["path"])
        if not p.is_absolute():
            p = root / p
        if p in seen:
            raise ManifestError(f"row {lineno}: duplicate path {row['path']}")
        seen.add(p)
        split = (row.get("split") or "").strip() or None
        if split is not None and split not in SPLITS:
            raise ManifestError(f"row {lineno}: unknown split {split!r} for {row['path']}")
        if check_images:
            if not p.exists():
                raise ManifestError(f"row {lineno}: image file not found: {p}")
            try:
                with PILImage.open(p) as im:
                    im.verify()
            except Exception as exc:
                raise ManifestError(f"row {lineno}: unreadable image {p}: {exc}") from exc
        parsed.append((p, row["label"].strip(), split))

    names = sorted({lab for _, lab, _ in parsed})
    index = {n: i for i, n in enumerate(names)}
    samples = sorted((Sample(p, index[lab], split) for p, lab, split in parsed),
                     key=lambda s: str(s.image_path))
    return samples, names


def write_manifest(path, samples: list[Sample], names: list[str]) -> None:
    path = Path(path)
    root = path.parent.resolve()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "split"])
        for s in samples:
            p = Path(s.image_path).resolve()
            try:
                p = p.relative_to(root)
            except ValueError:
                pass
            w.writerow([p.as_posix(), names[s.label], s.split or ""])


def stratified_split(samples: list[Sample], spec: SplitSpec = SplitSpec()) -> list[Sample]:
    """Assign train/val/test per class: shuffle by seed, floor the val and test shares."""
    by_class: dict[int, list[Sample]] = {}
    for s in sorted(samples, key=lambda s: str(s.image_path)):
        by_class.setdefault(s.label, []).append(s)
    rng = np.random.default_rng(spec.seed)
    assigned: dict[Path, str] = {}
    for label in sorted(by_class):
        members = by_class[label]
        n = len(members)
        if n < 3:
            raise ValueError(f"class {label} has {n} samples; stratified split needs >= 3")
        order = rng.permutation(n)
        n_val = math.floor(spec.fractions[1] * n)
        n_test = math.floor(spec.fractions[2] * n)
        n_train = n - n_val - n_test
        for rank, i in enumerate(order):
            split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            assigned[members[i].image_path] = split
    return [replace(s, split=assigned[s.image_path]) for s in samples]


def sample_crop(img: np.ndarray, crop_size: int, rng: np.random.Generator,
                flip: bool = False, sample_id=None, scale=None) -> Crop:
    """Uniformly placed ``crop_size`` square from an H x W x C image."""
    h, w = img.shape[:2]
    if h < crop_size or w < crop_size:
        raise ValueError(f"image {h}x{w} is smaller than crop {crop_size}")
    y = int(rng.integers(0, h - crop_size + 1))
    x = int(rng.integers(0, w - crop_size + 1))
    patch = img[y:y + crop_size, x:x + crop_size]
    if flip and rng.random() < 0.5:
        patch = patch[:, ::-1]
    return Crop(np.ascontiguousarray(np.transpose(patch, (2, 0, 1))), sample_id, scale)


def write_normalization(path, mean, std=None) -> None:
    stats = {"mean": [float(m) for m in mean]}
    if std is not None:
        stats["std"] = [float(v) for v in std]
    Path(path).write_text(json.dumps(stats))


def read_normalization(path) -> np.ndarray:
    return np.array(json.loads(Path(path).read_text())["mean"])


# -- synthetic corpus ---------------------------------------------------------
#
# Every class pairs a coarse layout (two tones arranged at the scale of the
# whole image) with a fine stroke texture (period 3 px at the finest scale).
# The base block of four classes is
#     0: bands   + vertical strokes
#     1: bands   + horizontal strokes     (differs from 0 only in texture)
#     2: cross   + vertical strokes       (differs from 0 only in layout)
#     3: corner  + diagonal strokes       (unique in both)
# so classes 0/1 separate only at fine scales, 0/2 only at coarse scales, and
# 3 at every scale. Further classes repeat the block with other layouts and
# textures.

LAYOUTS = ("bands", "cross", "corner", "frame", "diamond", "split")
TEXTURES = ("vertical", "horizontal", "diagonal", "antidiagonal", "dots", "grid")
_BLOCK = ((0, 0), (0, 1), (1, 0), (2, 2))


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 4
    per_class: int = 60
    base_side: int = 256
    seed: int = 0
    layout_contrast: float = 0.16
    texture_amplitude: float = 0.5
    texture_period: int = 3
    noise: float = 0.03

    def __post_init__(self):
        if self.num_classes < 4:
            raise ValueError("synthetic corpus needs at least 4 classes")
        _block_offsets(-(-self.num_classes // 4))


def _block_offsets(num_blocks: int) -> list[tuple[int, int]]:
    # per block, (layout, texture) offsets chosen so no attribute pair repeats
    used: set[tuple[int, int]] = set()
    out = []
    for b in range(num_blocks):
        lay_off = (3 * b) % len(LAYOUTS)
        for tex_off in range(len(TEXTURES)):
            pairs = {((lay + lay_off) % len(LAYOUTS), (tex + tex_off) % len(TEXTURES))
                     for lay, tex in _BLOCK}
            if not pairs & used:
                break
        else:
            raise ValueError(f"synthetic corpus supports at most {4 * b} classes")
        used |= pairs
        out.append((lay_off, tex_off))
    return out


def class_attributes(label: int) -> tuple[str, str]:
    """(layout, texture) names of a synthetic class."""
    block, pos = divmod(label, 4)
    lay_off, tex_off = _block_offsets(block + 1)[block]
    lay, tex = _BLOCK[pos]
    return (LAYOUTS[(lay + lay_off) % len(LAYOUTS)], TEXTURES[(tex + tex_off) % len(TEXTURES)])


def _layout_mask(name: str, side: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side] / side
    if rng.random() < 0.5:
        yy, xx = xx, yy
    if name == "bands":
        m = (yy > 0.25) & (yy < 0.75)
    elif name == "cross":
        m = (yy < 0.5) ^ (xx < 0.5)
    elif name == "corner":
        if rng.random() < 0.5:
            yy = 1 - yy
        if rng.random() < 0.5:
            xx = 1 - xx
        m = (yy < 0.25) ^ (xx < 0.25)
    elif name == "frame":
        m = (np.abs(yy - 0.5) < 0.3) & (np.abs(xx - 0.5) < 0.3)
    elif name == "diamond":
        m = np.abs(yy - 0.5) + np.abs(xx - 0.5) < 0.35
    elif name == "split":
        m = yy < 0.5
    else:
        raise ValueError(name)
    return m.astype(np.float64)


def _texture(name: str, side: int, period: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    phase = int(rng.integers(period))
    if name == "vertical":
        t = (xx + phase) % period == 0
    elif name == "horizontal":
        t = (yy + phase) % period == 0
    elif name == "diagonal":
        t = (xx + yy + phase) % period == 0
    elif name == "antidiagonal":
        t = (xx - yy + phase) % period == 0
    elif name == "dots":
        t = ((xx + phase) % period == 0) & ((yy + phase) % period == 0)
    elif name == "grid":
        t = ((xx + phase) % period == 0) | ((yy + phase) % period == 0)
    else:
        raise ValueError(name)
    t = t.astype(np.float64)
    return t - t.mean()


def synthesize_image(label: int, spec: SynthSpec, rng: np.random.Generator,
                     texture_region: np.ndarray | None = None) -> np.ndarray:
    """One H x W x 3 image of class ``label``.

    ``texture_region`` (a boolean side x side mask) limits the stroke texture
    to part of the image; by default it covers everything.
    """
    layout, texture = class_attributes(label)
    side = spec.base_side
    mask = _layout_mask(layout, side, rng)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    tone = 0.5 + rng.uniform(-0.05, 0.05)
    img = tone + sign * spec.layout_contrast * (mask - 0.5)
    tex = _texture(texture, side, spec.texture_period, rng)
    if texture_region is not None:
        tex = tex * texture_region
    img = img + spec.texture_amplitude * tex
    img = img[:, :, None] + rng.normal(0.0, spec.noise, (side, side, 3))
    return np.clip(img, 0.0, 1.0)


def synthesize_probe(label: int, spec: SynthSpec, rng: np.random.Generator):
    """Image whose texture fills only a central square; returns ``(image, region)``."""
    side = spec.base_side
    region = np.zeros((side, side), dtype=bool)
    lo, hi = side // 4, side - side // 4
    region[lo:hi, lo:hi] = True
    return synthesize_image(label, spec, rng, region), region


def generate_synthetic_corpus(out_dir, spec: SynthSpec = SynthSpec()) -> Path:
    """Write ``num_classes * per_class`` PNGs plus ``manifest.csv``; return the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    names = [f"class{k:02d}" for k in range(spec.num_classes)]
    samples = []
    for label in range(spec.num_classes):
        for i in range(spec.per_class):
            img = synthesize_image(label, spec, rng)
            rel = Path("images") / names[label] / f"{names[label]}_{i:04d}.png"
            write_png(img, out_dir / rel)
            samples.append(Sample(out_dir / rel, label))
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, samples, names)
    return manifest
