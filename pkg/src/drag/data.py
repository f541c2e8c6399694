"""Synthetic co-occurrence benchmark.

An image is *private* (label 1) exactly when both patterns of the private
rule appear in it. Distractor patterns and negatives containing just one of
the pair keep any single pattern from deciding the label.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import netpbm
from .errors import ContractError, FormatError, GenerationError

KINDS = ("square", "cross", "stripes", "disk", "checker")
SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ["index", "filename", "label", "split"]
PLACEMENT_ATTEMPTS = 100
SHORTCUT_TOLERANCE = 0.03
SHORTCUT_MIN_PER_CLASS = 200


@dataclass(frozen=True)
class PatternSpec:
    kind: str
    size: int
    intensity: float

    def mask(self) -> np.ndarray:
        return pattern_mask(self.kind, self.size)


def pattern_mask(kind: str, size: int) -> np.ndarray:
    r, c = np.mgrid[:size, :size]
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "cross":
        w = max(1, size // 4)
        lo = (size - w) // 2
        band = lambda a: (a >= lo) & (a < lo + w)  # noqa: E731
        return band(r) | band(c)
    if kind == "stripes":
        return (r // 2) % 2 == 0
    if kind == "disk":
        mid = (size - 1) / 2.0
        return (r - mid) ** 2 + (c - mid) ** 2 <= (size / 2.0) ** 2
    if kind == "checker":
        return (r // 2 + c // 2) % 2 == 0
    raise ContractError(f"unknown pattern kind {kind!r}")


@dataclass(frozen=True)
class DatasetConfig:
    image_side: int = 32
    n_train: int = 1500
    n_val: int = 700
    n_test: int = 1000
    private_rule: tuple = ("square", "cross")
    class_ratio: float = 3.0
    noise_std: float = 0.05
    seed: int = 7
    pattern_size: int = 8
    background: float = 0.1
    min_patterns: int = 2
    max_patterns: int = 4
    single_negative_fraction: float = 0.5

    def __post_init__(self):
        if len(self.private_rule) != 2 or not set(self.private_rule) <= set(KINDS):
            raise ContractError(f"private_rule must name two of {KINDS}, got {self.private_rule}")
        if self.private_rule[0] == self.private_rule[1]:
            raise ContractError("private_rule needs two distinct patterns")
        if not 2 <= self.min_patterns <= self.max_patterns:
            raise ContractError("need 2 <= min_patterns <= max_patterns")
        if self.pattern_size > self.image_side // 2:
            raise ContractError("pattern_size must be at most half the image side")
        if self.class_ratio <= 0:
            raise ContractError("class_ratio must be positive")

    def split_sizes(self):
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}

    def to_lines(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name}={','.join(v) if isinstance(v, tuple) else v}")
        return out

    @classmethod
    def from_lines(cls, lines):
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        defaults = cls()
        for line in lines:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            if key not in types:
                raise FormatError(f"unknown dataset config key {key!r}")
            proto = getattr(defaults, key)
            if isinstance(proto, tuple):
                kwargs[key] = tuple(value.split(","))
            else:
                kwargs[key] = type(proto)(value)
        return cls(**kwargs)


@dataclass
class Dataset:
    images: np.ndarray  # n×3×S×S, values in [0, 1]
    labels: np.ndarray  # n, ints in {0, 1}
    splits: np.ndarray  # n, split names
    filenames: list

    def __len__(self):
        return len(self.labels)

    def split(self, name) -> "Dataset":
        keep = self.splits == name
        return Dataset(
            self.images[keep],
            self.labels[keep],
            self.splits[keep],
            [f for f, k in zip(self.filenames, keep) if k],
        )


def _distractor_kinds(config):
    return [k for k in KINDS if k not in config.private_rule]


def _sample_kinds(rng, config, label, single):
    k = int(rng.integers(config.min_patterns, config.max_patterns + 1))
    others = _distractor_kinds(config)
    if label == 1:
        kinds = list(config.private_rule)
    elif single:
        kinds = [config.private_rule[int(rng.integers(2))]]
    else:
        kinds = []
    kinds += [others[int(rng.integers(len(others)))] for _ in range(k - len(kinds))]
    rng.shuffle(kinds)
    return kinds


def _fill_fractions(size):
    return {k: pattern_mask(k, size).mean() for k in KINDS}


def render_sample(rng, config, label, single):
    """One quantised ``3×S×S`` image and the patterns placed in it."""
    side, size = config.image_side, config.pattern_size
    fills = _fill_fractions(size)
    ref = min(fills.values())
    img = np.full((side, side), config.background)
    boxes, specs = [], []
    for kind in _sample_kinds(rng, config, label, single):
        # equal expected mass per pattern, so pixel totals carry no label information
        spec = PatternSpec(kind, size, float(rng.uniform(0.7, 1.0) * ref / fills[kind]))
        for _ in range(PLACEMENT_ATTEMPTS):
            y, x = (int(v) for v in rng.integers(0, side - size + 1, size=2))
            if all(y + size + 1 <= by or by + size + 1 <= y or x + size + 1 <= bx or bx + size + 1 <= x for by, bx in boxes):
                break
        else:
            raise GenerationError(f"could not place a {kind} after {PLACEMENT_ATTEMPTS} attempts")
        boxes.append((y, x))
        img[y : y + size, x : x + size] += spec.intensity * spec.mask()
        specs.append((spec, (y, x)))
    rgb = img[None] + rng.normal(0.0, config.noise_std, (3, side, side))
    rgb = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0
    return rgb, specs


def generate_samples(config: DatasetConfig, with_specs=False):
    """Build every split in memory; deterministic in ``config.seed``."""
    images, labels, splits, names, placed = [], [], [], [], []
    index = 0
    for split_id, split in enumerate(SPLITS):
        n = config.split_sizes()[split]
        srng = np.random.default_rng([config.seed, split_id])
        lab = np.zeros(n, dtype=np.int64)
        lab[: int(round(n / (1.0 + config.class_ratio)))] = 1
        srng.shuffle(lab)
        negatives = np.flatnonzero(lab == 0)
        n_single = int(math.ceil(config.single_negative_fraction * len(negatives)))
        single = np.zeros(n, dtype=bool)
        single[srng.permutation(negatives)[:n_single]] = True
        for i in range(n):
            rng = np.random.default_rng([config.seed, split_id, i])
            img, specs = render_sample(rng, config, int(lab[i]), bool(single[i]))
            images.append(img)
            labels.append(int(lab[i]))
            splits.append(split)
            names.append(f"img_{index:05d}.ppm")
            placed.append(specs)
            index += 1
    side = config.image_side
    ds = Dataset(
        np.array(images).reshape(-1, 3, side, side),
        np.array(labels, dtype=np.int64),
        np.array(splits),
        names,
    )
    _check_no_intensity_shortcut(ds)
    return (ds, placed) if with_specs else ds


def _check_no_intensity_shortcut(ds: Dataset):
    if len(ds) == 0:
        return
    means = ds.images.reshape(len(ds), -1).mean(axis=1)
    pos, neg = means[ds.labels == 1], means[ds.labels == 0]
    if min(len(pos), len(neg)) < SHORTCUT_MIN_PER_CLASS:
        return
    m1, m0 = pos.mean(), neg.mean()
    if abs(m1 - m0) > SHORTCUT_TOLERANCE * max(m1, m0):
        raise GenerationError(f"class-conditional mean intensities differ too much: {m0:.4f} vs {m1:.4f}")


def to_bytes(image) -> np.ndarray:
    """``3×S×S`` reals in [0, 1] -> ``S×S×3`` uint8."""
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def generate_dataset(config: DatasetConfig, out_dir) -> Dataset:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_samples(config)
    for name, img in zip(ds.filenames, ds.images):
        netpbm.write(out / name, to_bytes(img))
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for i, (name, lab, split) in enumerate(zip(ds.filenames, ds.labels, ds.splits)):
            w.writerow([i, name, int(lab), split])
    (out / "genconfig.txt").write_text("\n".join(config.to_lines()) + "\n")
    return ds


def read_genconfig(path) -> DatasetConfig:
    p = Path(path) / "genconfig.txt"
    if not p.exists():
        raise FormatError(f"{p}: missing")
    return DatasetConfig.from_lines(p.read_text().splitlines())


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FormatError(f"{manifest}: manifest missing")
    images, labels, splits, names = [], [], [], []
    shape = None
    with open(manifest, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise FormatError(f"{manifest}:1: expected header {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise FormatError(f"{manifest}:{lineno}: expected 4 fields, got {len(row)}")
            idx, name, label, split = row
            if idx != str(len(labels)):
                raise FormatError(f"{manifest}:{lineno}: index {idx!r} out of order")
            if label not in ("0", "1"):
                raise FormatError(f"{manifest}:{lineno}: label {label!r} not in {{0,1}}")
            if split not in SPLITS:
                raise FormatError(f"{manifest}:{lineno}: unknown split {split!r}")
            img_path = root / name
            if not img_path.exists():
                raise FormatError(f"{img_path}: image file missing (manifest line {lineno})")
            pixels = netpbm.read(img_path)
            if pixels.ndim != 3:
                raise FormatError(f"{img_path}: expected a colour pixmap")
            if shape is None:
                shape = pixels.shape
            elif pixels.shape != shape:
                raise FormatError(f"{img_path}: shape {pixels.shape} differs from {shape}")
            images.append(pixels.transpose(2, 0, 1).astype(np.float64) / 255.0)
            labels.append(int(label))
            splits.append(split)
            names.append(name)
    if not labels:
        raise FormatError(f"{manifest}: no samples")
    return Dataset(np.array(images), np.array(labels, dtype=np.int64), np.array(splits), names)
