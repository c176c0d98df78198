"""Datasets: CIFAR-10 binary batches, JSON manifests and a synthetic
generator of confusable classes."""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_CLASSES = 10


class DataError(ValueError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray  # (n, C, H, W) in [0, 1]
    labels: np.ndarray  # (n, num_classes) bool
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.images.ndim != 4:
            raise DataError(f"images must be n×C×H×W, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError("images and labels differ in length")
        if len(self.labels) and not self.labels.any(axis=1).all():
            raise DataError("every image needs at least one label")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def primary_labels(self) -> np.ndarray:
        return self.labels.argmax(axis=1)

    def subset(self, index, split: str | None = None) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.intp)
        return LabeledDataset(self.images[index], self.labels[index], split or self.split)


def one_hot(classes: Sequence[int], num_classes: int) -> np.ndarray:
    out = np.zeros((len(classes), num_classes), dtype=bool)
    out[np.arange(len(classes)), np.asarray(classes, dtype=np.intp)] = True
    return out


def label_sets(labels: np.ndarray) -> list[set[int]]:
    return [set(np.flatnonzero(row).tolist()) for row in labels]


# ------------------------------------------------------------------- CIFAR-10


def parse_cifar10_bin(blob: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Raw records -> (uint8 images n×3×32×32, uint8 labels)."""
    if len(blob) % CIFAR_RECORD:
        offset = (len(blob) // CIFAR_RECORD) * CIFAR_RECORD
        raise DataError(f"{source}: truncated record at offset {offset}")
    recs = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0]
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        raise DataError(f"{source}: label byte {labels[bad[0]]} >= 10 at offset {bad[0] * CIFAR_RECORD}")
    return recs[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10_bin(paths: str | Path | Sequence[str | Path], split: str = "train") -> LabeledDataset:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for p in paths:
        img, lab = parse_cifar10_bin(Path(p).read_bytes(), str(p))
        images.append(img)
        labels.append(lab)
    img = np.concatenate(images) if images else np.zeros((0, 3, 32, 32), np.uint8)
    lab = np.concatenate(labels) if labels else np.zeros(0, np.uint8)
    return LabeledDataset(img.astype(np.float32) / 255.0, one_hot(lab, CIFAR_CLASSES), split)


def dump_cifar10_bin(ds: LabeledDataset) -> bytes:
    """Inverse of :func:`load_cifar10_bin` for single-label 3×32×32 data."""
    if ds.images.shape[1:] != (3, 32, 32) or ds.num_classes != CIFAR_CLASSES:
        raise DataError("CIFAR-10 records hold 3×32×32 images with 10 classes")
    if (ds.labels.sum(axis=1) != 1).any():
        raise DataError("CIFAR-10 records are single-label")
    pixels = np.rint(ds.images * 255.0).astype(np.uint8).reshape(len(ds), -1)
    recs = np.concatenate([ds.primary_labels().astype(np.uint8)[:, None], pixels], axis=1)
    return recs.tobytes()


def cifar_subset(ds: LabeledDataset, per_class: int) -> LabeledDataset:
    """First ``per_class`` images of each class, in file order."""
    cls = ds.primary_labels()
    keep = np.concatenate([np.flatnonzero(cls == c)[:per_class] for c in range(ds.num_classes)])
    return ds.subset(np.sort(keep))


def find_cifar10(root: str | Path) -> tuple[list[Path], list[Path]]:
    root = Path(root)
    for base in (root, root / "cifar-10-batches-bin"):
        train = [base / f"data_batch_{i}.bin" for i in range(1, 6)]
        test = [base / "test_batch.bin"]
        if all(p.is_file() for p in train + test):
            return train, test
    raise DataError(f"CIFAR-10 binary batches not found under {root}")


# ------------------------------------------------------------------ manifests


def _decode_image(entry: dict, base_dir: Path, index: int) -> np.ndarray:
    ref = entry.get("image")
    if not isinstance(ref, str):
        raise DataError(f"entry {index}: 'image' must be a path or 'base64:' string")
    if ref.startswith("base64:"):
        raw = base64.b64decode(ref[len("base64:") :])
    else:
        path = base_dir / ref
        if not path.is_file():
            raise DataError(f"entry {index}: image file {path} not found")
        raw = path.read_bytes()
    h, w = entry.get("height"), entry.get("width")
    if h is None or w is None:
        side = int(round((len(raw) / 3) ** 0.5))
        h = w = side
    if len(raw) != 3 * h * w:
        raise DataError(f"entry {index}: {len(raw)} bytes is not a {h}x{w} RGB image")
    # raw files are interleaved RGB rows
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)


def load_manifest(path: str | Path, num_classes: int | None = None, split: str = "train") -> LabeledDataset:
    """JSON array of ``{"image": path-or-"base64:...", "labels": [int, ...]}``.

    Images are raw interleaved 8-bit RGB; optional ``height``/``width``
    keys give the dimensions, otherwise the image is taken to be square.
    """
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(entries, list) or not entries:
        raise DataError(f"{path}: manifest must be a non-empty JSON array")
    images, labels = [], []
    for i, entry in enumerate(entries):
        labs = entry.get("labels")
        if not labs:
            raise DataError(f"entry {i}: empty label list")
        if any((not isinstance(l, int)) or l < 0 for l in labs):
            raise DataError(f"entry {i}: labels must be non-negative integers")
        img = _decode_image(entry, path.parent, i)
        if images and img.shape != images[0].shape:
            raise DataError(f"entry {i}: image shape {img.shape[1:]} differs from {images[0].shape[1:]}")
        images.append(img)
        labels.append(sorted(set(labs)))
    top = max(max(l) for l in labels) + 1
    num_classes = top if num_classes is None else num_classes
    if top > num_classes:
        raise DataError(f"label {top - 1} out of range for {num_classes} classes")
    bits = np.zeros((len(labels), num_classes), dtype=bool)
    for i, labs in enumerate(labels):
        bits[i, labs] = True
    return LabeledDataset(np.stack(images).astype(np.float32) / 255.0, bits, split)


def dump_manifest(ds: LabeledDataset) -> str:
    entries = []
    for img, labs in zip(ds.images, ds.labels):
        raw = np.rint(img * 255.0).astype(np.uint8).transpose(1, 2, 0).tobytes()
        entries.append({
            "image": "base64:" + base64.b64encode(raw).decode("ascii"),
            "height": int(img.shape[1]),
            "width": int(img.shape[2]),
            "labels": np.flatnonzero(labs).tolist(),
        })
    return json.dumps(entries)


# ------------------------------------------------------------------ synthetic


@dataclass
class SyntheticSpec:
    """Classes that share coarse appearance inside a group and differ only in
    a small class-specific patch."""

    num_classes: int = 4
    images_per_class: int = 500
    image_size: int = 16
    confusable_groups: list[list[int]] = field(default_factory=lambda: [[0, 1], [2, 3]])
    noise: float = 0.08
    patch_size: int = 4
    patch_contrast: float = 0.5
    patch_jitter: int = 1
    shape_jitter: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.patch_size + 2 * self.patch_jitter > self.image_size:
            raise DataError(
                f"patch {self.patch_size} with jitter {self.patch_jitter} does not fit a {self.image_size}px image"
            )
        seen: set[int] = set()
        for g in self.confusable_groups:
            if len(g) < 2:
                raise DataError(f"confusable group {g} needs at least two classes")
            if seen & set(g):
                raise DataError("a class may belong to only one confusable group")
            if any(not 0 <= c < self.num_classes for c in g):
                raise DataError(f"group {g} names classes outside [0, {self.num_classes})")
            seen |= set(g)
        if self.images_per_class < 1 or self.num_classes < 2:
            raise DataError("need at least two classes and one image per class")

    def groups(self) -> list[list[int]]:
        """Confusable groups plus singleton groups for ungrouped classes."""
        grouped = {c for g in self.confusable_groups for c in g}
        return [list(g) for g in self.confusable_groups] + [[c] for c in range(self.num_classes) if c not in grouped]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


def _blob_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    cy, cx = rng.uniform(0.3, 0.7, 2)
    ry, rx = rng.uniform(0.2, 0.4, 2)
    return (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(np.float64)


def generate_synthetic(spec: SyntheticSpec) -> LabeledDataset:
    """Deterministic under ``spec.seed``.

    Every group owns a background colour, a foreground colour and a blob
    shape (shifted by up to ``shape_jitter`` pixels per image), so classes of
    one group look alike at coarse scale. Each class
    additionally owns a ``patch_size`` square pattern, pasted at a jittered
    position near the image centre; only the patch tells group members apart.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    s, ps = spec.image_size, spec.patch_size
    groups = spec.groups()
    group_of = {c: gi for gi, g in enumerate(groups) for c in g}
    looks = []
    for _ in groups:
        bg = rng.uniform(0.1, 0.9, 3)
        fg = np.clip(bg + rng.choice([-1, 1], 3) * rng.uniform(0.3, 0.45, 3), 0, 1)
        looks.append((bg, fg, _blob_mask(s, rng)))
    patterns = {}
    for c in range(spec.num_classes):
        bits = rng.integers(0, 2, (ps, ps))
        while bits.all() or not bits.any():
            bits = rng.integers(0, 2, (ps, ps))
        patterns[c] = bits.astype(np.float64)
    n = spec.num_classes * spec.images_per_class
    images = np.empty((n, 3, s, s), dtype=np.float64)
    classes = np.repeat(np.arange(spec.num_classes), spec.images_per_class)
    centre = (s - ps) // 2
    for i, c in enumerate(classes):
        bg, fg, mask = looks[group_of[c]]
        if spec.shape_jitter:
            dy, dx = rng.integers(-spec.shape_jitter, spec.shape_jitter + 1, 2)
            mask = np.roll(mask, (dy, dx), axis=(0, 1))
        img = bg[:, None, None] * (1 - mask) + fg[:, None, None] * mask
        img = img * rng.uniform(0.85, 1.15)  # per-image brightness
        oy, ox = centre + rng.integers(-spec.patch_jitter, spec.patch_jitter + 1, 2)
        pat = patterns[c]
        img[:, oy : oy + ps, ox : ox + ps] = 0.5 + (pat - 0.5) * spec.patch_contrast
        img += rng.normal(0.0, spec.noise, img.shape)
        images[i] = img
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return LabeledDataset(images, one_hot(classes, spec.num_classes), "all")


def split(ds: LabeledDataset, train_fraction: float, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified by primary (first) label; both parts keep dataset order."""
    if not 0 < train_fraction < 1:
        raise DataError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    cls = ds.primary_labels()
    train_idx, test_idx = [], []
    for c in np.unique(cls):
        members = np.flatnonzero(cls == c)
        if len(members) < 2:
            raise DataError(f"class {c} has {len(members)} example(s); need at least 2 to split")
        members = rng.permutation(members)
        cut = int(round(train_fraction * len(members)))
        cut = min(max(cut, 1), len(members) - 1)
        train_idx.append(members[:cut])
        test_idx.append(members[cut:])
    return (ds.subset(np.sort(np.concatenate(train_idx)), "train"),
            ds.subset(np.sort(np.concatenate(test_idx)), "test"))


# ------------------------------------------------------- dataset descriptions


def _resolve(base_dir: Path, ref) -> Path:
    if not isinstance(ref, str) or not ref:
        raise DataError(f"expected a path string, got {ref!r}")
    p = Path(ref)
    return p if p.is_absolute() else base_dir / p


def check_dataset_section(section: dict, base_dir: str | Path = ".") -> None:
    """Validate a dataset description without loading any images.

    Forms::

        {"type": "synthetic", "spec": {...}, "train_fraction": 0.8, "split_seed": 0}
        {"type": "cifar10", "root": DIR, "train_per_class": 500, "test_per_class": 100}
        {"type": "manifest", "train": FILE, "test": FILE, "num_classes": N}

    Relative paths are taken from ``base_dir``.
    """
    base_dir = Path(base_dir)
    if not isinstance(section, dict):
        raise DataError("dataset section must be a JSON object")
    kind = section.get("type")
    allowed = {
        "synthetic": {"type", "spec", "train_fraction", "split_seed"},
        "cifar10": {"type", "root", "train_per_class", "test_per_class"},
        "manifest": {"type", "train", "test", "num_classes"},
    }
    if kind not in allowed:
        raise DataError(f"dataset type must be one of {sorted(allowed)}, got {kind!r}")
    unknown = set(section) - allowed[kind]
    if unknown:
        raise DataError(f"unknown {kind} dataset keys: {sorted(unknown)}")
    if kind == "synthetic":
        SyntheticSpec.from_dict(section.get("spec", {})).validate()
        frac = section.get("train_fraction", 0.8)
        if not 0 < frac < 1:
            raise DataError(f"train_fraction must be in (0, 1), got {frac}")
    elif kind == "cifar10":
        find_cifar10(_resolve(base_dir, section.get("root")))
    else:
        for key in ("train", "test"):
            p = _resolve(base_dir, section.get(key))
            if not p.is_file():
                raise DataError(f"manifest {p} not found")


def load_dataset_section(section: dict, base_dir: str | Path = ".") -> tuple[LabeledDataset, LabeledDataset]:
    """(train, test) datasets for a description accepted by :func:`check_dataset_section`."""
    check_dataset_section(section, base_dir)
    base_dir = Path(base_dir)
    kind = section["type"]
    if kind == "synthetic":
        ds = generate_synthetic(SyntheticSpec.from_dict(section.get("spec", {})))
        return split(ds, section.get("train_fraction", 0.8), section.get("split_seed", 0))
    if kind == "cifar10":
        train_files, test_files = find_cifar10(_resolve(base_dir, section["root"]))
        train, test = load_cifar10_bin(train_files, "train"), load_cifar10_bin(test_files, "test")
        if section.get("train_per_class", 500) is not None:
            train = cifar_subset(train, section.get("train_per_class", 500))
        if section.get("test_per_class", 100) is not None:
            test = cifar_subset(test, section.get("test_per_class", 100))
        return train.subset(np.arange(len(train)), "train"), test.subset(np.arange(len(test)), "test")
    nc = section.get("num_classes")
    train = load_manifest(_resolve(base_dir, section["train"]), nc, "train")
    test = load_manifest(_resolve(base_dir, section["test"]), nc or train.num_classes, "test")
    if test.num_classes != train.num_classes:
        raise DataError(f"train manifest has {train.num_classes} classes, test has {test.num_classes}")
    return train, test
