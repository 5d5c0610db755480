"""Seeded synthetic image-feature datasets standing in for real image corpora.

Every sample has a *content* class (what the image shows) and an annotated
*label*.  Features are ``anchor[content] + image_noise * g / sqrt(d)`` with
``g ~ N(0, I)``.  With ``label_noise > 0`` a fixed fraction of each class's
training annotations is moved to other classes; the validation split is
always annotated correctly, as in noisy-label benchmarks.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import records
from .errors import ConfigError


@dataclass(frozen=True)
class DataSpec:
    num_classes: int = 10
    train_per_class: int = 100
    val_per_class: int = 50
    image_noise: float = 2.0
    label_noise: float = 0.0
    imbalance_factor: float = 1.0
    seed: int = 0

    def __post_init__(self):
        errors = []
        if self.num_classes < 2:
            errors.append("num_classes must be >= 2")
        if self.train_per_class < 1 or self.val_per_class < 1:
            errors.append("per-class counts must be >= 1")
        if self.image_noise < 0:
            errors.append("image_noise must be >= 0")
        if not 0 <= self.label_noise < 1:
            errors.append("label_noise must lie in [0, 1)")
        if self.imbalance_factor < 1:
            errors.append("imbalance_factor must be >= 1")
        if errors:
            raise ConfigError("invalid dataset spec: " + "; ".join(errors))


@dataclass
class Split:
    name: str
    sample_ids: list[str]
    features: np.ndarray  # (N, d) float32
    labels: np.ndarray  # (N,) int64, 0-based annotated class
    content: np.ndarray  # (N,) int64, 0-based true image class

    def __len__(self) -> int:
        return len(self.sample_ids)


@dataclass
class SyntheticDataset:
    spec: DataSpec
    train: Split
    val: Split

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        for split in (self.train, self.val):
            records.save_arrays(
                directory / split.name,
                {"features": split.features, "labels": split.labels, "content": split.content},
                {"sample_ids": split.sample_ids},
            )
        records.dump_json(
            directory / "manifest.json",
            {
                "spec": asdict(self.spec),
                "splits": {s.name: len(s) for s in (self.train, self.val)},
                "train_class_counts": class_counts(self.train.labels, self.spec.num_classes),
            },
        )
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "SyntheticDataset":
        directory = Path(directory)
        manifest = records.load_json(directory / "manifest.json")
        splits = {}
        for name in ("train", "val"):
            arrays, meta = records.load_arrays(directory / name)
            splits[name] = Split(
                name,
                list(meta["sample_ids"]),
                arrays["features"],
                arrays["labels"].astype(np.int64),
                arrays["content"].astype(np.int64),
            )
        return cls(DataSpec(**manifest["spec"]), splits["train"], splits["val"])


def class_counts(labels: np.ndarray, num_classes: int) -> list[int]:
    return np.bincount(labels, minlength=num_classes).astype(int).tolist()


def train_class_sizes(spec: DataSpec) -> list[int]:
    """Per-class training counts; exponential decay from head to tail when imbalanced."""
    C, n = spec.num_classes, spec.train_per_class
    if spec.imbalance_factor == 1:
        return [n] * C
    return [max(1, int(round(n * spec.imbalance_factor ** (-c / (C - 1))))) for c in range(C)]


def _make_split(name, sizes, anchors, spec, rng, label_noise) -> Split:
    C, d = anchors.shape
    content = np.concatenate([np.full(n, c, dtype=np.int64) for c, n in enumerate(sizes)])
    noise = rng.standard_normal((len(content), d))
    feats = anchors[content] + spec.image_noise * noise / np.sqrt(d)
    labels = content.copy()
    if label_noise > 0:
        start = 0
        for c, n in enumerate(sizes):
            k = int(round(label_noise * n))
            flip = start + rng.choice(n, size=k, replace=False)
            # cycle through the other classes so annotations stay close to balanced
            offsets = np.resize(rng.permutation(np.arange(1, C)), k)
            labels[flip] = (c + offsets) % C
            start += n
    ids = [f"{name}-{i:06d}" for i in range(len(content))]
    return Split(name, ids, feats.astype(np.float32), labels, content)


def generate_dataset(spec: DataSpec, anchors: np.ndarray) -> SyntheticDataset:
    """Draw train/val splits around the given class anchors (``(C, d)``)."""
    anchors = np.asarray(anchors, dtype=np.float64)
    if anchors.shape[0] != spec.num_classes:
        raise ConfigError(f"need {spec.num_classes} anchors, got {anchors.shape[0]}")
    rng = np.random.default_rng(spec.seed)
    train = _make_split("train", train_class_sizes(spec), anchors, spec, rng, spec.label_noise)
    val = _make_split("val", [spec.val_per_class] * spec.num_classes, anchors, spec, rng, 0.0)
    return SyntheticDataset(spec, train, val)
