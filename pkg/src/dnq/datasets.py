"""Deterministic desk-scale data: synthetic Gaussian blobs and IDX files.

Every loader is pure and seeded; a dataset carries a provenance tag plus a
content checksum so a run's data lineage can be reconstructed from its
metrics log.  Calibration subsets are tagged with their parent's provenance,
which lets training assert that calibration data really came from the
training split.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import checkpoint

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_SPLIT_CODES = {"train": 1, "test": 2, "val": 3}


class DataError(Exception):
    pass


class BadMagicError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray   # float32 [N, ...]
    labels: np.ndarray   # int64 [N]
    num_classes: int
    provenance: str

    def __post_init__(self):
        object.__setattr__(self, "inputs", np.ascontiguousarray(self.inputs, dtype=np.float32))
        object.__setattr__(self, "labels", np.ascontiguousarray(self.labels, dtype=np.int64))
        if len(self.inputs) == 0:
            raise DataError("dataset is empty")
        if len(self.inputs) != len(self.labels):
            raise CountMismatchError(f"{len(self.inputs)} inputs vs {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"labels outside [0, {self.num_classes})")
        if not np.isfinite(self.inputs).all():
            raise DataError("non-finite input values")

    def __len__(self) -> int:
        return len(self.inputs)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.inputs.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()[:16]

    def subset(self, idx: np.ndarray, provenance: str) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.num_classes, provenance)


def synth_blobs(classes: int, per_class: int, dim: int, spread: float, seed: int,
                split: str = "train", center_radius: float = 4.0) -> LabeledDataset:
    """Gaussian blobs around near-equidistant random class centers.

    Centers depend only on ``seed`` (unit directions scaled to
    ``center_radius``), so train/test splits of the same seed share the same
    class geometry while drawing independent sample noise.
    """
    if classes < 2 or dim < 1 or per_class < 1:
        raise DataError(f"bad blob parameters: classes={classes} per_class={per_class} dim={dim}")
    if split not in _SPLIT_CODES:
        raise DataError(f"unknown split {split!r}; expected one of {sorted(_SPLIT_CODES)}")

    rng_centers = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0])))
    centers = rng_centers.normal(size=(classes, dim))
    centers *= center_radius / np.linalg.norm(centers, axis=1, keepdims=True)

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, _SPLIT_CODES[split]])))
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    points = centers[labels] + spread * rng.normal(size=(labels.size, dim))
    tag = f"blobs:seed={seed}:split={split}:K={classes}:n={per_class}:dim={dim}:spread={spread}"
    return LabeledDataset(points.astype(np.float32), labels, classes, tag)


def _read_idx(path: str, expect_magic: int):
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if len(blob) < 4:
        raise TruncatedFileError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expect_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise TruncatedFileError(f"{path}: truncated dimension table")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(blob) < header + count:
        raise TruncatedFileError(f"{path}: expected {count} payload bytes, found {len(blob) - header}")
    data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=header)
    return data.reshape(dims), blob


def load_idx(images_path: str, labels_path: str) -> LabeledDataset:
    """Load an IDX image/label pair; pixels are scaled to [0, 1].

    Images come out as [N, 1, H, W] float32.
    """
    images, iblob = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels, lblob = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    n, h, w = images.shape
    x = (images.astype(np.float32) / 255.0).reshape(n, 1, h, w)
    digest = hashlib.sha256(iblob + lblob).hexdigest()[:16]
    tag = f"idx:{images_path}:sha256={digest}"
    return LabeledDataset(x, labels.astype(np.int64), int(labels.max()) + 1, tag)


def sample_calibration(ds: LabeledDataset, size: int, seed: int) -> LabeledDataset:
    """Uniform sample without replacement; deterministic per seed."""
    if size < 1 or size > len(ds):
        raise DataError(f"calibration size {size} not in [1, {len(ds)}]")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xCA11B])))
    idx = rng.choice(len(ds), size=size, replace=False)
    return ds.subset(idx, f"calib-of:{ds.provenance}")


def is_calibration_of(calib: LabeledDataset, train: LabeledDataset) -> bool:
    return calib.provenance == f"calib-of:{train.provenance}" or calib.provenance == train.provenance


def save_dataset(ds: LabeledDataset, path: str) -> None:
    """Pin a dataset into the tensor container (labels stored as float32)."""
    checkpoint.save(path, {
        "inputs": ds.inputs,
        "labels": ds.labels.astype(np.float32),
        "num_classes": np.array([ds.num_classes], dtype=np.float32),
    })


def load_dataset(path: str, provenance: Optional[str] = None) -> LabeledDataset:
    t = checkpoint.load(path)
    return LabeledDataset(
        t["inputs"],
        t["labels"].astype(np.int64),
        int(t["num_classes"][0]),
        provenance or f"container:{path}",
    )
