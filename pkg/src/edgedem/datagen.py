"""Non-IID, unbalanced per-UE datasets: a synthetic generator and an IDX reader."""

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import BadMagic, CountMismatch, InsufficientSamples, TruncatedFile

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
TEST_FRACTION = 0.2


@dataclass
class Dataset:
    """Samples with global ids and a train/test split.

    ``index`` holds the id of every row in the source dataset so shards can be
    traced back; ``test_mask`` marks held-out rows.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    index: Optional[np.ndarray] = None
    test_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.shape[0] != self.labels.shape[0]:
            raise CountMismatch("features and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels outside [0, n_classes)")
        if self.index is None:
            self.index = np.arange(len(self.labels))
        if self.test_mask is None:
            self.test_mask = np.zeros(len(self.labels), dtype=bool)
        self.index = np.asarray(self.index, dtype=int)
        self.test_mask = np.asarray(self.test_mask, dtype=bool)

    def __len__(self):
        return len(self.labels)

    @property
    def train(self) -> "Dataset":
        return self._subset(~self.test_mask)

    @property
    def test(self) -> "Dataset":
        return self._subset(self.test_mask)

    def _subset(self, mask) -> "Dataset":
        return Dataset(self.features[mask], self.labels[mask], self.n_classes, self.index[mask], self.test_mask[mask])

    @property
    def label_set(self) -> set:
        return set(np.unique(self.labels).tolist())


@dataclass(frozen=True)
class PartitionSpec:
    labels_per_ue: int = 2
    samples_per_ue: tuple = (30, 300)
    seed: int = 0
    test_fraction: float = TEST_FRACTION

    def __post_init__(self):
        lo, hi = self.samples_per_ue
        if self.labels_per_ue < 1 or lo < 1 or hi < lo:
            raise ValueError("labels_per_ue >= 1 and 1 <= samples_per_ue[0] <= samples_per_ue[1] required")


def synth_dataset(n_classes: int = 10, input_dim: int = 20, n_samples: int = 20000, seed: int = 0,
                  spread: float = 1.0, scale: float = 4.0, offset: float = 0.0,
                  test_fraction: float = TEST_FRACTION) -> Dataset:
    """Gaussian blobs centred on the scaled vertices of a simplex.

    Class ``c`` has mean ``scale * e_c + offset``; coordinates past
    ``n_classes`` carry only the offset and noise. The shared ``offset`` plays
    the part of background intensity in pixel data: it does not change
    separability but couples the classes, so a model trained on a few labels
    forgets the others. Labels are drawn uniformly.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if input_dim < n_classes:
        raise ValueError("input_dim must be >= n_classes")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_classes, n_samples)
    means = np.full((n_classes, input_dim), float(offset))
    means[np.arange(n_classes), np.arange(n_classes)] += scale
    x = means[labels] + spread * rng.standard_normal((n_samples, input_dim))
    test = np.zeros(n_samples, dtype=bool)
    test[rng.permutation(n_samples)[: int(round(test_fraction * n_samples))]] = True
    return Dataset(x, labels, n_classes, np.arange(n_samples), test)


def _log_uniform_int(rng, lo, hi, size):
    return np.floor(np.exp(rng.uniform(np.log(lo), np.log(hi + 1), size))).astype(int).clip(lo, hi)


def partition_noniid(data: Dataset, n_ues: int, spec: PartitionSpec) -> list:
    """Split ``data`` into ``n_ues`` disjoint shards, each drawn from ``labels_per_ue`` classes.

    Shard sizes are log-uniform over ``spec.samples_per_ue``. A UE's train rows
    come from the global train pool and its test rows (``test_fraction`` of the
    shard) from the global test pool, so no row is ever reused.
    """
    c = data.n_classes
    if spec.labels_per_ue > c:
        raise ValueError("labels_per_ue exceeds the number of classes")
    rng = np.random.default_rng(spec.seed)
    pools = {}
    for split, mask in (("train", ~data.test_mask), ("test", data.test_mask)):
        for label in range(c):
            rows = np.flatnonzero(mask & (data.labels == label))
            pools[split, label] = list(rng.permutation(rows))

    sizes = _log_uniform_int(rng, *spec.samples_per_ue, n_ues)
    shards = []
    for n in range(n_ues):
        labels = np.sort(rng.choice(c, spec.labels_per_ue, replace=False))
        n_test = int(round(spec.test_fraction * sizes[n]))
        rows, is_test = [], []
        for split, count in (("train", sizes[n] - n_test), ("test", n_test)):
            per_label = np.full(len(labels), count // len(labels))
            per_label[: count % len(labels)] += 1
            for label, k in zip(labels, per_label):
                pool = pools[split, int(label)]
                if len(pool) < k:
                    raise InsufficientSamples(f"UE {n}: {split} pool of label {label} has {len(pool)} rows, need {k}")
                rows.extend(pool[:k])
                del pool[:k]
                is_test.extend([split == "test"] * int(k))
        rows = np.asarray(rows, dtype=int)
        shards.append(Dataset(data.features[rows], data.labels[rows], c, data.index[rows], np.asarray(is_test)))
    return shards


def build_generalization_pool(per_ue: list) -> Dataset:
    """Concatenate every UE's test rows, dropping duplicate ids."""
    tests = [d.test for d in per_ue]
    feats = np.concatenate([t.features for t in tests])
    labels = np.concatenate([t.labels for t in tests])
    index = np.concatenate([t.index for t in tests])
    _, first = np.unique(index, return_index=True)
    keep = np.sort(first)
    return Dataset(feats[keep], labels[keep], per_ue[0].n_classes, index[keep], np.ones(keep.size, dtype=bool))


def partition_manifest(per_ue: list, spec: PartitionSpec) -> dict:
    return {
        "seed": spec.seed,
        "labels_per_ue": spec.labels_per_ue,
        "samples_per_ue": list(spec.samples_per_ue),
        "ues": [
            {"ue": n, "train": int((~d.test_mask).sum()), "test": int(d.test_mask.sum()),
             "labels": sorted(d.label_set)}
            for n, d in enumerate(per_ue)
        ],
    }


def write_manifest(path, per_ue: list, spec: PartitionSpec) -> None:
    Path(path).write_text(json.dumps(partition_manifest(per_ue, spec), indent=2))


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFile("file shorter than its IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagic(f"expected magic 0x{magic:08x}, found 0x{got:08x}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise TruncatedFile(f"payload has {len(raw) - header} bytes, header promises {need}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx_archive(images_path, labels_path, n_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped) into a flat Dataset with pixels in [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    feats = images.reshape(images.shape[0], -1).astype(float) / 255.0
    return Dataset(feats, labels.astype(int), n_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())
