"""Dataset ingestion, deterministic splitting, and synthetic stand-ins.

Real data is parsed bit-exactly from the published formats: big-endian
IDX byte files for the 28x28 sets, 3073-byte binary records for CIFAR-10.
Pixels are scaled to [0, 1] and normalized with the dataset-standard
per-channel constants, which are recorded in the bundle.

The synthetic generator writes procedurally rendered 10-class glyph
datasets *in those same file formats*, so the full pipeline (parsers
included) is runnable on machines where the real datasets are absent.
Synthetic roots carry a manifest marking them as stand-ins.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .errors import IngestionError, ValidationError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 pixel bytes

DATASET_INFO = {
    "mnist": {
        "shape": (1, 28, 28),
        "mean": (0.1307,),
        "std": (0.3081,),
        "layout": "idx",
    },
    "fashionmnist": {
        "shape": (1, 28, 28),
        "mean": (0.2860,),
        "std": (0.3530,),
        "layout": "idx",
    },
    "cifar10": {
        "shape": (3, 32, 32),
        "mean": (0.4914, 0.4822, 0.4465),
        "std": (0.2470, 0.2435, 0.2616),
        "layout": "cifar",
    },
}

IDX_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class DatasetBundle:
    id: str
    train_x: np.ndarray  # float32, N x C x H x W, normalized
    train_y: np.ndarray  # int64
    test_x: np.ndarray
    test_y: np.ndarray
    mean: tuple
    std: tuple

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])


class SplitData(NamedTuple):
    x: np.ndarray
    y: np.ndarray


def _read_bytes(path: Path) -> bytes:
    gz = path.with_name(path.name + ".gz")
    if path.exists():
        return path.read_bytes()
    if gz.exists():
        with gzip.open(gz, "rb") as fh:
            return fh.read()
    raise IngestionError(f"missing dataset file {path} (or {gz.name})",
                         path=str(path))


def parse_idx_images(raw: bytes, path="<bytes>") -> np.ndarray:
    if len(raw) < 16:
        raise IngestionError(f"{path}: truncated IDX header", path=path,
                             offset=len(raw))
    magic, n, rows, cols = struct.unpack(">iiii", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IngestionError(
            f"{path}: bad IDX image magic 0x{magic:08x}", path=path, offset=0)
    expected = 16 + n * rows * cols
    if len(raw) != expected:
        raise IngestionError(
            f"{path}: expected {expected} bytes, got {len(raw)}",
            path=path, offset=min(len(raw), expected))
    data = np.frombuffer(raw, dtype=np.uint8, offset=16)
    return data.reshape(n, rows, cols)


def parse_idx_labels(raw: bytes, path="<bytes>") -> np.ndarray:
    if len(raw) < 8:
        raise IngestionError(f"{path}: truncated IDX header", path=path,
                             offset=len(raw))
    magic, n = struct.unpack(">ii", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise IngestionError(
            f"{path}: bad IDX label magic 0x{magic:08x}", path=path, offset=0)
    if len(raw) != 8 + n:
        raise IngestionError(
            f"{path}: expected {8 + n} bytes, got {len(raw)}",
            path=path, offset=min(len(raw), 8 + n))
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise IngestionError(
            f"{path}: label {labels[bad[0]]} out of range at record {bad[0]}",
            path=path, offset=8 + int(bad[0]))
    return labels.astype(np.int64)


def parse_cifar_batch(raw: bytes, path="<bytes>"):
    if len(raw) == 0 or len(raw) % CIFAR_RECORD != 0:
        raise IngestionError(
            f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}",
            path=path, offset=len(raw) - (len(raw) % CIFAR_RECORD))
    n = len(raw) // CIFAR_RECORD
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise IngestionError(
            f"{path}: label {labels[bad[0]]} out of range at record {bad[0]}",
            path=path, offset=int(bad[0]) * CIFAR_RECORD)
    images = rec[:, 1:].reshape(n, 3, 32, 32)
    return images, labels


def _normalize(images_u8: np.ndarray, mean, std) -> np.ndarray:
    x = images_u8.astype(np.float32) / 255.0
    mean = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return (x - mean) / std


def load_dataset(dataset_id: str, root) -> DatasetBundle:
    """Parse a dataset from `root/<dataset_id>/...` in its published format."""
    if dataset_id not in DATASET_INFO:
        raise ValidationError(f"unknown dataset {dataset_id!r}; "
                              f"expected one of {sorted(DATASET_INFO)}")
    info = DATASET_INFO[dataset_id]
    base = Path(root) / dataset_id
    if info["layout"] == "idx":
        train_img = parse_idx_images(
            _read_bytes(base / IDX_FILES["train_images"]),
            path=str(base / IDX_FILES["train_images"]))
        train_lab = parse_idx_labels(
            _read_bytes(base / IDX_FILES["train_labels"]),
            path=str(base / IDX_FILES["train_labels"]))
        test_img = parse_idx_images(
            _read_bytes(base / IDX_FILES["test_images"]),
            path=str(base / IDX_FILES["test_images"]))
        test_lab = parse_idx_labels(
            _read_bytes(base / IDX_FILES["test_labels"]),
            path=str(base / IDX_FILES["test_labels"]))
        train_img = train_img[:, None, :, :]
        test_img = test_img[:, None, :, :]
    else:
        batch_dir = base / "cifar-10-batches-bin"
        train_parts = []
        label_parts = []
        for i in range(1, 6):
            p = batch_dir / f"data_batch_{i}.bin"
            imgs, labs = parse_cifar_batch(_read_bytes(p), path=str(p))
            train_parts.append(imgs)
            label_parts.append(labs)
        train_img = np.concatenate(train_parts)
        train_lab = np.concatenate(label_parts)
        p = batch_dir / "test_batch.bin"
        test_img, test_lab = parse_cifar_batch(_read_bytes(p), path=str(p))

    if len(train_img) != len(train_lab) or len(test_img) != len(test_lab):
        raise IngestionError(f"{base}: image/label count mismatch",
                             path=str(base))
    return DatasetBundle(
        id=dataset_id,
        train_x=_normalize(train_img, info["mean"], info["std"]),
        train_y=train_lab,
        test_x=_normalize(test_img, info["mean"], info["std"]),
        test_y=test_lab,
        mean=info["mean"],
        std=info["std"],
    )


def split_train_val(bundle: DatasetBundle, ratio: float, seed: int):
    """Deterministic shuffled split of the train set into train/val parts."""
    if not (0 < ratio < 1):
        raise ValidationError(f"split ratio must be in (0, 1), got {ratio}")
    n = len(bundle.train_x)
    n_train = int(ratio * n)
    perm = np.random.default_rng(seed).permutation(n)
    tr, va = perm[:n_train], perm[n_train:]
    return (SplitData(bundle.train_x[tr], bundle.train_y[tr]),
            SplitData(bundle.train_x[va], bundle.train_y[va]))


# ---------------------------------------------------------------------------
# Synthetic glyph datasets (stand-ins written in the real file formats)


def _render_glyph(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One 10-class glyph with random pose; returns floats in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = size / 2 + rng.uniform(-3, 3)
    cy = size / 2 + rng.uniform(-3, 3)
    scale = rng.uniform(0.75, 1.15) * size / 28.0
    theta = rng.uniform(-0.35, 0.35)
    thick = rng.uniform(1.2, 2.2) * scale
    r_big = 8.0 * scale
    length = 9.0 * scale
    u = np.cos(theta) * (xx - cx) + np.sin(theta) * (yy - cy)
    v = -np.sin(theta) * (xx - cx) + np.cos(theta) * (yy - cy)
    rr = np.hypot(u, v)

    def stroke(a, b, half_len, t=thick):
        return (np.abs(a) < t) & (np.abs(b) < half_len)

    if label == 0:
        mask = np.abs(rr - r_big) < thick
    elif label == 1:
        mask = stroke(u, v, length)
    elif label == 2:
        mask = stroke(v, u, length)
    elif label == 3:
        d = (u + v) / np.sqrt(2)
        p = (u - v) / np.sqrt(2)
        mask = stroke(d, p, length)
    elif label == 4:
        d = (u - v) / np.sqrt(2)
        p = (u + v) / np.sqrt(2)
        mask = stroke(d, p, length)
    elif label == 5:
        mask = stroke(u, v, length) | stroke(v, u, length)
    elif label == 6:
        d1 = (u + v) / np.sqrt(2)
        p1 = (u - v) / np.sqrt(2)
        mask = stroke(d1, p1, length) | stroke(p1, d1, length)
    elif label == 7:
        box = np.maximum(np.abs(u), np.abs(v))
        mask = np.abs(box - r_big) < thick
    elif label == 8:
        mask = rr < 0.65 * r_big
    elif label == 9:
        mask = stroke(v - 0.6 * length, u, 0.9 * length) | stroke(u, v, length)
    else:
        raise ValidationError(f"label out of range: {label}")

    img = mask.astype(np.float64) * rng.uniform(0.7, 1.0)
    img = ndimage.gaussian_filter(img, sigma=rng.uniform(0.5, 0.8))
    img = img + rng.normal(0, 0.08, img.shape)
    return np.clip(img, 0.0, 1.0)


def render_glyph_dataset(n: int, size: int, channels: int, seed: int):
    """Balanced labels; grayscale or color-on-noise depending on channels."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 10).astype(np.int64)
    images = np.zeros((n, channels, size, size), dtype=np.uint8)
    for i, lab in enumerate(labels):
        g = _render_glyph(int(lab), size, rng)
        if channels == 1:
            images[i, 0] = (g * 255).astype(np.uint8)
        else:
            color = rng.uniform(0.35, 1.0, size=3)
            bg = np.clip(rng.normal(0.35, 0.1, size=(3, 1, 1))
                         + rng.normal(0, 0.05, size=(3, size, size)), 0, 1)
            rgb = bg * (1 - g[None]) + color[:, None, None] * g[None]
            images[i] = (np.clip(rgb, 0, 1) * 255).astype(np.uint8)
    return images, labels


def write_idx_images(path, images_u8: np.ndarray) -> None:
    n, rows, cols = images_u8.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images_u8.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.astype(np.uint8).tobytes())


def write_cifar_batches(batch_dir, train_images, train_labels,
                        test_images, test_labels) -> None:
    batch_dir = Path(batch_dir)
    batch_dir.mkdir(parents=True, exist_ok=True)

    def write_batch(path, images, labels):
        rec = np.zeros((len(labels), CIFAR_RECORD), dtype=np.uint8)
        rec[:, 0] = labels
        rec[:, 1:] = images.reshape(len(labels), -1)
        Path(path).write_bytes(rec.tobytes())

    parts = np.array_split(np.arange(len(train_labels)), 5)
    for i, idx in enumerate(parts, start=1):
        write_batch(batch_dir / f"data_batch_{i}.bin",
                    train_images[idx], train_labels[idx])
    write_batch(batch_dir / "test_batch.bin", test_images, test_labels)


def generate_synthetic(root, dataset_id: str, n_train: int, n_test: int,
                       seed: int) -> Path:
    """Write a glyph stand-in for `dataset_id` under `root` and return its dir."""
    if dataset_id not in DATASET_INFO:
        raise ValidationError(f"unknown dataset {dataset_id!r}")
    info = DATASET_INFO[dataset_id]
    c, h, _ = info["shape"]
    base = Path(root) / dataset_id
    base.mkdir(parents=True, exist_ok=True)
    train_img, train_lab = render_glyph_dataset(n_train, h, c, seed)
    test_img, test_lab = render_glyph_dataset(n_test, h, c, seed + 1)
    if info["layout"] == "idx":
        write_idx_images(base / IDX_FILES["train_images"], train_img[:, 0])
        write_idx_labels(base / IDX_FILES["train_labels"], train_lab)
        write_idx_images(base / IDX_FILES["test_images"], test_img[:, 0])
        write_idx_labels(base / IDX_FILES["test_labels"], test_lab)
    else:
        write_cifar_batches(base / "cifar-10-batches-bin",
                            train_img, train_lab, test_img, test_lab)
    manifest = {"synthetic": True, "dataset": dataset_id, "seed": seed,
                "n_train": n_train, "n_test": n_test,
                "note": "procedural glyph stand-in, not the real dataset"}
    (base / "SYNTHETIC.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return base
