"""Datasets: the CIFAR-10 binary format and a seeded synthetic object-patch set."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RECORD_BYTES = 3073
IMAGE_BYTES = 3072
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int = 10
    boxes_train: np.ndarray | None = None  # (n, 4): top, left, height, width of the object patch
    boxes_test: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def astype(self, dtype) -> "Dataset":
        self.x_train = self.x_train.astype(dtype, copy=False)
        self.x_test = self.x_test.astype(dtype, copy=False)
        return self


def read_cifar10_file(path, mean=CIFAR_MEAN, std=CIFAR_STD, dtype=np.float32):
    """Parse one CIFAR-10 binary batch into standardized NCHW images and labels."""
    raw = Path(path).read_bytes()
    if len(raw) == 0:
        raise DataFormatError(f"{path}: empty file")
    whole, rem = divmod(len(raw), RECORD_BYTES)
    if rem:
        raise DataFormatError(
            f"{path}: truncated record at byte offset {whole * RECORD_BYTES} "
            f"({rem} of {RECORD_BYTES} bytes)")
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(whole, RECORD_BYTES)
    labels = buf[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataFormatError(
            f"{path}: label {labels[bad[0]]} out of range at byte offset {bad[0] * RECORD_BYTES}")
    images = buf[:, 1:].reshape(whole, 3, 32, 32).astype(np.float64) / 255.0
    images = (images - np.asarray(mean)[None, :, None, None]) / np.asarray(std)[None, :, None, None]
    return images.astype(dtype), labels


def load_cifar10(path, mean=CIFAR_MEAN, std=CIFAR_STD, dtype=np.float32) -> Dataset:
    """Load ``data_batch_*.bin`` and ``test_batch.bin`` from a directory.

    A single file path is accepted too and used as both splits.
    """
    path = Path(path)
    if path.is_file():
        x, y = read_cifar10_file(path, mean, std, dtype)
        return Dataset(x, y, x, y, 10, meta={"source": str(path)})
    train_files = sorted(path.glob("data_batch_*.bin"))
    test_file = path / "test_batch.bin"
    if not train_files or not test_file.exists():
        raise DataFormatError(f"{path}: expected data_batch_*.bin and test_batch.bin")
    parts = [read_cifar10_file(f, mean, std, dtype) for f in train_files]
    x_test, y_test = read_cifar10_file(test_file, mean, std, dtype)
    return Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                   x_test, y_test, 10, meta={"source": str(path)})


def write_cifar10_file(path, images_u8: np.ndarray, labels) -> None:
    """Write uint8 images (n, 3, 32, 32) and labels in the CIFAR-10 binary layout."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    recs = np.concatenate([labels[:, None], images_u8.reshape(len(labels), IMAGE_BYTES)], axis=1)
    Path(path).write_bytes(recs.tobytes())


@dataclass(frozen=True)
class SynthSpec:
    """Shape of the synthetic object-patch dataset.

    Each image is a low-contrast smoothed-noise texture with one bright
    ``patch`` x ``patch`` object pasted at a random position. The class
    decides the object's pattern and color.
    """

    n_train: int = 512
    n_test: int = 256
    num_classes: int = 4
    size: int = 16
    patch: int = 6
    texture: float = 0.25
    noise: float = 0.05


def _class_templates(spec: SynthSpec, rng: np.random.Generator):
    patterns, colors = [], []
    for _ in range(spec.num_classes):
        pat = (rng.random((spec.patch, spec.patch)) < 0.5).astype(np.float64)
        pat[spec.patch // 2, :] = 1.0
        patterns.append(pat)
        colors.append(rng.uniform(0.3, 1.0, 3))
    return np.stack(patterns), np.stack(colors)


def _render(spec: SynthSpec, labels, templates, rng):
    patterns, colors = templates
    n, s, p = len(labels), spec.size, spec.patch
    noise = rng.standard_normal((n, 3, s + 2, s + 2))
    texture = sum(noise[:, :, i:i + s, j:j + s] for i in range(3) for j in range(3)) / 3.0
    images = 0.5 * np.ones((n, 3, s, s)) + spec.texture * texture * 0.5
    tops = rng.integers(0, s - p + 1, n)
    lefts = rng.integers(0, s - p + 1, n)
    for i, (lab, t, l) in enumerate(zip(labels, tops, lefts)):
        obj = 0.15 + 1.6 * patterns[lab][None] * colors[lab][:, None, None]
        images[i, :, t:t + p, l:l + p] = obj
    images += spec.noise * rng.standard_normal(images.shape)
    boxes = np.stack([tops, lefts, np.full(n, p), np.full(n, p)], axis=1)
    return images, boxes


def synth_dataset(spec: SynthSpec = SynthSpec(), seed: int = 0, dtype=np.float32) -> Dataset:
    """Deterministic, class-balanced synthetic dataset, standardized per channel."""
    if spec.patch > spec.size or spec.num_classes < 2:
        raise ValueError("patch must fit in the image and there must be at least 2 classes")
    rng = np.random.default_rng([seed, 7919])
    templates = _class_templates(spec, np.random.default_rng([seed, 104729]))

    def labels(n):
        return rng.permutation(np.arange(n) % spec.num_classes)

    y_train, y_test = labels(spec.n_train), labels(spec.n_test)
    x_train, b_train = _render(spec, y_train, templates, rng)
    x_test, b_test = _render(spec, y_test, templates, rng)
    mean = x_train.mean(axis=(0, 2, 3))[None, :, None, None]
    std = x_train.std(axis=(0, 2, 3))[None, :, None, None]
    return Dataset(((x_train - mean) / std).astype(dtype), y_train,
                   ((x_test - mean) / std).astype(dtype), y_test, spec.num_classes,
                   b_train, b_test, meta={"synthetic": spec.__dict__, "seed": seed,
                                          "mean": mean.ravel().tolist(), "std": std.ravel().tolist()})


def render_object_image(spec: SynthSpec, dataset_seed: int, label: int, image_seed: int,
                        mean, std, dtype=np.float32):
    """One fresh image of class ``label`` drawn like the dataset's, plus its box."""
    templates = _class_templates(spec, np.random.default_rng([dataset_seed, 104729]))
    img, boxes = _render(spec, np.array([label]), templates, np.random.default_rng([image_seed, 31]))
    img = (img - np.asarray(mean)[None, :, None, None]) / np.asarray(std)[None, :, None, None]
    return img.astype(dtype), boxes[0]
