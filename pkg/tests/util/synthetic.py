# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Small on-disk datasets in the real file formats."""

from __future__ import annotations

from pathlib import Path
import struct

import numpy as np


def idx_images_bytes(images: np.ndarray) -> bytes:
    """Encode uint8 images [n, rows, cols] as an IDX3 file.

    :param images: Images to encode
    :return: File contents
    """
    count, rows, cols = images.shape
    return struct.pack(">IIII", 0x803, count, rows, cols) + images.astype(
        np.uint8,
    ).tobytes()


def idx_labels_bytes(labels: np.ndarray) -> bytes:
    """Encode uint8 labels as an IDX1 file.

    :param labels: Labels to encode
    :return: File contents
    """
    return struct.pack(">II", 0x801, len(labels)) + labels.astype(np.uint8).tobytes()


def cifar_bytes(pixels: np.ndarray, labels: np.ndarray) -> bytes:
    """Encode uint8 images [n, 3, 32, 32] as a CIFAR10 batch file.

    :param pixels: Images to encode
    :param labels: One label per image
    :return: File contents
    """
    records = np.concatenate(
        [labels.astype(np.uint8)[:, None], pixels.reshape(len(labels), -1)],
        axis=1,
    )
    return records.astype(np.uint8).tobytes()


def _labelled_images(
    rng: np.random.Generator,
    count: int,
    shape: tuple[int, ...],
) -> tuple[np.ndarray, np.ndarray]:
    labels = np.arange(count) % 10
    rng.shuffle(labels)
    images = rng.integers(0, 64, size=(count, *shape), dtype=np.uint8)
    # One bright column band per class keeps the classes separable
    band = shape[-1] // 10
    for image, label in zip(images, labels):
        image[..., label * band : (label + 1) * band] = 255
    return images, labels


def write_idx_dataset(
    data_root: Path,
    name: str = "mnist",
    train_count: int = 40,
    test_count: int = 20,
    seed: int = 0,
) -> Path:
    """Write the four IDX files of a tiny grayscale dataset.

    :param data_root: Data root receiving a ``name`` directory
    :param name: "mnist" or "fashionmnist"
    :param train_count: Training samples
    :param test_count: Test samples
    :param seed: Generator seed
    :return: The dataset directory
    """
    rng = np.random.default_rng(seed)
    directory = data_root / name
    directory.mkdir(parents=True, exist_ok=True)
    for prefix, count in (("train", train_count), ("t10k", test_count)):
        images, labels = _labelled_images(rng, count, (28, 28))
        (directory / f"{prefix}-images-idx3-ubyte").write_bytes(
            idx_images_bytes(images),
        )
        (directory / f"{prefix}-labels-idx1-ubyte").write_bytes(
            idx_labels_bytes(labels),
        )
    return directory


def write_cifar_dataset(
    data_root: Path,
    per_batch: int = 8,
    test_count: int = 20,
    seed: int = 0,
) -> Path:
    """Write the six batch files of a tiny CIFAR10 dataset.

    :param data_root: Data root receiving a ``cifar10`` directory
    :param per_batch: Records in each training batch
    :param test_count: Test records
    :param seed: Generator seed
    :return: The dataset directory
    """
    rng = np.random.default_rng(seed)
    directory = data_root / "cifar10"
    directory.mkdir(parents=True, exist_ok=True)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    for name in names:
        count = test_count if name == "test_batch.bin" else per_batch
        pixels, labels = _labelled_images(rng, count, (3, 32, 32))
        (directory / name).write_bytes(cifar_bytes(pixels, labels))
    return directory
