# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Constants describing datasets, default locations and exit codes."""

from __future__ import annotations

from dataclasses import dataclass
import multiprocessing
import os
from pathlib import Path

from typing_extensions import Final

if multiprocessing.cpu_count() > 2:
    LOADER_JOBS = min(multiprocessing.cpu_count() - 1, 4)
else:
    LOADER_JOBS = 0  # Other single/dual core computers load in-process

DATA_ROOT_ENV_VAR: Final = "T2CAPS_DATA_ROOT"
OUTPUT_ROOT_ENV_VAR: Final = "T2CAPS_OUTPUT_ROOT"
DEFAULT_DATA_ROOT: Final = Path(
    os.getenv(DATA_ROOT_ENV_VAR, str(Path.home() / "t2caps-data")),
).expanduser()
DEFAULT_OUTPUT_ROOT: Final = Path(
    os.getenv(OUTPUT_ROOT_ENV_VAR, str(Path.home() / "t2caps-runs")),
).expanduser()

EXIT_OK: Final = 0
EXIT_USAGE: Final = 1
EXIT_DATA_ERROR: Final = 2
EXIT_NUMERIC_FAILURE: Final = 3

NUM_CLASSES: Final = 10
FEATURE_CHANNELS: Final = 64
LOW_CAPSULE_DIM: Final = 32
HIGH_CAPSULE_DIM: Final = 8
POOLED_SIZE: Final = 4
CNN_HIDDEN_FEATURES: Final = 256

# Benchmark defaults shared by every head
DEFAULT_EPOCHS: Final = 100
DEFAULT_BATCH_SIZE: Final = 64
DEFAULT_ROUTING_ITERATIONS: Final = 3
DEFAULT_LEARNING_RATE: Final = 1e-3

CHECKSUM_FILE_NAME: Final = "SHA256SUMS"
STATS_FILE_NAME: Final = "stats.txt"
RUN_CONFIG_FILE_NAME: Final = "run.cfg"
METRICS_FILE_NAME: Final = "metrics.csv"
PAIRS_FILE_NAME: Final = "pairs.txt"
BEST_CHECKPOINT_NAME: Final = "best.t2ck"
FINAL_CHECKPOINT_NAME: Final = "final.t2ck"
VISUALIZE_MANIFEST_NAME: Final = "manifest.csv"

TCA_RULE: Final = "both top-2 probabilities >= 0.5"


@dataclass(frozen=True)
class DatasetSpec:
    """Shape and file layout of one supported dataset.

    :param name: Dataset name used on the command line
    :param channels: Image channel count
    :param height: Image height
    :param width: Image width
    :param train_files: Files holding the training split, relative to the dataset dir
    :param test_files: Files holding the test split, relative to the dataset dir
    :param file_format: Either "idx" or "cifar"
    :param flip: Whether horizontal flips are part of the augmentation policy
    :param train_count: Expected number of training samples
    :param test_count: Expected number of single-label test samples
    """

    name: str
    channels: int
    height: int
    width: int
    train_files: tuple[str, ...]
    test_files: tuple[str, ...]
    file_format: str
    flip: bool
    train_count: int
    test_count: int


_IDX_TRAIN = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
_IDX_TEST = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")

DATASETS: Final = {
    "mnist": DatasetSpec(
        name="mnist",
        channels=1,
        height=28,
        width=28,
        train_files=_IDX_TRAIN,
        test_files=_IDX_TEST,
        file_format="idx",
        flip=False,
        train_count=60000,
        test_count=10000,
    ),
    "fashionmnist": DatasetSpec(
        name="fashionmnist",
        channels=1,
        height=28,
        width=28,
        train_files=_IDX_TRAIN,
        test_files=_IDX_TEST,
        file_format="idx",
        flip=False,
        train_count=60000,
        test_count=10000,
    ),
    "cifar10": DatasetSpec(
        name="cifar10",
        channels=3,
        height=32,
        width=32,
        train_files=tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
        test_files=("test_batch.bin",),
        file_format="cifar",
        flip=True,
        train_count=50000,
        test_count=10000,
    ),
}

HEAD_KINDS: Final = ("ps", "fc", "cnn")
CAPSULE_HEADS: Final = ("ps", "fc")
