# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Dataset ingestion, augmentation and two-label pair synthesis."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from logging import INFO as INFO_LOG_LEVEL
from pathlib import Path
import struct
from typing import Iterable
from typing import NamedTuple
from typing import Sequence

import numpy as np
import torch
from torch.utils.data import Dataset

from t2caps.util.constants import DatasetSpec
from t2caps.util.constants import NUM_CLASSES
from t2caps.util.errors import ConfigurationError
from t2caps.util.errors import DataFormatError
from t2caps.util.fs_helpers import read_bytes
from t2caps.util.fs_helpers import resolve_data_file
from t2caps.util.logging import get_logger

DATAIO_LOG = get_logger(__name__)
DATAIO_LOG.setLevel(INFO_LOG_LEVEL)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CROP_PADDING = 4
FLIP_PROBABILITY = 0.5


class LabeledImage(NamedTuple):
    """One single-label sample.

    :param pixels: (c, h, w) float32 values in [0, 1]
    :param label: Class index in [0, q)
    """

    pixels: np.ndarray
    label: int


class PairSample(NamedTuple):
    """One synthesized two-label sample.

    :param pixels: (c, h, 2w) float32, left half from sample k, right half from l
    :param labels: Unordered label pair {y_k, y_l}
    :param provenance: Source indices (k, l)
    """

    pixels: np.ndarray
    labels: frozenset[int]
    provenance: tuple[int, int]


@dataclass(eq=False)
class ImageSet(Sequence[LabeledImage]):
    """A dataset split held as one contiguous array.

    :param pixels: [n, c, h, w] float32 in [0, 1]
    :param labels: [n] int64
    """

    pixels: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if len(self.pixels) != len(self.labels):
            raise DataFormatError(
                f"{len(self.pixels)} images but {len(self.labels)} labels",
            )

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, index: int) -> LabeledImage:  # type: ignore[override]
        if not -len(self) <= index < len(self):
            raise IndexError(f"Sample index {index} out of range for {len(self)}")
        return LabeledImage(self.pixels[index], int(self.labels[index]))

    def subset(self, limit: int) -> ImageSet:
        """Keep the first ``limit`` samples, or everything when limit is 0.

        :param limit: Number of samples to keep
        :return: The (possibly) reduced set
        """
        if limit <= 0 or limit >= len(self):
            return self
        return ImageSet(self.pixels[:limit], self.labels[:limit])


def _unpack_be32(data: bytes, offset: int, path: Path) -> int:
    if len(data) < offset + 4:
        raise DataFormatError(f"{path} is truncated at offset {offset}")
    value: int = struct.unpack_from(">I", data, offset)[0]
    return value


def _check_magic(data: bytes, expected: int, path: Path) -> None:
    magic = _unpack_be32(data, 0, path)
    if magic != expected:
        raise DataFormatError(
            f"{path}: bad IDX magic 0x{magic:08x} at offset 0, "
            f"expected 0x{expected:08x}",
        )


def parse_idx_images(data: bytes, path: Path) -> np.ndarray:
    """Decode an IDX3 image file.

    :param data: Raw file contents
    :param path: File name for error messages
    :raise DataFormatError: On a bad magic number or truncated payload
    :return: [n, 1, rows, cols] float32 scaled to [0, 1]
    """
    _check_magic(data, IDX_IMAGES_MAGIC, path)
    count, rows, cols = (_unpack_be32(data, offset, path) for offset in (4, 8, 12))
    expected = 16 + count * rows * cols
    if len(data) < expected:
        raise DataFormatError(
            f"{path} is truncated at offset {len(data)}, expected {expected} bytes",
        )
    pixels = np.frombuffer(data, dtype=np.uint8, count=count * rows * cols, offset=16)
    return (pixels.reshape(count, 1, rows, cols) / np.float32(255)).astype(np.float32)


def parse_idx_labels(data: bytes, path: Path) -> np.ndarray:
    """Decode an IDX1 label file.

    :param data: Raw file contents
    :param path: File name for error messages
    :raise DataFormatError: On a bad magic number or truncated payload
    :return: [n] int64 labels
    """
    _check_magic(data, IDX_LABELS_MAGIC, path)
    count = _unpack_be32(data, 4, path)
    if len(data) < 8 + count:
        raise DataFormatError(
            f"{path} is truncated at offset {len(data)}, expected {8 + count} bytes",
        )
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def load_idx(images_path: Path, labels_path: Path) -> ImageSet:
    """Load an IDX image/label file pair (MNIST, FashionMNIST).

    :param images_path: IDX3 image file, optionally gzip-compressed
    :param labels_path: IDX1 label file, optionally gzip-compressed
    :raise DataFormatError: On format errors or image/label count mismatches
    :return: The loaded split
    """
    images_path = resolve_data_file(images_path)
    labels_path = resolve_data_file(labels_path)
    pixels = parse_idx_images(read_bytes(images_path), images_path)
    labels = parse_idx_labels(read_bytes(labels_path), labels_path)
    if len(pixels) != len(labels):
        raise DataFormatError(
            f"{images_path} holds {len(pixels)} images but {labels_path} holds "
            f"{len(labels)} labels",
        )
    DATAIO_LOG.debug("Loaded %d samples from %s", len(labels), images_path)
    return ImageSet(pixels, labels)


def load_cifar10(
    batch_files: Iterable[Path],
    expected_records: int | None = None,
) -> ImageSet:
    """Load CIFAR10 binary batches (1 label byte + 3072 channel-planar pixel bytes).

    :param batch_files: Batch files to concatenate in order
    :param expected_records: Records each batch must hold, None to accept any count
    :raise DataFormatError: On wrong record counts or labels outside 0..9
    :return: The loaded split
    """
    all_pixels = []
    all_labels = []
    for path in batch_files:
        path = resolve_data_file(path)
        data = read_bytes(path)
        if len(data) % CIFAR_RECORD_BYTES:
            raise DataFormatError(
                f"{path} has {len(data)} bytes, not a multiple of {CIFAR_RECORD_BYTES}",
            )
        records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        if expected_records is not None and len(records) != expected_records:
            raise DataFormatError(
                f"{path} holds {len(records)} records, expected {expected_records}",
            )
        labels = records[:, 0].astype(np.int64)
        bad = np.flatnonzero(labels >= NUM_CLASSES)
        if bad.size:
            raise DataFormatError(
                f"{path}: label {labels[bad[0]]} at offset "
                f"{int(bad[0]) * CIFAR_RECORD_BYTES} is outside 0..{NUM_CLASSES - 1}",
            )
        all_labels.append(labels)
        all_pixels.append(
            (records[:, 1:].reshape(-1, 3, 32, 32) / np.float32(255)).astype(
                np.float32,
            ),
        )
    if not all_labels:
        raise DataFormatError("No CIFAR10 batch files given")
    return ImageSet(np.concatenate(all_pixels), np.concatenate(all_labels))


def dataset_dir(data_root: Path, spec: DatasetSpec) -> Path:
    """Directory holding one dataset's files.

    :param data_root: Root of all datasets
    :param spec: Dataset description
    :return: Dataset directory
    """
    return data_root / spec.name


def load_split(spec: DatasetSpec, data_root: Path, split: str) -> ImageSet:
    """Load the train or test split of a supported dataset.

    :param spec: Dataset description
    :param data_root: Root of all datasets
    :param split: "train" or "test"
    :raise ConfigurationError: On an unknown split name
    :return: The loaded split
    """
    if split not in ("train", "test"):
        raise ConfigurationError(f"Unknown split: {split}")
    names = spec.train_files if split == "train" else spec.test_files
    paths = [dataset_dir(data_root, spec) / name for name in names]
    if spec.file_format == "idx":
        return load_idx(paths[0], paths[1])
    return load_cifar10(paths)


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel normalization constants computed from a training split.

    :param mean: Per-channel mean
    :param std: Per-channel standard deviation
    """

    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def compute(cls, images: ImageSet) -> ChannelStats:
        """Compute constants over every pixel of a split.

        :param images: Training split
        :return: Per-channel statistics
        """
        data = images.pixels.astype(np.float64)
        mean = data.mean(axis=(0, 2, 3))
        std = data.std(axis=(0, 2, 3))
        return cls(tuple(float(m) for m in mean), tuple(float(s) for s in std))

    def to_text(self) -> str:
        """Serialize as a small key=value text file.

        :return: File contents
        """
        return (
            f"mean={','.join(repr(m) for m in self.mean)}\n"
            f"std={','.join(repr(s) for s in self.std)}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> ChannelStats:
        """Parse the output of to_text.

        :param text: File contents
        :raise DataFormatError: If either key is missing
        :return: Parsed statistics
        """
        values = dict(
            line.split("=", 1) for line in text.splitlines() if "=" in line
        )
        try:
            return cls(
                tuple(float(v) for v in values["mean"].split(",")),
                tuple(float(v) for v in values["std"].split(",")),
            )
        except (KeyError, ValueError) as ex:
            raise DataFormatError(f"Malformed stats file: {ex}") from ex

    def normalize(self, pixels: np.ndarray) -> np.ndarray:
        """Standardize channels of a (c, h, w) or [n, c, h, w] array.

        :param pixels: Values in [0, 1]
        :return: (x - mean) / std in float32
        """
        shape = (-1, 1, 1)
        mean = np.asarray(self.mean, dtype=np.float32).reshape(shape)
        std = np.asarray(self.std, dtype=np.float32).reshape(shape)
        std = np.where(std > 0, std, np.float32(1))
        return ((pixels - mean) / std).astype(np.float32)


def load_or_compute_stats(path: Path, images: ImageSet) -> ChannelStats:
    """Read cached normalization constants, computing and caching them on first use.

    :param path: Stats cache file
    :param images: Training split used when the cache is missing
    :return: Normalization constants
    """
    if path.is_file():
        return ChannelStats.from_text(path.read_text(encoding="utf-8"))
    stats = ChannelStats.compute(images)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(stats.to_text(), encoding="utf-8")
    except OSError as ex:
        DATAIO_LOG.warning("Unable to cache normalization constants: %s", ex)
    else:
        DATAIO_LOG.info("Cached normalization constants in %s", path)
    return stats


class PipelineMode(Enum):
    """Whether a pipeline may apply random augmentation."""

    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class AugmentPolicy:
    """Augmentation applied to training images.

    :param crop_padding: Zero padding for random crops, 0 disables cropping
    :param flip: Whether random horizontal flips are applied
    :param normalize: Whether per-channel standardization is applied
    """

    crop_padding: int = CROP_PADDING
    flip: bool = False
    normalize: bool = True

    @classmethod
    def for_dataset(cls, spec: DatasetSpec, enabled: bool = True) -> AugmentPolicy:
        """Default policy: crops everywhere, flips only where the dataset allows them.

        :param spec: Dataset description
        :param enabled: False keeps only normalization
        :return: Policy
        """
        if not enabled:
            return cls(crop_padding=0, flip=False)
        return cls(crop_padding=CROP_PADDING, flip=spec.flip)

    def describe(self) -> str:
        """Compact description recorded in run configs.

        :return: e.g. "crop4+flip+norm"
        """
        parts = []
        if self.crop_padding:
            parts.append(f"crop{self.crop_padding}")
        if self.flip:
            parts.append("flip")
        if self.normalize:
            parts.append("norm")
        return "+".join(parts) or "none"


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Counter-based random stream for one sample of one epoch.

    Streams depend only on (seed, epoch, index), so worker scheduling cannot change
    which augmentation a sample receives.

    :param seed: Run seed
    :param epoch: Epoch number
    :param index: Sample index
    :return: Independent generator
    """
    sequence = np.random.SeedSequence([seed, epoch, index])
    return np.random.Generator(np.random.Philox(sequence))


def hflip(pixels: np.ndarray) -> np.ndarray:
    """Mirror an image along its width axis.

    :param pixels: (c, h, w) image
    :return: Flipped copy
    """
    return np.ascontiguousarray(pixels[:, :, ::-1])


def crop_at(pixels: np.ndarray, padding: int, top: int, left: int) -> np.ndarray:
    """Zero-pad an image and cut a window of its native size.

    :param pixels: (c, h, w) image
    :param padding: Zero padding on every side
    :param top: Window row offset in the padded image, 0..2*padding
    :param left: Window column offset in the padded image, 0..2*padding
    :return: (c, h, w) crop; offset (padding, padding) returns the image unchanged
    """
    _, height, width = pixels.shape
    padded = np.pad(pixels, ((0, 0), (padding, padding), (padding, padding)))
    return np.ascontiguousarray(padded[:, top : top + height, left : left + width])


def augment(
    pixels: np.ndarray,
    rng: np.random.Generator,
    policy: AugmentPolicy,
    stats: ChannelStats,
    mode: PipelineMode = PipelineMode.TRAIN,
) -> np.ndarray:
    """Random crop, random flip and normalization of one training image.

    :param pixels: (c, h, w) image in [0, 1]
    :param rng: Per-sample generator
    :param policy: Augmentation policy
    :param stats: Normalization constants
    :param mode: Must be TRAIN, evaluation pipelines only normalize
    :raise ConfigurationError: If called from an evaluation pipeline
    :return: Augmented, normalized image
    """
    if mode is not PipelineMode.TRAIN:
        raise ConfigurationError("Random augmentation is only allowed in train mode")
    out = pixels
    if policy.crop_padding:
        top, left = rng.integers(0, 2 * policy.crop_padding + 1, size=2)
        out = crop_at(out, policy.crop_padding, int(top), int(left))
    if policy.flip and rng.random() < FLIP_PROBABILITY:
        out = hflip(out)
    return stats.normalize(out) if policy.normalize else out.astype(np.float32)


@dataclass(frozen=True)
class PairManifest:
    """Reproducible list of (k, l) test-index pairs with different labels.

    :param seed: Seed the pairs were drawn with
    :param pairs: Kept index pairs
    :param rejected: Number of draws that were dropped
    """

    seed: int
    pairs: tuple[tuple[int, int], ...]
    rejected: int

    @property
    def kept(self) -> int:
        """Number of kept pairs.

        :return: len(pairs)
        """
        return len(self.pairs)

    def dumps(self) -> str:
        """Serialize as a header plus one "k,l" line per pair.

        :return: Manifest text
        """
        lines = [
            "# t2caps pair manifest",
            f"# seed={self.seed}",
            f"# kept={self.kept}",
            f"# rejected={self.rejected}",
        ]
        lines.extend(f"{left},{right}" for left, right in self.pairs)
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> PairManifest:
        """Parse the output of dumps.

        :param text: Manifest text
        :raise DataFormatError: On malformed lines or inconsistent counts
        :return: Parsed manifest
        """
        header: dict[str, int] = {}
        pairs = []
        for number, line in enumerate(text.splitlines(), start=1):
            if line.startswith("#"):
                if "=" in line:
                    key, value = line[1:].strip().split("=", 1)
                    try:
                        header[key] = int(value)
                    except ValueError as ex:
                        raise DataFormatError(
                            f"Bad manifest header line {number}: {line!r}",
                        ) from ex
                continue
            if not line.strip():
                continue
            try:
                left, right = (int(v) for v in line.split(","))
            except ValueError as ex:
                raise DataFormatError(f"Bad manifest line {number}: {line!r}") from ex
            pairs.append((left, right))
        if "seed" not in header or header.get("kept", len(pairs)) != len(pairs):
            raise DataFormatError(
                "Manifest header is missing or disagrees with its rows",
            )
        return cls(header["seed"], tuple(pairs), header.get("rejected", 0))

    def write(self, path: Path) -> Path:
        """Write the manifest to a file.

        :param path: Destination
        :return: The path written
        """
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: Path) -> PairManifest:
        """Read a manifest file.

        :param path: Manifest file
        :raise DataFormatError: If the file is missing or malformed
        :return: Parsed manifest
        """
        try:
            return cls.loads(path.read_text(encoding="utf-8"))
        except OSError as ex:
            raise DataFormatError(f"Unable to read manifest {path}: {ex}") from ex
        except DataFormatError as ex:
            raise DataFormatError(f"Manifest {path}: {ex}") from ex


def make_pairs(labels: Sequence[int] | np.ndarray, seed: int) -> PairManifest:
    """Draw one partner per test image and keep the pairs with different labels.

    For each i, j is drawn uniformly from [0, n); (i, j) is kept iff j != i and the
    labels differ. Rejected draws are not resampled.

    :param labels: Labels of the single-label test split
    :param seed: Generator seed
    :raise ConfigurationError: With fewer than two samples
    :return: Pair manifest
    """
    labels = np.asarray(labels)
    count = len(labels)
    if count < 2:
        raise ConfigurationError(f"Need at least 2 test samples to pair, got {count}")
    rng = np.random.default_rng(seed)
    partners = rng.integers(0, count, size=count)
    indices = np.arange(count)
    keep = (partners != indices) & (labels[partners] != labels)
    pairs = tuple(
        (int(left), int(right)) for left, right in zip(indices[keep], partners[keep])
    )
    return PairManifest(seed, pairs, count - len(pairs))


def expected_kept_fraction(labels: Sequence[int] | np.ndarray) -> float:
    """Probability that a uniform partner draw carries a different label.

    :param labels: Labels of the single-label test split
    :return: 1 - sum_c p_c^2 (ignores the tiny j == i correction)
    """
    _, counts = np.unique(np.asarray(labels), return_counts=True)
    freq = counts / counts.sum()
    return float(1.0 - np.sum(freq**2))


def concat_pair(
    left: LabeledImage,
    right: LabeledImage,
    provenance: tuple[int, int] = (-1, -1),
) -> PairSample:
    """Concatenate two differently labelled images along the width axis.

    :param left: Sample placed in columns [0, w)
    :param right: Sample placed in columns [w, 2w)
    :param provenance: Source indices (k, l)
    :raise ConfigurationError: On equal labels or differing shapes
    :return: Two-label sample of shape (c, h, 2w)
    """
    if left.label == right.label:
        raise ConfigurationError(
            f"A two-label sample needs different labels, got {left.label} twice",
        )
    if left.pixels.shape != right.pixels.shape:
        raise ConfigurationError(
            f"Cannot concatenate {left.pixels.shape} with {right.pixels.shape}",
        )
    return PairSample(
        np.concatenate([left.pixels, right.pixels], axis=2),
        frozenset((left.label, right.label)),
        provenance,
    )


class TrainDataset(Dataset):  # type: ignore[type-arg]
    """Training split with per-sample, per-epoch augmentation.

    :param images: Training split
    :param policy: Augmentation policy
    :param stats: Normalization constants
    :param seed: Run seed
    """

    def __init__(
        self,
        images: ImageSet,
        policy: AugmentPolicy,
        stats: ChannelStats,
        seed: int,
    ):
        self.images = images
        self.policy = policy
        self.stats = stats
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        """Select the epoch whose random streams are used.

        :param epoch: Epoch number
        """
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, int]:
        sample = self.images[index]
        pixels = augment(
            sample.pixels,
            sample_rng(self.seed, self.epoch, index),
            self.policy,
            self.stats,
        )
        return torch.from_numpy(pixels), sample.label


class EvalDataset(Dataset):  # type: ignore[type-arg]
    """Single-label test split, normalization only.

    :param images: Test split
    :param stats: Normalization constants
    """

    mode = PipelineMode.EVAL

    def __init__(self, images: ImageSet, stats: ChannelStats):
        self.images = images
        self.stats = stats

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, int]:
        sample = self.images[index]
        return torch.from_numpy(self.stats.normalize(sample.pixels)), sample.label


class PairDataset(Dataset):  # type: ignore[type-arg]
    """Two-label test images built on the fly from a manifest, normalization only.

    :param images: Single-label test split
    :param manifest: Index pairs
    :param stats: Normalization constants
    """

    mode = PipelineMode.EVAL

    def __init__(self, images: ImageSet, manifest: PairManifest, stats: ChannelStats):
        self.images = images
        self.manifest = manifest
        self.stats = stats

    def __len__(self) -> int:
        return self.manifest.kept

    def pair(self, row: int) -> PairSample:
        """Materialize one manifest row without normalization.

        :param row: Manifest row
        :return: Two-label sample
        """
        left, right = self.manifest.pairs[row]
        return concat_pair(self.images[left], self.images[right], (left, right))

    def __getitem__(self, row: int) -> tuple[torch.Tensor, torch.Tensor]:
        left, right = self.manifest.pairs[row]
        sample = self.pair(row)
        labels = torch.tensor([self.images[left].label, self.images[right].label])
        return torch.from_numpy(self.stats.normalize(sample.pixels)), labels
