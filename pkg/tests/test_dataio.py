# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Test the dataio.py file."""

from __future__ import annotations

import gzip
from pathlib import Path

import numpy as np
import pytest

from t2caps import dataio
from t2caps.util.constants import DATASETS
from t2caps.util.errors import ConfigurationError
from t2caps.util.errors import DataFormatError

from .util.synthetic import cifar_bytes
from .util.synthetic import idx_images_bytes
from .util.synthetic import idx_labels_bytes
from .util.synthetic import write_cifar_dataset
from .util.synthetic import write_idx_dataset


def _stats(channels: int = 1) -> dataio.ChannelStats:
    return dataio.ChannelStats((0.5,) * channels, (0.25,) * channels)


def test_load_idx(tmpdir: Path) -> None:
    """Test IDX decoding, scaling to [0, 1] and gzip support.

    :param tmpdir: Fixture from pytest for creating a temporary directory
    """
    images = np.array([[[0, 255], [51, 102]], [[255, 0], [0, 0]]], dtype=np.uint8)
    labels = np.array([7, 3], dtype=np.uint8)
    images_path = Path(tmpdir) / "images"
    images_path.write_bytes(idx_images_bytes(images))
    with gzip.open(Path(tmpdir) / "labels.gz", "wb") as f:
        f.write(idx_labels_bytes(labels))

    loaded = dataio.load_idx(images_path, Path(tmpdir) / "labels")
    assert loaded.pixels.shape == (2, 1, 2, 2)
    assert loaded.pixels.dtype == np.float32
    assert loaded.pixels[0, 0].tolist() == pytest.approx([[0.0, 1.0], [0.2, 0.4]])
    assert loaded.labels.tolist() == [7, 3]
    assert loaded[1].label == 3


def test_load_idx_errors(tmpdir: Path) -> None:
    """Test that bad magic numbers, truncation and missing files name the path.

    :param tmpdir: Fixture from pytest for creating a temporary directory
    """
    good = idx_images_bytes(np.zeros((2, 3, 3), dtype=np.uint8))
    labels_path = Path(tmpdir) / "labels"
    labels_path.write_bytes(idx_labels_bytes(np.array([1, 2])))

    bad_magic = Path(tmpdir) / "bad-magic"
    bad_magic.write_bytes(labels_path.read_bytes())
    with pytest.raises(DataFormatError, match="offset 0"):
        dataio.load_idx(bad_magic, labels_path)

    truncated = Path(tmpdir) / "truncated"
    truncated.write_bytes(good[:-1])
    with pytest.raises(DataFormatError, match="truncated"):
        dataio.load_idx(truncated, labels_path)

    with pytest.raises(DataFormatError, match="missing-file"):
        dataio.load_idx(Path(tmpdir) / "missing-file", labels_path)

    short_labels = Path(tmpdir) / "short-labels"
    short_labels.write_bytes(idx_labels_bytes(np.array([1])))
    good_path = Path(tmpdir) / "good"
    good_path.write_bytes(good)
    with pytest.raises(DataFormatError, match="labels"):
        dataio.load_idx(good_path, short_labels)


def test_load_cifar10(tmpdir: Path) -> None:
    """Test CIFAR10 record decoding and the label range check.

    :param tmpdir: Fixture from pytest for creating a temporary directory
    """
    pixels = np.zeros((2, 3, 32, 32), dtype=np.uint8)
    pixels[1, 2] = 255  # Blue plane of the second record
    batch = Path(tmpdir) / "batch.bin"
    batch.write_bytes(cifar_bytes(pixels, np.array([4, 9])))

    loaded = dataio.load_cifar10([batch, batch])
    assert loaded.pixels.shape == (4, 3, 32, 32)
    assert loaded.labels.tolist() == [4, 9, 4, 9]
    assert float(loaded.pixels[1, 2].min()) == 1.0
    assert float(loaded.pixels[1, :2].max()) == 0.0

    with pytest.raises(DataFormatError, match="expected 3"):
        dataio.load_cifar10([batch], expected_records=3)

    bad = Path(tmpdir) / "bad.bin"
    bad.write_bytes(cifar_bytes(pixels, np.array([4, 10])))
    with pytest.raises(DataFormatError, match="offset 3073"):
        dataio.load_cifar10([bad])

    partial = Path(tmpdir) / "partial.bin"
    partial.write_bytes(batch.read_bytes()[:-5])
    with pytest.raises(DataFormatError, match="multiple"):
        dataio.load_cifar10([partial])


def test_load_split(tmpdir: Path) -> None:
    """Test loading synthetic IDX and CIFAR10 splits through the dataset table.

    :param tmpdir: Fixture from pytest for creating a temporary directory
    """
    root = Path(tmpdir)
    write_idx_dataset(root, "fashionmnist", train_count=30, test_count=10)
    write_cifar_dataset(root, per_batch=4, test_count=6)

    fashion = dataio.load_split(DATASETS["fashionmnist"], root, "train")
    assert fashion.pixels.shape == (30, 1, 28, 28)
    cifar = dataio.load_split(DATASETS["cifar10"], root, "train")
    assert cifar.pixels.shape == (20, 3, 32, 32)
    assert len(dataio.load_split(DATASETS["cifar10"], root, "test")) == 6
    assert len(cifar.subset(5)) == 5
    assert cifar.subset(0) is cifar
    with pytest.raises(ConfigurationError):
        dataio.load_split(DATASETS["cifar10"], root, "validation")


def test_channel_stats(tmpdir: Path) -> None:
    """Test statistics computation, caching and standardization.

    :param tmpdir: Fixture from pytest for creating a temporary directory
    """
    pixels = np.stack(
        [
            np.full((1, 2, 2), 0.2, dtype=np.float32),
            np.full((1, 2, 2), 0.6, dtype=np.float32),
        ],
    )
    images = dataio.ImageSet(pixels, np.array([0, 1]))
    stats = dataio.ChannelStats.compute(images)
    assert stats.mean == pytest.approx((0.4,))
    assert stats.std == pytest.approx((0.2,))
    assert dataio.ChannelStats.from_text(stats.to_text()) == stats

    cache = Path(tmpdir) / "stats.txt"
    assert dataio.load_or_compute_stats(cache, images) == stats
    assert cache.is_file()
    other = dataio.ImageSet(np.zeros((1, 1, 2, 2), np.float32), np.array([0]))
    # Sets compare by identity, never element-wise
    assert images != other
    assert images != dataio.ImageSet(pixels, np.array([0, 1]))
    assert dataio.load_or_compute_stats(cache, other) == stats

    constant = np.full((1, 3, 3), 0.7, dtype=np.float32)
    normalized = _stats().normalize(constant)
    assert normalized == pytest.approx(np.full((1, 3, 3), 0.8))

    with pytest.raises(DataFormatError):
        dataio.ChannelStats.from_text("mean=0.1\n")


def test_crop_and_flip_primitives() -> None:
    """Test the centered crop identity, zero padding and flip involution."""
    image = np.random.default_rng(0).random((3, 8, 8)).astype(np.float32)
    assert np.array_equal(dataio.crop_at(image, 4, 4, 4), image)
    shifted = dataio.crop_at(image, 4, 0, 0)
    assert float(np.abs(shifted[:, :4, :]).max()) == 0.0
    assert np.array_equal(shifted[:, 4:, 4:], image[:, :4, :4])
    assert np.array_equal(dataio.hflip(dataio.hflip(image)), image)
    assert np.array_equal(dataio.hflip(image)[:, :, 0], image[:, :, -1])


def test_augment_is_reproducible() -> None:
    """Test that augmentation depends only on (seed, epoch, index)."""
    image = np.random.default_rng(1).random((3, 32, 32)).astype(np.float32)
    policy = dataio.AugmentPolicy.for_dataset(DATASETS["cifar10"])
    assert policy.flip
    assert policy.describe() == "crop4+flip+norm"

    first = dataio.augment(image, dataio.sample_rng(0, 1, 5), policy, _stats(3))
    second = dataio.augment(image, dataio.sample_rng(0, 1, 5), policy, _stats(3))
    assert np.array_equal(first, second)
    others = [
        dataio.augment(image, dataio.sample_rng(0, epoch, 5), policy, _stats(3))
        for epoch in range(2, 12)
    ]
    assert any(not np.array_equal(first, other) for other in others)


def test_augment_policies() -> None:
    """Test the grayscale policy, the disabled policy and the eval-mode guard."""
    grayscale = dataio.AugmentPolicy.for_dataset(DATASETS["mnist"])
    assert not grayscale.flip
    assert grayscale.crop_padding == 4
    disabled = dataio.AugmentPolicy.for_dataset(DATASETS["cifar10"], enabled=False)
    assert disabled.describe() == "norm"

    image = np.full((1, 28, 28), 0.5, dtype=np.float32)
    out = dataio.augment(image, dataio.sample_rng(0, 0, 0), disabled, _stats())
    assert np.array_equal(out, np.zeros_like(image))
    with pytest.raises(ConfigurationError):
        dataio.augment(
            image,
            dataio.sample_rng(0, 0, 0),
            grayscale,
            _stats(),
            dataio.PipelineMode.EVAL,
        )


def test_make_pairs() -> None:
    """Test the pair procedure: determinism, different labels, no self pairs and
    counts adding up."""
    labels = np.arange(1000) % 10
    manifest = dataio.make_pairs(labels, seed=0)
    again = dataio.make_pairs(labels, seed=0)
    assert manifest == again
    assert manifest.kept + manifest.rejected == 1000
    assert all(left != right for left, right in manifest.pairs)
    assert all(labels[left] != labels[right] for left, right in manifest.pairs)
    # About 90% of uniform draws carry a different label; 3 sigma is about 28
    assert abs(manifest.kept - 900) < 40
    assert dataio.expected_kept_fraction(labels) == pytest.approx(0.9)
    assert dataio.make_pairs(labels, seed=1) != manifest

    with pytest.raises(ConfigurationError):
        dataio.make_pairs([3], seed=0)


def test_kept_fraction_on_skewed_labels() -> None:
    """Test the kept count against 1 - sum p_c^2 on a non-uniform label mix."""
    rng = np.random.default_rng(11)
    weights = np.array([0.4, 0.2, 0.1, 0.1, 0.05, 0.05, 0.04, 0.03, 0.02, 0.01])
    labels = rng.choice(10, size=10_000, p=weights)
    fraction = dataio.expected_kept_fraction(labels)
    assert fraction == pytest.approx(1 - float(np.sum(weights**2)), abs=0.01)

    for seed in range(3):
        manifest = dataio.make_pairs(labels, seed)
        expected_kept = fraction * len(labels)
        expected_rejected = len(labels) - expected_kept
        chi_square = (manifest.kept - expected_kept) ** 2 / expected_kept + (
            manifest.rejected - expected_rejected
        ) ** 2 / expected_rejected
        # 99.9% quantile of chi-square with one degree of freedom
        assert chi_square < 10.83


def test_pair_manifest_text(tmpdir: Path) -> None:
    """Test manifest serialization and its consistency checks.

    :param tmpdir: Fixture from pytest for creating a temporary directory
    """
    manifest = dataio.PairManifest(7, ((0, 3), (2, 1)), 1)
    path = manifest.write(Path(tmpdir) / "pairs.txt")
    assert dataio.PairManifest.read(path) == manifest
    assert path.read_text(encoding="utf-8").splitlines()[-2:] == ["0,3", "2,1"]

    empty = dataio.PairManifest(0, (), 0)
    assert dataio.PairManifest.loads(empty.dumps()) == empty

    with pytest.raises(DataFormatError):
        dataio.PairManifest.loads("# seed=1\n# kept=3\n0,1\n")
    with pytest.raises(DataFormatError):
        dataio.PairManifest.loads("# seed=1\n0;1\n")
    with pytest.raises(DataFormatError, match="header line 1"):
        dataio.PairManifest.loads("# seed=abc\n0,1\n")
    bad_header = Path(tmpdir) / "bad-header.txt"
    bad_header.write_text("# seed=1\n# kept=x\n", encoding="utf-8")
    with pytest.raises(DataFormatError, match="bad-header.txt"):
        dataio.PairManifest.read(bad_header)
    with pytest.raises(DataFormatError):
        dataio.PairManifest.read(Path(tmpdir) / "missing.txt")


def test_concat_pair() -> None:
    """Test width-wise concatenation and its contract checks."""
    left = dataio.LabeledImage(np.zeros((1, 28, 28), np.float32), 3)
    right = dataio.LabeledImage(np.ones((1, 28, 28), np.float32), 5)
    pair = dataio.concat_pair(left, right, (10, 20))
    assert pair.pixels.shape == (1, 28, 56)
    assert float(pair.pixels[:, :, :28].max()) == 0.0
    assert float(pair.pixels[:, :, 28:].min()) == 1.0
    assert pair.labels == frozenset((3, 5))
    assert pair.provenance == (10, 20)

    with pytest.raises(ConfigurationError):
        dataio.concat_pair(left, dataio.LabeledImage(right.pixels, 3))
    with pytest.raises(ConfigurationError):
        dataio.concat_pair(left, dataio.LabeledImage(np.ones((1, 28, 30)), 5))


def test_datasets(tmpdir: Path) -> None:
    """Test the train, eval and pair datasets built on a synthetic split.

    :param tmpdir: Fixture from pytest for creating a temporary directory
    """
    write_idx_dataset(Path(tmpdir), train_count=20, test_count=20)
    images = dataio.load_split(DATASETS["mnist"], Path(tmpdir), "test")
    policy = dataio.AugmentPolicy.for_dataset(DATASETS["mnist"])

    train = dataio.TrainDataset(images, policy, _stats(), seed=3)
    train.set_epoch(2)
    tensor, label = train[4]
    assert tuple(tensor.shape) == (1, 28, 28)
    assert label == images[4].label
    assert np.array_equal(tensor.numpy(), train[4][0].numpy())

    evaluation = dataio.EvalDataset(images, _stats())
    assert np.allclose(evaluation[0][0].numpy(), (images[0].pixels - 0.5) / 0.25)

    manifest = dataio.make_pairs(images.labels, seed=0)
    pairs = dataio.PairDataset(images, manifest, _stats())
    assert len(pairs) == manifest.kept
    pixels, labels = pairs[0]
    assert tuple(pixels.shape) == (1, 28, 56)
    left, right = manifest.pairs[0]
    assert labels.tolist() == [images[left].label, images[right].label]
