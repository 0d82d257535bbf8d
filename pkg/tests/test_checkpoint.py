# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Test the checkpoint.py file."""

from __future__ import annotations

from pathlib import Path

import pytest
import torch

from t2caps import archnet
from t2caps import checkpoint
from t2caps.util.errors import CheckpointError


def test_save_and_load(tmp_path: Path) -> None:
    """Test that a stored model reproduces its outputs and its metadata.

    :param tmp_path: Fixture from pytest for creating a temporary directory
    """
    torch.manual_seed(0)
    model = archnet.build_model(1, "fc", iterations=2)
    # One training-mode pass moves the BN running statistics off their defaults
    model.train()(torch.rand(4, 1, 28, 28))
    model.eval()
    path = checkpoint.save_checkpoint(
        tmp_path / "best.t2ck",
        model,
        {"dataset": "mnist", "epoch": 3, "channel_mean": [0.13]},
    )

    loaded, header = checkpoint.load_checkpoint(path, "fc", 1)
    assert header["dataset"] == "mnist"
    assert header["epoch"] == 3
    assert header["iterations"] == 2
    assert header["total"] == 353456
    assert loaded.iterations == 2
    assert not loaded.training

    images = torch.rand(3, 1, 28, 28)
    with torch.no_grad():
        expected = model(images).probabilities
        actual = loaded(images).probabilities
    assert torch.equal(expected, actual)
    for name, tensor in model.state_dict().items():
        assert torch.equal(tensor, loaded.state_dict()[name])


def test_census_mismatch(tmp_path: Path) -> None:
    """Test that a checkpoint is refused for another head or channel count.

    :param tmp_path: Fixture from pytest for creating a temporary directory
    """
    path = checkpoint.save_checkpoint(
        tmp_path / "cnn.t2ck",
        archnet.build_model(1, "cnn"),
        {},
    )
    with pytest.raises(CheckpointError, match="Census mismatch"):
        checkpoint.load_checkpoint(path, expected_head="ps")
    with pytest.raises(CheckpointError, match="Census mismatch"):
        checkpoint.load_checkpoint(path, expected_in_channels=3)
    model, _ = checkpoint.load_checkpoint(path)
    assert model.head_kind == "cnn"


def test_corrupt_files(tmp_path: Path) -> None:
    """Test bad magic, truncation and missing files.

    :param tmp_path: Fixture from pytest for creating a temporary directory
    """
    path = checkpoint.save_checkpoint(
        tmp_path / "ps.t2ck",
        archnet.build_model(3, "ps"),
        {},
    )
    data = path.read_bytes()

    bad_magic = tmp_path / "bad-magic.t2ck"
    bad_magic.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="bad magic"):
        checkpoint.read_header(bad_magic)

    truncated = tmp_path / "truncated.t2ck"
    truncated.write_bytes(data[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint.load_checkpoint(truncated)

    with pytest.raises(CheckpointError):
        checkpoint.load_checkpoint(tmp_path / "missing.t2ck")
