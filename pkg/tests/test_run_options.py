# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Test the run_options.py file."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import pytest

from t2caps import run_options
from t2caps.util.constants import EXIT_USAGE
from t2caps.util.errors import ConfigurationError


def test_defaults() -> None:
    """Test the benchmark defaults of a bare train command."""
    opts = run_options.parse_run_opts(["train"])
    config = opts.config
    assert opts.command == "train"
    assert (config.epochs, config.batch_size, config.iterations) == (100, 64, 3)
    assert config.learning_rate == pytest.approx(1e-3)
    assert config.augment
    assert config.augment_policy.describe() == "crop4+norm"
    assert not opts.head_given


def test_config_file_precedence(tmp_path: Path) -> None:
    """Test that a config file overrides defaults and explicit flags override both.

    :param tmp_path: Fixture from pytest for creating a temporary directory
    """
    config_file = tmp_path / "run.cfg"
    config_file.write_text(
        "# reduced run\ndataset=cifar10\nepochs=7\naugment=false\nseed=4\n",
        encoding="utf-8",
    )
    opts = run_options.parse_run_opts(
        ["train", "--config", str(config_file), "--seed", "9", "--cpu"],
    )
    config = opts.config
    assert config.dataset == "cifar10"
    assert config.epochs == 7
    assert not config.augment
    assert config.seed == 9
    assert not config.use_gpu
    assert config.batch_size == 64


def test_config_text_round_trip(tmp_path: Path) -> None:
    """Test that written run configs are read back unchanged.

    :param tmp_path: Fixture from pytest for creating a temporary directory
    """
    config = replace(
        run_options.RunConfig(),
        head="fc",
        learning_rate=5e-4,
        use_gpu=False,
        output_root=tmp_path,
    )
    path = config.write(tmp_path / "run.cfg")
    assert run_options.RunConfig.read(path) == config
    assert "use_gpu=false" in path.read_text(encoding="utf-8")


@pytest.mark.parametrize(
    "text",
    ["epochs=ten\n", "colour=blue\n", "no equals sign\n", "augment=maybe\n"],
)
def test_bad_config_text(text: str) -> None:
    """Test that malformed config files are configuration errors.

    :param text: Config file contents
    """
    with pytest.raises(ConfigurationError):
        run_options.RunConfig.from_text(text)


def test_missing_config_file(tmp_path: Path) -> None:
    """Test that an unreadable config file is a configuration error.

    :param tmp_path: Fixture from pytest for creating a temporary directory
    """
    with pytest.raises(ConfigurationError):
        run_options.parse_run_opts(["train", "--config", str(tmp_path / "none.cfg")])


@pytest.mark.parametrize(
    "changes",
    [
        {"epochs": 0},
        {"batch_size": 0},
        {"iterations": -1},
        {"seed": -3},
        {"learning_rate": 0.0},
        {"test_limit": 1},
        {"train_limit": -1},
        {"workers": -1},
        {"dataset": "svhn"},
        {"head": "dense"},
    ],
)
def test_are_args_valid(changes: dict[str, object]) -> None:
    """Test that every out-of-range value is reported with a reason.

    :param changes: Fields to change from the defaults
    """
    valid, reason = run_options.are_args_valid(
        replace(run_options.RunConfig(), **changes),  # type: ignore[arg-type]
    )
    assert not valid
    assert reason
    assert run_options.are_args_valid(run_options.RunConfig()) == (True, "")


def test_invalid_flags_raise() -> None:
    """Test that invalid values given as flags fail option parsing."""
    with pytest.raises(ConfigurationError, match="epoch"):
        run_options.parse_run_opts(["train", "--epochs", "0"])


def test_usage_errors_exit_with_one(capsys: pytest.CaptureFixture[str]) -> None:
    """Test that argparse usage errors exit with the usage exit code.

    :param capsys: Fixture from pytest for capturing output
    """
    with pytest.raises(SystemExit) as exc:
        run_options.parse_run_opts(["train", "--head", "dense"])
    assert exc.value.code == EXIT_USAGE
    assert "invalid choice" in capsys.readouterr().err

    with pytest.raises(SystemExit) as exc:
        run_options.parse_run_opts(["visualize", "-c", "x.t2ck"])
    assert exc.value.code == EXIT_USAGE


def test_subcommand_options() -> None:
    """Test sub-command specific options and the head_given flag."""
    opts = run_options.parse_run_opts(
        ["visualize", "-c", "best.t2ck", "--rows", "0", "3", "--alpha", "0.3"],
    )
    assert opts.rows == [0, 3]
    assert opts.indices is None
    assert opts.alpha == pytest.approx(0.3)
    assert opts.checkpoint == Path("best.t2ck")

    params = run_options.parse_run_opts(["params", "--head", "fc", "-d", "cifar10"])
    assert params.head_given
    assert params.config.head == "fc"
    assert params.config.dataset_spec.channels == 3

    fetch = run_options.parse_run_opts(["fetch-check", "-d", "mnist", "-d", "cifar10"])
    assert fetch.datasets == ["mnist", "cifar10"]


def test_compute_run_name() -> None:
    """Test the run directory names of full and reduced runs."""
    config = run_options.RunConfig()
    assert run_options.compute_run_name(config) == "ps-mnist-e100-b64-r3-s0"
    reduced = replace(config, head="cnn", epochs=2, train_limit=500, test_limit=100)
    assert run_options.compute_run_name(reduced) == "cnn-mnist-e2-b64-r3-s0-tl500-vl100"
