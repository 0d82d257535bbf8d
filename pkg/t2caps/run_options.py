# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Allows setting of run configuration parameters."""

from __future__ import annotations

import argparse
from dataclasses import dataclass
from dataclasses import fields
from dataclasses import replace
from pathlib import Path
import sys
from typing import Any
from typing import Callable
from typing import NoReturn
from typing import Sequence

from t2caps.dataio import AugmentPolicy
from t2caps.util.constants import DATASETS
from t2caps.util.constants import DEFAULT_BATCH_SIZE
from t2caps.util.constants import DEFAULT_DATA_ROOT
from t2caps.util.constants import DEFAULT_EPOCHS
from t2caps.util.constants import DEFAULT_LEARNING_RATE
from t2caps.util.constants import DEFAULT_OUTPUT_ROOT
from t2caps.util.constants import DEFAULT_ROUTING_ITERATIONS
from t2caps.util.constants import EXIT_USAGE
from t2caps.util.constants import HEAD_KINDS
from t2caps.util.constants import LOADER_JOBS
from t2caps.util.constants import DatasetSpec
from t2caps.util.errors import ConfigurationError

COMMANDS = ("fetch-check", "train", "eval", "pairs", "visualize", "params")


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"Not a boolean: {value!r}")


@dataclass(frozen=True)
class RunConfig:  # pylint: disable=too-many-instance-attributes
    """Everything that determines the outcome of a run.

    :param dataset: One of the DATASETS keys
    :param head: One of "ps", "fc", "cnn"
    :param epochs: Training epochs
    :param batch_size: Samples per optimizer step
    :param iterations: Routing iterations of capsule heads
    :param seed: Seed for initialization, shuffling, augmentation and pairing
    :param learning_rate: ADAM learning rate
    :param augment: Whether crop/flip augmentation is applied during training
    :param eval_every: Also evaluate every N optimizer steps, 0 for epoch cadence only
    :param train_limit: Train on the first N samples only, 0 for all
    :param test_limit: Evaluate on the first N test samples only, 0 for all
    :param data_root: Directory holding the dataset directories
    :param output_root: Directory receiving run directories
    :param use_gpu: Whether a CUDA device is used when available
    :param workers: Data loader worker processes
    """

    dataset: str = "mnist"
    head: str = "ps"
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    iterations: int = DEFAULT_ROUTING_ITERATIONS
    seed: int = 0
    learning_rate: float = DEFAULT_LEARNING_RATE
    augment: bool = True
    eval_every: int = 0
    train_limit: int = 0
    test_limit: int = 0
    data_root: Path = DEFAULT_DATA_ROOT
    output_root: Path = DEFAULT_OUTPUT_ROOT
    use_gpu: bool = True
    workers: int = LOADER_JOBS

    @property
    def dataset_spec(self) -> DatasetSpec:
        """Description of the selected dataset.

        :raise ConfigurationError: On an unknown dataset name
        :return: Dataset description
        """
        try:
            return DATASETS[self.dataset]
        except KeyError as ex:
            raise ConfigurationError(f"Unknown dataset: {self.dataset}") from ex

    @property
    def augment_policy(self) -> AugmentPolicy:
        """Augmentation policy derived from the dataset and the augment switch.

        :return: Policy
        """
        return AugmentPolicy.for_dataset(self.dataset_spec, self.augment)

    def to_text(self) -> str:
        """Serialize as one key=value line per field.

        :return: Config file contents
        """
        lines = []
        for field in fields(self):
            value = getattr(self, field.name)
            if isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{field.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: RunConfig | None = None) -> RunConfig:
        """Parse a key=value config file on top of a base config.

        :param text: Config file contents, "#" starts a comment line
        :param base: Values for keys the file leaves out, defaults when None
        :raise ConfigurationError: On unknown keys or unparsable values
        :return: Parsed config
        """
        base = base or cls()
        converters = _converters()
        updates: dict[str, Any] = {}
        for number, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in converters:
                raise ConfigurationError(f"Bad config line {number}: {line!r}")
            try:
                updates[key] = converters[key](value.strip())
            except ValueError as ex:
                raise ConfigurationError(
                    f"Bad value for {key} on line {number}: {value!r}",
                ) from ex
        return replace(base, **updates)

    def write(self, path: Path) -> Path:
        """Store the config next to the artifacts it produced.

        :param path: Destination file
        :return: The path written
        """
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: Path) -> RunConfig:
        """Read a config file.

        :param path: Config file
        :raise ConfigurationError: If the file cannot be read or parsed
        :return: Parsed config
        """
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as ex:
            raise ConfigurationError(f"Unable to read config {path}: {ex}") from ex
        return cls.from_text(text)


def _converters() -> dict[str, Callable[[str], Any]]:
    defaults = RunConfig()
    converters: dict[str, Callable[[str], Any]] = {}
    for field in fields(RunConfig):
        default = getattr(defaults, field.name)
        if isinstance(default, bool):
            converters[field.name] = _parse_bool
        elif isinstance(default, Path):
            converters[field.name] = lambda value: Path(value).expanduser()
        else:
            converters[field.name] = type(default)
    return converters


CONFIG_KEYS = frozenset(field.name for field in fields(RunConfig))


class RunArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors with exit code 1."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common_opts(parser: argparse.ArgumentParser) -> None:
    # Options mapped onto RunConfig fields default to SUPPRESS, so only flags given on
    # the command line override the config file.
    parser.add_argument(
        "--data-root",
        dest="data_root",
        type=Path,
        default=argparse.SUPPRESS,
        help=f'Directory holding the datasets. Defaults to "{DEFAULT_DATA_ROOT}".',
    )
    parser.add_argument(
        "-v",
        "--verbose",
        action="store_true",
        default=False,
        help="Show debug messages.",
    )


def _add_dataset_opt(parser: argparse.ArgumentParser, required: bool = False) -> None:
    parser.add_argument(
        "-d",
        "--dataset",
        choices=sorted(DATASETS),
        default=argparse.SUPPRESS,
        required=required,
        help='Dataset to use. Defaults to "mnist".',
    )


def _add_head_opt(parser: argparse.ArgumentParser, helptext: str) -> None:
    parser.add_argument(
        "--head",
        choices=HEAD_KINDS,
        default=argparse.SUPPRESS,
        help=helptext,
    )


def _add_int_opt(
    parser: argparse.ArgumentParser,
    name: str,
    dest: str,
    helptext: str,
) -> None:
    parser.add_argument(
        name,
        dest=dest,
        type=int,
        default=argparse.SUPPRESS,
        help=helptext,
    )


def _add_seed_and_limits(parser: argparse.ArgumentParser) -> None:
    _add_int_opt(parser, "--seed", "seed", 'Random seed. Defaults to "0".')
    _add_int_opt(
        parser,
        "--test-limit",
        "test_limit",
        "Use only the first N single-label test samples, 0 for all.",
    )


def _add_checkpoint_opts(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "-c",
        "--checkpoint",
        type=Path,
        required=True,
        help="Checkpoint file written by the train command.",
    )
    parser.add_argument(
        "-m",
        "--manifest",
        type=Path,
        help="Pair manifest to use. Defaults to pairs drawn with --seed.",
    )


def add_parser_opts() -> argparse.ArgumentParser:
    """Add parser options.

    :return: Parser with one sub-command per operation
    """
    parser = RunArgumentParser(
        prog="t2caps",
        description="Top-2 classification benchmark for CNNs and capsule networks.",
    )
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    subparsers.required = True

    fetch = subparsers.add_parser(
        "fetch-check",
        help="Verify dataset files below the data root. Never downloads.",
    )
    _add_common_opts(fetch)
    fetch.add_argument(
        "-d",
        "--dataset",
        choices=sorted(DATASETS),
        action="append",
        dest="datasets",
        help="Dataset to check, may be repeated. Defaults to all of them.",
    )

    train = subparsers.add_parser("train", help="Train one model.")
    _add_common_opts(train)
    train.add_argument(
        "--config",
        dest="config_file",
        type=Path,
        help="Flat key=value config file, overridden by explicit flags.",
    )
    _add_dataset_opt(train)
    _add_head_opt(train, 'Classifier head. Defaults to "ps".')
    _add_int_opt(
        train,
        "--epochs",
        "epochs",
        f'Training epochs. Defaults to "{DEFAULT_EPOCHS}".',
    )
    _add_int_opt(
        train,
        "--batch-size",
        "batch_size",
        f'Batch size. Defaults to "{DEFAULT_BATCH_SIZE}".',
    )
    _add_int_opt(
        train,
        "--iterations",
        "iterations",
        f'Routing iterations. Defaults to "{DEFAULT_ROUTING_ITERATIONS}".',
    )
    _add_seed_and_limits(train)
    train.add_argument(
        "--lr",
        dest="learning_rate",
        type=float,
        default=argparse.SUPPRESS,
        help=f'ADAM learning rate. Defaults to "{DEFAULT_LEARNING_RATE}".',
    )
    train.add_argument(
        "--no-augment",
        dest="augment",
        action="store_false",
        default=argparse.SUPPRESS,
        help="Disable random crops and flips.",
    )
    _add_int_opt(
        train,
        "--eval-every",
        "eval_every",
        "Also evaluate every N optimizer steps. Defaults to epoch cadence only.",
    )
    _add_int_opt(
        train,
        "--train-limit",
        "train_limit",
        "Train on the first N samples only, 0 for all.",
    )
    train.add_argument(
        "--output-root",
        dest="output_root",
        type=Path,
        default=argparse.SUPPRESS,
        help="Directory receiving run directories. "
        f'Defaults to "{DEFAULT_OUTPUT_ROOT}".',
    )
    train.add_argument(
        "--cpu",
        dest="use_gpu",
        action="store_false",
        default=argparse.SUPPRESS,
        help="Never use a GPU.",
    )
    _add_int_opt(
        train,
        "--workers",
        "workers",
        f'Data loader worker processes. Defaults to "{LOADER_JOBS}".',
    )

    evaluate = subparsers.add_parser("eval", help="Report SA, TA and TCA.")
    _add_common_opts(evaluate)
    _add_checkpoint_opts(evaluate)
    _add_dataset_opt(evaluate)
    _add_head_opt(evaluate, "Refuse checkpoints holding a different head.")
    _add_seed_and_limits(evaluate)

    pairs = subparsers.add_parser("pairs", help="Write a two-label pair manifest.")
    _add_common_opts(pairs)
    _add_dataset_opt(pairs)
    _add_seed_and_limits(pairs)
    pairs.add_argument(
        "--output-root",
        dest="output_root",
        type=Path,
        default=argparse.SUPPRESS,
        help=f'Directory receiving the manifest. Defaults to "{DEFAULT_OUTPUT_ROOT}".',
    )

    visualize = subparsers.add_parser(
        "visualize",
        help="Write activation map overlays.",
    )
    _add_common_opts(visualize)
    _add_checkpoint_opts(visualize)
    _add_dataset_opt(visualize)
    _add_seed_and_limits(visualize)
    samples = visualize.add_mutually_exclusive_group(required=True)
    samples.add_argument(
        "--indices",
        type=int,
        nargs="+",
        help="Single-label test sample indices.",
    )
    samples.add_argument(
        "--rows",
        type=int,
        nargs="+",
        help="Pair manifest rows (two-label samples).",
    )
    visualize.add_argument(
        "-o",
        "--output",
        type=Path,
        help="Directory receiving the images. Defaults to a directory below "
        "the output root.",
    )
    visualize.add_argument(
        "--alpha",
        type=float,
        default=0.5,
        help='Overlay opacity of the activation map. Defaults to "%(default)s".',
    )
    visualize.add_argument(
        "--output-root",
        dest="output_root",
        type=Path,
        default=argparse.SUPPRESS,
        help=f'Directory receiving outputs. Defaults to "{DEFAULT_OUTPUT_ROOT}".',
    )

    params = subparsers.add_parser("params", help="Print the parameter census.")
    _add_common_opts(params)
    _add_dataset_opt(params)
    _add_head_opt(params, "Head to count. Defaults to all three.")
    _add_int_opt(
        params,
        "--iterations",
        "iterations",
        "Routing iterations, they do not change the count.",
    )

    return parser


def parse_run_opts(argv: Sequence[str] | None = None) -> argparse.Namespace:
    """Parses run options into a namespace carrying a RunConfig.

    Precedence is RunConfig defaults, then the --config file, then explicit flags.

    :param argv: Arguments to be parsed, sys.argv when None
    :raise ConfigurationError: If the resulting config is invalid
    :return: Namespace with the command, its non-config options and ``config``
    """
    parser = add_parser_opts()
    opts = parser.parse_args(argv)
    explicit = {key: value for key, value in vars(opts).items() if key in CONFIG_KEYS}
    for key in explicit:
        delattr(opts, key)
    # The params command counts every head unless one is asked for
    opts.head_given = "head" in explicit

    config_file = getattr(opts, "config_file", None)
    base = RunConfig.read(config_file) if config_file else RunConfig()
    if "data_root" in explicit:
        explicit["data_root"] = explicit["data_root"].expanduser()
    if "output_root" in explicit:
        explicit["output_root"] = explicit["output_root"].expanduser()
    opts.config = replace(base, **explicit)

    valid, reason = are_args_valid(opts.config)
    if not valid:
        raise ConfigurationError(f"Invalid run options: {reason}")
    return opts


def are_args_valid(config: RunConfig) -> tuple[bool, str]:
    """Check to see if chosen arguments are valid.

    :param config: Run configuration
    :return: Whether arguments are valid, with a string as the explanation
    """
    # pylint: disable=too-many-return-statements
    if config.dataset not in DATASETS:
        return False, f"Unknown dataset {config.dataset!r}."
    if config.head not in HEAD_KINDS:
        return False, f"Unknown head {config.head!r}."
    if config.epochs < 1:
        return False, "Training needs at least one epoch."
    if config.batch_size < 1:
        return False, "Batch size must be positive."
    if config.iterations < 0:
        return False, "Routing iterations cannot be negative."
    if config.seed < 0:
        return False, "Seeds must be non-negative."
    if config.learning_rate <= 0:
        return False, "The learning rate must be positive."
    if config.eval_every < 0 or config.train_limit < 0 or config.test_limit < 0:
        return False, "--eval-every, --train-limit and --test-limit cannot be negative."
    if config.test_limit == 1:
        return False, "Pairing needs at least 2 test samples."
    if config.workers < 0:
        return False, "Worker count cannot be negative."
    return True, ""


def compute_run_name(config: RunConfig) -> str:
    """Return the name of the directory a run writes to.

    Reduced runs carry their limits in the name so they cannot be mistaken for full
    ones.

    :param config: Run configuration
    :return: e.g. "ps-mnist-e100-b64-r3-s0"
    """
    name = [
        config.head,
        config.dataset,
        f"e{config.epochs}",
        f"b{config.batch_size}",
        f"r{config.iterations}",
        f"s{config.seed}",
    ]
    if config.train_limit:
        name.append(f"tl{config.train_limit}")
    if config.test_limit:
        name.append(f"vl{config.test_limit}")
    assert "" not in name, f'Run name "{name!r}" should not have empty elements.'
    return "-".join(name)
