# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Command-line entry point: fetch-check, train, eval, pairs, visualize, params."""

from __future__ import annotations

import argparse
import csv
from logging import INFO as INFO_LOG_LEVEL
from pathlib import Path
import sys
from typing import Callable
from typing import Sequence

import numpy as np
import torch

from t2caps import evalkit
from t2caps import probam
from t2caps import run_options
from t2caps.archnet import ModelOutput
from t2caps.archnet import Top2Model
from t2caps.archnet import build_model
from t2caps.archnet import count_parameters
from t2caps.checkpoint import load_checkpoint
from t2caps.common.hatch import CommonRun
from t2caps.common.hatch import CommonRunError
from t2caps.dataio import ChannelStats
from t2caps.dataio import ImageSet
from t2caps.dataio import PairDataset
from t2caps.dataio import PairManifest
from t2caps.dataio import dataset_dir
from t2caps.dataio import expected_kept_fraction
from t2caps.dataio import load_or_compute_stats
from t2caps.dataio import load_split
from t2caps.dataio import make_pairs
from t2caps.experiment import trainer
from t2caps.util import constants
from t2caps.util import fs_helpers
from t2caps.util import utils
from t2caps.util.constants import EXIT_DATA_ERROR
from t2caps.util.constants import EXIT_NUMERIC_FAILURE
from t2caps.util.constants import EXIT_OK
from t2caps.util.constants import EXIT_USAGE
from t2caps.util.errors import ConfigurationError
from t2caps.util.errors import DataFormatError
from t2caps.util.errors import NumericError
from t2caps.util.logging import get_logger
from t2caps.util.logging import set_verbosity

T2_HATCH_LOG = get_logger(__name__, fmt="%(message)s")
T2_HATCH_LOG.setLevel(INFO_LOG_LEVEL)

CNN_VISUALIZE_NOTE = (
    "ProbAM needs a routing trace, which the cnn head does not have: "
    "writing first-layer maps only"
)


class Top2Run(CommonRun):
    """A Top2Run object is one invocation of a t2caps command.

    :param config: Run configuration defined in run_options.py
    """

    @classmethod
    def main(cls, args: Sequence[str] | None = None) -> int:
        """Main function of the Top2Run class.

        :param args: Command-line arguments, sys.argv when None
        :return: 0 on success, 1 on usage errors, 2 on data or checkpoint errors and 3
                 on numeric failures
        """
        try:
            return cls.run(args)
        except CommonRunError as ex:
            T2_HATCH_LOG.error("t2caps: %s", ex)
            return ex.exit_code

    @staticmethod
    def run(argv: Sequence[str] | None = None) -> int:
        """Dispatch one command.

        :param argv: Command-line arguments
        :raise CommonRunError: Wrapping every expected failure with its exit code
        :return: Exit code of the command
        """
        try:
            opts = run_options.parse_run_opts(argv)
            set_verbosity(opts.verbose)
            return COMMANDS[opts.command](opts)
        except NumericError as ex:
            raise CommonRunError(str(ex), EXIT_NUMERIC_FAILURE) from ex
        except DataFormatError as ex:
            raise CommonRunError(str(ex), EXIT_DATA_ERROR) from ex
        except ConfigurationError as ex:
            raise CommonRunError(str(ex), EXIT_USAGE) from ex
        except OSError as ex:
            raise CommonRunError(f"I/O failure: {ex}", EXIT_DATA_ERROR) from ex


def _format_census_row(name: str, count: int) -> str:
    return f"{name:<40}{count:>12,}"


def cmd_params(opts: argparse.Namespace) -> int:
    """Print the per-layer parameter census of one or all heads.

    :param opts: Parsed options
    :return: 0
    """
    config = opts.config
    spec = config.dataset_spec
    heads = (config.head,) if opts.head_given else constants.HEAD_KINDS
    for head in heads:
        total, census = count_parameters(
            build_model(spec.channels, head, constants.NUM_CLASSES, config.iterations),
        )
        print(f"{head} head on {spec.name} ({spec.channels} channels)")  # noqa: T001
        print(f"{'layer':<40}{'parameters':>12}")  # noqa: T001
        for name, count in census.items():
            print(_format_census_row(name, count))  # noqa: T001
        print(_format_census_row("total", total))  # noqa: T001
        print()  # noqa: T001
    return EXIT_OK


def cmd_pairs(opts: argparse.Namespace) -> int:
    """Draw a pair manifest from the single-label test split and write it.

    :param opts: Parsed options
    :return: 0
    """
    config = opts.config
    spec = config.dataset_spec
    labels = load_split(spec, config.data_root, "test").subset(config.test_limit).labels
    manifest = make_pairs(labels, config.seed)
    path = manifest.write(
        fs_helpers.ensure_dir(config.output_root)
        / f"pairs-{spec.name}-s{config.seed}.txt",
    )
    fraction = expected_kept_fraction(labels)
    print(f"kept {manifest.kept}, rejected {manifest.rejected}")  # noqa: T001
    print(  # noqa: T001
        f"expected kept {fraction * len(labels):.1f} ({fraction:.4f} of {len(labels)})",
    )
    print(path)  # noqa: T001
    return EXIT_OK


def _check_file(path: Path, sums: dict[str, str]) -> bool:
    try:
        found = fs_helpers.resolve_data_file(path)
    except DataFormatError:
        print(f"  {path.name:<28} MISSING")  # noqa: T001
        return False
    digest = fs_helpers.sha256_of(found)
    expected = sums.get(found.name)
    if expected is None:
        status = "unlisted" if sums else "no SHA256SUMS"
    else:
        status = "ok" if expected == digest else "CHECKSUM MISMATCH"
    print(  # noqa: T001
        f"  {found.name:<28} {found.stat().st_size:>12,} bytes  {digest}  {status}",
    )
    return expected is None or expected == digest


def cmd_fetch_check(opts: argparse.Namespace) -> int:
    """Report the presence, size, digest and record counts of dataset files.

    Nothing is downloaded.

    :param opts: Parsed options
    :return: 0 when every checked dataset is complete, 2 otherwise
    """
    data_root = opts.config.data_root
    names = opts.datasets or sorted(constants.DATASETS)
    healthy = True
    for name in names:
        spec = constants.DATASETS[name]
        directory = dataset_dir(data_root, spec)
        print(f"{name}: {directory}")  # noqa: T001
        sums_path = directory / constants.CHECKSUM_FILE_NAME
        sums = fs_helpers.read_checksum_file(sums_path) if sums_path.is_file() else {}
        files_ok = all(
            [
                _check_file(directory / file_name, sums)
                for file_name in spec.train_files + spec.test_files
            ],
        )
        healthy &= files_ok
        if not files_ok:
            continue
        for split, expected in (("train", spec.train_count), ("test", spec.test_count)):
            try:
                count = len(load_split(spec, data_root, split))
            except DataFormatError as ex:
                print(f"  {split}: PARSE ERROR {ex}")  # noqa: T001
                healthy = False
                continue
            note = "" if count == expected else f" (expected {expected:,})"
            print(f"  {split}: {count:,} records{note}")  # noqa: T001
    return EXIT_OK if healthy else EXIT_DATA_ERROR


def _load_model(
    opts: argparse.Namespace,
    expected_head: str | None,
) -> tuple[Top2Model, ChannelStats]:
    config = opts.config
    spec = config.dataset_spec
    model, header = load_checkpoint(opts.checkpoint, expected_head, spec.channels)
    if "channel_mean" in header and "channel_std" in header:
        stats = ChannelStats(
            tuple(header["channel_mean"]),
            tuple(header["channel_std"]),
        )
    else:
        run = CommonRun(config)
        stats = load_or_compute_stats(
            run.data_stats_path,
            load_split(spec, config.data_root, "train"),
        )
    return model, stats


def _load_manifest(opts: argparse.Namespace, test_set: ImageSet) -> PairManifest:
    if opts.manifest:
        manifest = PairManifest.read(opts.manifest)
        if any(max(pair) >= len(test_set) for pair in manifest.pairs):
            raise DataFormatError(
                f"{opts.manifest} refers to samples beyond the {len(test_set)} "
                "test samples in use",
            )
        return manifest
    return make_pairs(test_set.labels, opts.config.seed)


def cmd_eval(opts: argparse.Namespace) -> int:
    """Print SA, TA and TCA of a checkpoint.

    :param opts: Parsed options
    :return: 0
    """
    config = opts.config
    model, stats = _load_model(opts, config.head if opts.head_given else None)
    test_set = load_split(config.dataset_spec, config.data_root, "test").subset(
        config.test_limit,
    )
    manifest = _load_manifest(opts, test_set)
    single, pairs = trainer.eval_loaders(test_set, manifest, stats)
    record = trainer.evaluate(model, single, pairs, torch.device("cpu"))

    print(f"{model.head_kind} head on {config.dataset}")  # noqa: T001
    print(  # noqa: T001
        f"SA  {record.single_hits}/{record.single_total}  {_rate(record.sa)}",
    )
    print(f"TA  {record.ta_hits}/{record.pair_total}  {_rate(record.ta)}")  # noqa: T001
    print(  # noqa: T001
        f"TCA {record.tca_hits}/{record.pair_total}  {_rate(record.tca)}  "
        f"({constants.TCA_RULE})",
    )
    return EXIT_OK


def _rate(rate: float | None) -> str:
    return "absent" if rate is None else f"{rate:.4%}"


def _forward_one(
    model: Top2Model,
    pixels: np.ndarray,
    stats: ChannelStats,
) -> ModelOutput:
    with torch.no_grad():
        output: ModelOutput = model(torch.from_numpy(stats.normalize(pixels))[None])
    return output


def cmd_visualize(opts: argparse.Namespace) -> int:  # pylint: disable=too-many-locals
    """Write last-layer ProbAM and first-layer overlays for chosen test samples.

    :param opts: Parsed options
    :raise ConfigurationError: On out-of-range sample indices or manifest rows
    :return: 0
    """
    config = opts.config
    spec = config.dataset_spec
    model, stats = _load_model(opts, None)
    test_set = load_split(spec, config.data_root, "test").subset(config.test_limit)

    samples: list[tuple[str, np.ndarray, tuple[int, ...]]] = []
    if opts.indices:
        for index in opts.indices:
            if not 0 <= index < len(test_set):
                raise ConfigurationError(
                    f"Sample index {index} outside [0, {len(test_set)})",
                )
            sample = test_set[index]
            samples.append((f"i{index}", sample.pixels, (sample.label,)))
    else:
        pairs = PairDataset(test_set, _load_manifest(opts, test_set), stats)
        for row in opts.rows:
            if not 0 <= row < len(pairs):
                raise ConfigurationError(
                    f"Manifest row {row} outside [0, {len(pairs)})",
                )
            pair = pairs.pair(row)
            samples.append(
                (
                    f"p{pair.provenance[0]}-{pair.provenance[1]}",
                    pair.pixels,
                    tuple(sorted(pair.labels)),
                ),
            )

    capsules = model.head_kind in constants.CAPSULE_HEADS
    if not capsules:
        T2_HATCH_LOG.warning(CNN_VISUALIZE_NOTE)
    out_dir = opts.output or (
        config.output_root / f"visualize-{spec.name}-{model.head_kind}"
    )
    out_dir = fs_helpers.ensure_dir(out_dir)
    prefix = f"{spec.name}-{model.head_kind}"

    manifest_rows = []
    for tag, pixels, truth in samples:
        probabilities, trace, stem, features = _forward_one(model, pixels, stats)
        probs = probabilities[0].numpy()
        predicted = evalkit.top2(probs)[: len(truth)]
        height, width = pixels.shape[1:]
        maps = [("conv1", probam.conv1_map(stem[0]))]
        if capsules:
            assert trace is not None
            geometry = probam.geometry_for(model.head_kind, features)
            maps.insert(0, ("probam", probam.probam_map(trace, geometry)))
        for kind, activation in maps:
            rgb = probam.overlay(
                probam.resize(activation, height, width),
                pixels,
                opts.alpha,
            )
            path = probam.write_image(rgb, out_dir / f"{prefix}-{tag}-{kind}.png")
            manifest_rows.append(
                [
                    path.name,
                    kind,
                    tag,
                    " ".join(str(t) for t in truth),
                    " ".join(str(p) for p in predicted),
                    " ".join(f"{probs[p]:.4f}" for p in predicted),
                ],
            )

    manifest_path = out_dir / constants.VISUALIZE_MANIFEST_NAME
    with open(manifest_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["file", "map", "sample", "truth", "predicted", "probability"])
        writer.writerows(manifest_rows)
    if not capsules:
        print(CNN_VISUALIZE_NOTE)  # noqa: T001
    print(f"{len(manifest_rows)} images written to {out_dir}")  # noqa: T001
    return EXIT_OK


def cmd_train(opts: argparse.Namespace) -> int:
    """Train the configured model, guarding the run directory with a lock.

    :param opts: Parsed options
    :return: 0
    """
    run = Top2Run(opts.config)
    with utils.LockDir(run.lock_dir):
        summary = trainer.train(run)
    print(  # noqa: T001
        f"best epoch {summary.best_epoch}: {evalkit.format_record(summary.best)}",
    )
    print(f"final: {evalkit.format_record(summary.final)}")  # noqa: T001
    print(run.output_dir)  # noqa: T001
    return EXIT_OK


COMMANDS: dict[str, Callable[[argparse.Namespace], int]] = {
    "fetch-check": cmd_fetch_check,
    "train": cmd_train,
    "eval": cmd_eval,
    "pairs": cmd_pairs,
    "visualize": cmd_visualize,
    "params": cmd_params,
}


def main() -> None:
    """Execute main() function in Top2Run class."""
    sys.exit(Top2Run.main())


if __name__ == "__main__":
    main()
