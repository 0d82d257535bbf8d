# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Common run object code"""

from __future__ import annotations

from pathlib import Path

from t2caps import run_options
from t2caps.util import constants
from t2caps.util import fs_helpers
from t2caps.util.constants import EXIT_USAGE
from t2caps.util.constants import DatasetSpec


class CommonRunError(Exception):
    """Error class unique to CommonRun objects.

    :param message: Diagnostic shown to the user
    :param exit_code: Process exit code the failure maps to
    """

    def __init__(self, message: str, exit_code: int = EXIT_USAGE):
        super().__init__(message)
        self.exit_code = exit_code


class CommonRun:
    """A CommonRun object represents one experiment and the directory it writes to.

    :param config: Run configuration defined in run_options.py
    """

    def __init__(self, config: run_options.RunConfig):
        self._name = run_options.compute_run_name(config)
        self.config = config

    @property
    def dataset_spec(self) -> DatasetSpec:
        """Retrieve the description of the dataset this run uses.

        :return: Dataset description
        """
        return self.config.dataset_spec

    @property
    def data_dir(self) -> Path:
        """Retrieve the directory holding the dataset files.

        :return: Full path to the dataset directory
        """
        return self.config.data_root / self.config.dataset

    @property
    def data_stats_path(self) -> Path:
        """Retrieve the normalization constants cache of the dataset.

        :return: Full path to the stats cache
        """
        return self.data_dir / constants.STATS_FILE_NAME

    @property
    def name(self) -> str:
        """Retrieve the run name, which is also the output directory name.

        :return: Run name
        """
        return self._name

    @property
    def output_dir(self) -> Path:
        """Retrieve the run output directory, creating it if needed.

        :return: Full path to the run output directory
        """
        return fs_helpers.ensure_dir(self.config.output_root, self._name)

    @property
    def lock_dir(self) -> Path:
        """Retrieve the lock directory guarding the run output directory.

        :return: Full path to the lock directory
        """
        return fs_helpers.get_lock_dir_path(self.config.output_root / self._name)

    @property
    def run_config_path(self) -> Path:
        """Retrieve the stored run configuration.

        :return: Full path to run.cfg
        """
        return self.output_dir / constants.RUN_CONFIG_FILE_NAME

    @property
    def metrics_path(self) -> Path:
        """Retrieve the metrics CSV.

        :return: Full path to metrics.csv
        """
        return self.output_dir / constants.METRICS_FILE_NAME

    @property
    def pairs_path(self) -> Path:
        """Retrieve the pair manifest used for TA and TCA.

        :return: Full path to pairs.txt
        """
        return self.output_dir / constants.PAIRS_FILE_NAME

    @property
    def stats_path(self) -> Path:
        """Retrieve the copy of the normalization constants used by this run.

        :return: Full path to stats.txt
        """
        return self.output_dir / constants.STATS_FILE_NAME

    @property
    def best_checkpoint_path(self) -> Path:
        """Retrieve the checkpoint with the best single-label accuracy so far.

        :return: Full path to best.t2ck
        """
        return self.output_dir / constants.BEST_CHECKPOINT_NAME

    @property
    def final_checkpoint_path(self) -> Path:
        """Retrieve the checkpoint written after the last epoch.

        :return: Full path to final.t2ck
        """
        return self.output_dir / constants.FINAL_CHECKPOINT_NAME
