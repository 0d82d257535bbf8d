# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Miscellaneous helper functions."""

from __future__ import annotations

from logging import INFO as INFO_LOG_LEVEL
import os
from pathlib import Path
import random
from types import TracebackType

import numpy as np
import torch

from t2caps.util.logging import get_logger

UTILS_LOG = get_logger(__name__)
UTILS_LOG.setLevel(INFO_LOG_LEVEL)


class LockDir:
    """A class to create a filesystem-based lock while in scope.
    The lock dir will be deleted after the lock is released.

    Use:
        with LockDir(path):
            # No other process is concurrently writing the guarded run directory

    :param directory: Lock directory name
    """

    def __init__(self, directory: Path):
        self.directory = directory

    def __enter__(self) -> None:
        try:
            self.directory.mkdir(parents=True)
        except OSError:
            UTILS_LOG.error("Lock directory exists: %s", self.directory)
            raise

    def __exit__(
        self,
        _exc_type: type[BaseException] | None,
        _exc_val: BaseException | None,
        _exc_tb: TracebackType | None,
    ) -> None:
        self.directory.rmdir()


def seed_everything(seed: int, deterministic: bool = True) -> torch.Generator:
    """Seed every random number source used during a run.

    :param seed: Run seed
    :param deterministic: Whether torch should refuse non-deterministic kernels
    :return: A torch generator seeded with the run seed, for data loader shuffling
    """
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def select_device(prefer_gpu: bool) -> torch.device:
    """Pick the device a run computes on.

    :param prefer_gpu: Whether a CUDA device should be used when one is available
    :return: Selected device
    """
    if prefer_gpu and torch.cuda.is_available():
        return torch.device("cuda")
    return torch.device("cpu")
