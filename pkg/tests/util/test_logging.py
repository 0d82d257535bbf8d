# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Test the logging.py file."""

from __future__ import annotations

import logging

from t2caps.util.logging import get_logger
from t2caps.util.logging import set_verbosity


def test_get_logger_attaches_one_handler() -> None:
    """Test that repeated lookups of a logger do not duplicate its output."""
    first = get_logger("t2caps.tests.handlers")
    second = get_logger("t2caps.tests.handlers", fmt="%(message)s")
    assert first is second
    assert len(second.handlers) == 1


def test_set_verbosity() -> None:
    """Test that verbosity switches package loggers and leaves others alone."""
    ours = get_logger("t2caps.tests.verbosity")
    theirs = logging.getLogger("elsewhere.tests.verbosity")
    theirs.setLevel(logging.WARNING)
    try:
        set_verbosity(True)
        assert ours.level == logging.DEBUG
        assert theirs.level == logging.WARNING
    finally:
        set_verbosity(False)
    assert ours.level == logging.INFO
