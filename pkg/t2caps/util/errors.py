# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Error classes shared by every t2caps module."""

from __future__ import annotations


class Top2Error(Exception):
    """Root of all errors raised on purpose by t2caps."""


class ConfigurationError(Top2Error, ValueError):
    """Shape mismatches, bad arguments and other contract violations."""


class DataFormatError(Top2Error, ValueError):
    """Dataset or artifact files that are missing, truncated or malformed."""


class CheckpointError(DataFormatError):
    """Checkpoints that cannot be read or do not match the requested model."""


class NumericError(Top2Error, ArithmeticError):
    """NaN or Inf values showing up in tensors or losses."""
