# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Margin loss over class probabilities."""

from __future__ import annotations

import torch
from torch.nn import functional as F  # noqa: N812

from t2caps import backend
from t2caps.util.errors import ConfigurationError

M_PLUS = 0.9
M_MINUS = 0.1
NEGATIVE_WEIGHT = 0.5


def one_hot_targets(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Build target vectors T with exactly one 1 per single-label sample.

    :param labels: Integer labels [batch]
    :param num_classes: Length M of every target vector
    :raise ConfigurationError: If a label is outside [0, M)
    :return: Float targets [batch, M]
    """
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ConfigurationError(f"Labels must lie in [0, {num_classes})")
    return F.one_hot(labels.long(), num_classes).to(torch.get_default_dtype())


def margin_loss(probabilities: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Two-sided squared hinge loss averaged over classes and then over the batch.

    Per sample: (1/M) * sum_j [T_j max(0, 0.9 - p_j)^2
    + 0.5 (1 - T_j) max(0, p_j - 0.1)^2].

    :param probabilities: [batch, M] values in [0, 1]
    :param targets: [batch, M] entries in {0, 1}
    :raise ConfigurationError: On shape mismatches
    :return: Scalar loss
    """
    if probabilities.shape != targets.shape or probabilities.dim() != 2:
        raise ConfigurationError(
            f"margin_loss needs matching [batch, M] inputs, got "
            f"{tuple(probabilities.shape)} and {tuple(targets.shape)}",
        )
    targets = targets.to(probabilities.dtype)
    present = targets * backend.relu(M_PLUS - probabilities) ** 2
    absent = (
        NEGATIVE_WEIGHT * (1 - targets) * backend.relu(probabilities - M_MINUS) ** 2
    )
    return (present + absent).mean(dim=1).mean()
