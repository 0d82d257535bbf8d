# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Single-label and two-label accuracy metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional
from typing import Sequence

import numpy as np

from t2caps.util.errors import ConfigurationError

TCA_THRESHOLD = 0.5
METRICS_COLUMNS = ("step", "epoch", "sa", "ta", "tca")


def top2(probabilities: Sequence[float] | np.ndarray) -> tuple[int, int]:
    """Indices of the two largest probabilities, ties broken by the lower index.

    :param probabilities: One probability per class, at least two classes
    :raise ConfigurationError: With fewer than two classes
    :return: (first, second) class indices
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim != 1 or probs.size < 2:
        raise ConfigurationError(
            f"top2 needs a vector of >= 2 classes, got {probs.shape}",
        )
    order = np.argsort(-probs, kind="stable")
    return int(order[0]), int(order[1])


def score_single(probabilities: Sequence[float] | np.ndarray, label: int) -> bool:
    """Whether the most probable class is the label.

    :param probabilities: One probability per class
    :param label: True class
    :raise ConfigurationError: If the label is not a valid class
    :return: Hit or miss
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    if not 0 <= label < probs.size:
        raise ConfigurationError(f"Label {label} outside [0, {probs.size})")
    return int(np.argsort(-probs, kind="stable")[0]) == label


def score_pair(
    probabilities: Sequence[float] | np.ndarray,
    labels: tuple[int, int] | frozenset[int],
) -> tuple[bool, bool]:
    """Score one two-label sample.

    :param probabilities: One probability per class
    :param labels: The two (different) true classes
    :raise ConfigurationError: Unless exactly two distinct valid labels are given
    :return: (TA hit, TCA hit). TA: the top-2 set equals the label set. TCA: a TA hit
             whose two top probabilities are both >= 0.5
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    label_set = set(int(label) for label in labels)
    if len(label_set) != 2 or not all(0 <= label < probs.size for label in label_set):
        raise ConfigurationError(f"Need two distinct labels in [0, {probs.size})")
    first, second = top2(probs)
    ta_hit = {first, second} == label_set
    tca_hit = (
        ta_hit
        and probs[first] >= TCA_THRESHOLD
        and probs[second] >= TCA_THRESHOLD
    )
    return ta_hit, bool(tca_hit)


@dataclass(frozen=True)
class MetricsRecord:
    """Accuracy counts with the rates derived from them.

    :param single_total: Number of single-label samples scored
    :param single_hits: Number of SA hits
    :param pair_total: Number of two-label samples scored
    :param ta_hits: Number of TA hits
    :param tca_hits: Number of TCA hits
    """

    single_total: int = 0
    single_hits: int = 0
    pair_total: int = 0
    ta_hits: int = 0
    tca_hits: int = 0

    def __add__(self, other: MetricsRecord) -> MetricsRecord:
        return MetricsRecord(
            self.single_total + other.single_total,
            self.single_hits + other.single_hits,
            self.pair_total + other.pair_total,
            self.ta_hits + other.ta_hits,
            self.tca_hits + other.tca_hits,
        )

    @property
    def sa(self) -> Optional[float]:  # pylint: disable=invalid-name
        """Single-label accuracy, None when nothing was scored.

        :return: Rate in [0, 1]
        """
        return self.single_hits / self.single_total if self.single_total else None

    @property
    def ta(self) -> Optional[float]:  # pylint: disable=invalid-name
        """Top-2 accuracy, None when no pairs were scored.

        :return: Rate in [0, 1]
        """
        return self.ta_hits / self.pair_total if self.pair_total else None

    @property
    def tca(self) -> Optional[float]:
        """Top-2 confident accuracy, None when no pairs were scored.

        :return: Rate in [0, 1], never above ta
        """
        return self.tca_hits / self.pair_total if self.pair_total else None


def score_single_batch(probabilities: np.ndarray, labels: np.ndarray) -> MetricsRecord:
    """Score a batch of single-label predictions.

    :param probabilities: [batch, q]
    :param labels: [batch] true classes
    :return: Counts for the batch
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    hits = sum(score_single(row, int(label)) for row, label in zip(probs, labels))
    return MetricsRecord(single_total=len(probs), single_hits=hits)


def score_pair_batch(probabilities: np.ndarray, labels: np.ndarray) -> MetricsRecord:
    """Score a batch of two-label predictions.

    :param probabilities: [batch, q]
    :param labels: [batch, 2] true class pairs
    :return: Counts for the batch
    """
    ta_hits = tca_hits = 0
    for row, pair in zip(np.asarray(probabilities, dtype=np.float64), labels):
        ta_hit, tca_hit = score_pair(row, (int(pair[0]), int(pair[1])))
        ta_hits += ta_hit
        tca_hits += tca_hit
    return MetricsRecord(pair_total=len(labels), ta_hits=ta_hits, tca_hits=tca_hits)


def aggregate(
    single_hits: Sequence[bool],
    pair_hits: Sequence[tuple[bool, bool]],
) -> MetricsRecord:
    """Fold per-sample hits into one record.

    :param single_hits: SA hit per single-label sample
    :param pair_hits: (TA, TCA) hits per two-label sample
    :return: Aggregated counts
    """
    return MetricsRecord(
        single_total=len(single_hits),
        single_hits=sum(bool(hit) for hit in single_hits),
        pair_total=len(pair_hits),
        ta_hits=sum(bool(ta) for ta, _ in pair_hits),
        tca_hits=sum(bool(tca) for _, tca in pair_hits),
    )


def _fmt(rate: Optional[float]) -> str:
    return "" if rate is None else f"{rate:.6f}"


class MetricsLog:
    """Append-only CSV of evaluation results with columns step,epoch,sa,ta,tca.

    :param path: CSV file, created with its header row on first use
    """

    def __init__(self, path: Path):
        self.path = path
        if not path.is_file():
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="") as f:
                csv.writer(f).writerow(METRICS_COLUMNS)

    def append(self, step: int, epoch: int, record: MetricsRecord) -> None:
        """Add one row.

        :param step: Optimizer step count
        :param epoch: Epoch number
        :param record: Evaluation result
        """
        with open(self.path, "a", encoding="utf-8", newline="") as f:
            csv.writer(f).writerow(
                [step, epoch, _fmt(record.sa), _fmt(record.ta), _fmt(record.tca)],
            )

    def rows(self) -> list[dict[str, str]]:
        """Read every row back.

        :return: One dict per row keyed by column name
        """
        with open(self.path, encoding="utf-8", newline="") as f:
            return list(csv.DictReader(f))


def format_record(record: MetricsRecord) -> str:
    """Render a record for the terminal.

    :param record: Evaluation result
    :return: e.g. "SA 0.9912  TA 0.9534  TCA 0.8021"
    """
    parts = []
    for name, rate in (("SA", record.sa), ("TA", record.ta), ("TCA", record.tca)):
        if rate is not None:
            parts.append(f"{name} {rate:.4f}")
    return "  ".join(parts) or "no samples scored"
