# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Training loop and model evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from logging import INFO as INFO_LOG_LEVEL
import math
from typing import Any

import torch
from torch.utils.data import DataLoader

from t2caps import backend
from t2caps import evalkit
from t2caps.archnet import Top2Model
from t2caps.archnet import build_model
from t2caps.checkpoint import save_checkpoint
from t2caps.common.hatch import CommonRun
from t2caps.dataio import ChannelStats
from t2caps.dataio import EvalDataset
from t2caps.dataio import ImageSet
from t2caps.dataio import PairDataset
from t2caps.dataio import PairManifest
from t2caps.dataio import PipelineMode
from t2caps.dataio import TrainDataset
from t2caps.dataio import load_or_compute_stats
from t2caps.dataio import load_split
from t2caps.dataio import make_pairs
from t2caps.objective import margin_loss
from t2caps.objective import one_hot_targets
from t2caps.util.constants import NUM_CLASSES
from t2caps.util.constants import TCA_RULE
from t2caps.util.errors import ConfigurationError
from t2caps.util.errors import NumericError
from t2caps.util.logging import get_logger
from t2caps.util.utils import seed_everything
from t2caps.util.utils import select_device

TRAINER_LOG = get_logger(__name__)
TRAINER_LOG.setLevel(INFO_LOG_LEVEL)

EVAL_BATCH_SIZE = 256


@dataclass(frozen=True)
class TrainingSummary:
    """Outcome of a finished training run.

    :param epochs: Epochs run
    :param steps: Optimizer steps taken
    :param best_epoch: Epoch of the best single-label accuracy
    :param best: Metrics of the best evaluation
    :param final: Metrics of the last evaluation
    """

    epochs: int
    steps: int
    best_epoch: int
    best: evalkit.MetricsRecord
    final: evalkit.MetricsRecord


def evaluate(
    model: Top2Model,
    single: DataLoader,  # type: ignore[type-arg]
    pairs: DataLoader | None,  # type: ignore[type-arg]
    device: torch.device,
) -> evalkit.MetricsRecord:
    """Score a model on the single-label test split and on two-label pairs.

    :param model: Model to score, switched to eval mode
    :param single: Loader over an EvalDataset
    :param pairs: Loader over a PairDataset, None to skip TA and TCA
    :param device: Device the model lives on
    :return: Aggregated counts
    """
    model.eval()
    record = evalkit.MetricsRecord()
    with torch.no_grad():
        for images, labels in single:
            probs = model(images.to(device)).probabilities.cpu().numpy()
            record += evalkit.score_single_batch(probs, labels.numpy())
        if pairs is not None:
            for images, labels in pairs:
                probs = model(images.to(device)).probabilities.cpu().numpy()
                record += evalkit.score_pair_batch(probs, labels.numpy())
    return record


def eval_loaders(
    test_set: ImageSet,
    manifest: PairManifest,
    stats: ChannelStats,
    workers: int = 0,
) -> tuple[DataLoader, DataLoader | None]:  # type: ignore[type-arg]
    """Build the ordered loaders evaluation reads from.

    :param test_set: Single-label test split
    :param manifest: Pair manifest, pairs are skipped when it is empty
    :param stats: Normalization constants
    :param workers: Data loader worker processes
    :raise ConfigurationError: If a dataset is not in evaluation mode
    :return: Single-label loader and pair loader (None for an empty manifest)
    """
    single_set = EvalDataset(test_set, stats)
    pair_set = PairDataset(test_set, manifest, stats)
    for dataset in (single_set, pair_set):
        if dataset.mode is not PipelineMode.EVAL:
            raise ConfigurationError(
                f"{type(dataset).__name__} would augment evaluation images",
            )
    single = DataLoader(
        single_set,
        batch_size=EVAL_BATCH_SIZE,
        shuffle=False,
        num_workers=workers,
    )
    if not manifest.kept:
        return single, None
    pairs = DataLoader(
        pair_set,
        batch_size=EVAL_BATCH_SIZE,
        shuffle=False,
        num_workers=workers,
    )
    return single, pairs


def _checkpoint_extra(
    run: CommonRun,
    stats: ChannelStats,
    epoch: int,
    step: int,
    record: evalkit.MetricsRecord,
) -> dict[str, Any]:
    return {
        "dataset": run.config.dataset,
        "seed": run.config.seed,
        "channel_mean": list(stats.mean),
        "channel_std": list(stats.std),
        "epoch": epoch,
        "step": step,
        "sa": record.sa,
        "tca_rule": TCA_RULE,
    }


def train(run: CommonRun) -> TrainingSummary:  # pylint: disable=too-many-locals
    """Train the configured model and write every run artifact.

    Writes run.cfg, stats.txt, pairs.txt, metrics.csv, best.t2ck and final.t2ck to the
    run output directory. Evaluation happens after every epoch and, when eval_every is
    set, every eval_every optimizer steps.

    :param run: Run whose configuration is trained
    :raise NumericError: When the loss stops being finite
    :return: Summary of the run
    """
    config = run.config
    spec = run.dataset_spec
    generator = seed_everything(config.seed)
    device = select_device(config.use_gpu)

    full_train = load_split(spec, config.data_root, "train")
    stats = load_or_compute_stats(run.data_stats_path, full_train)
    train_set = full_train.subset(config.train_limit)
    test_set = load_split(spec, config.data_root, "test").subset(config.test_limit)
    manifest = make_pairs(test_set.labels, config.seed)

    config.write(run.run_config_path)
    run.stats_path.write_text(stats.to_text(), encoding="utf-8")
    manifest.write(run.pairs_path)
    run.metrics_path.unlink(missing_ok=True)
    metrics = evalkit.MetricsLog(run.metrics_path)
    TRAINER_LOG.info(
        "Training %s on %d samples, %d test samples, %d pairs (%s)",
        run.name,
        len(train_set),
        len(test_set),
        manifest.kept,
        config.augment_policy.describe(),
    )

    model = build_model(spec.channels, config.head, NUM_CLASSES, config.iterations)
    model.to(device)
    optimizer = backend.make_optimizer(model.parameters(), config.learning_rate)
    train_data = TrainDataset(train_set, config.augment_policy, stats, config.seed)
    train_loader = DataLoader(
        train_data,
        batch_size=config.batch_size,
        shuffle=True,
        generator=generator,
        num_workers=config.workers,
    )
    single_loader, pair_loader = eval_loaders(test_set, manifest, stats, config.workers)

    step = 0
    last_eval_step = -1
    best = final = evalkit.MetricsRecord()
    best_epoch = 0

    def run_eval(epoch: int) -> evalkit.MetricsRecord:
        record = evaluate(model, single_loader, pair_loader, device)
        metrics.append(step, epoch, record)
        TRAINER_LOG.info(
            "epoch %d step %d: %s",
            epoch,
            step,
            evalkit.format_record(record),
        )
        model.train()
        return record

    for epoch in range(1, config.epochs + 1):
        train_data.set_epoch(epoch)
        model.train()
        loss_sum = 0.0
        batches = 0
        for images, labels in train_loader:
            output = model(images.to(device))
            loss = margin_loss(
                output.probabilities,
                one_hot_targets(labels.to(device), NUM_CLASSES),
            )
            loss_value = float(loss.detach())
            if not math.isfinite(loss_value):
                raise NumericError(
                    f"Loss became {loss_value} at epoch {epoch}, step {step + 1}",
                )
            backend.backward(loss)
            backend.adam_step(optimizer)
            step += 1
            loss_sum += loss_value
            batches += 1
            if config.eval_every and step % config.eval_every == 0:
                final = run_eval(epoch)
                last_eval_step = step

        TRAINER_LOG.info(
            "epoch %d mean margin loss %.6f",
            epoch,
            loss_sum / max(batches, 1),
        )
        if last_eval_step != step:
            final = run_eval(epoch)
            last_eval_step = step
        if best_epoch == 0 or (final.sa or 0.0) > (best.sa or 0.0):
            best, best_epoch = final, epoch
            save_checkpoint(
                run.best_checkpoint_path,
                model,
                _checkpoint_extra(run, stats, epoch, step, final),
            )

    save_checkpoint(
        run.final_checkpoint_path,
        model,
        _checkpoint_extra(run, stats, config.epochs, step, final),
    )
    return TrainingSummary(config.epochs, step, best_epoch, best, final)
