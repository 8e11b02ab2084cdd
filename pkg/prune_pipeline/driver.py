"""Layer-by-layer automatic pruning: baseline training, alpha search with an
accuracy gate, rollback of the previous layer, optional fine-tuning."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from tqdm import tqdm

from .checkpoint import Checkpoint, conv_weight, init_params
from .common import DimensionError, InputError, Split, TrainingDiverged
from .config import RunConfig
from .datasets import DatasetHandle
from .graph import ModelGraph
from .prune import PruneDecision, prune_conv_pair, reinit_pruned_layer, select_keep_set
from .report import PruneReport, summarize
from .stats import LayerDistribution, filter_l1_norms, fit_gaussian, snapshot_distributions
from .trainer import RetrainContext, SgdTrainer, Trainer, TrainResult

logger = logging.getLogger(__name__)


@dataclass
class AlphaTrial:
    alpha: float
    # None when no retraining happened (empty interval or nothing removed)
    accuracy: Optional[float]
    kept: int
    outcome: str


@dataclass
class LayerSearchRecord:
    layer_index: int
    name: str
    original_filters: int
    mu: float
    sigma: float
    trials: list[AlphaTrial] = field(default_factory=list)
    # accepted decision; None means the layer is kept whole
    decision: Optional[PruneDecision] = None
    accuracy: Optional[float] = None
    curve: list[float] = field(default_factory=list)
    curve_start: int = 1
    rollback_events: int = 0

    @property
    def pruned(self) -> bool:
        return self.decision is not None

    @property
    def kept_filters(self) -> int:
        return len(self.decision.keep) if self.decision else self.original_filters

    @property
    def exhausted(self) -> bool:
        """Every retrained alpha missed the gate."""
        return not self.pruned and any(
            t.outcome in ("failed", "diverged") for t in self.trials
        )


def gate_threshold(
    baseline: Checkpoint, dataset: DatasetHandle, config: RunConfig, trainer: Trainer
) -> float:
    """Accuracy a pruned model must reach: baseline accuracy on the gate
    split minus the acceptance epsilon."""
    if baseline.meta.baseline_accuracy is None:
        raise InputError("baseline checkpoint has no baseline_accuracy in its meta")
    if Split.parse(config.gate_split) == Split.EVAL:
        reference = baseline.meta.baseline_accuracy
    else:
        reference = trainer.evaluate(baseline, dataset, Split.TRAIN)
    return reference - config.acceptance_epsilon


def train_baseline(
    graph: ModelGraph,
    dataset: DatasetHandle,
    config: RunConfig,
    trainer: Optional[Trainer] = None,
    on_snapshot: Optional[Callable[[int, list[LayerDistribution]], None]] = None,
) -> Checkpoint:
    """Trains from a seeded initialization and returns the best-accuracy
    checkpoint with ``meta.baseline_accuracy`` set. Distribution snapshots are
    taken after each epoch listed in ``config.snapshot_epochs`` (0 = init)."""
    trainer = trainer or SgdTrainer()
    if tuple(graph.input_shape) != dataset.input_shape:
        raise DimensionError("graph input vs dataset", graph.input_shape, dataset.input_shape)
    if graph.num_classes != dataset.num_classes:
        raise InputError(
            f"graph has {graph.num_classes} classes, dataset {dataset.num_classes}"
        )
    ckpt = init_params(graph, config.seed).with_meta(
        dataset_id=dataset.id, norm_mean=dataset.mean, norm_std=dataset.std
    )
    wanted = set(config.snapshot_epochs)
    emitted = []

    def hook(epoch: int, current: Checkpoint):
        if epoch in wanted:
            emitted.append(epoch)
            records = snapshot_distributions(current, config.hist_bins)
            if on_snapshot is not None:
                on_snapshot(epoch, records)

    try:
        result = trainer.fit(
            ckpt, dataset, config, config.epochs, split=Split.EVAL, on_epoch=hook
        )
    except TrainingDiverged as e:
        raise TrainingDiverged(f"baseline training diverged: {e}") from e
    logger.info(
        "baseline accuracy %.4f (epoch %d)", result.best_accuracy, result.checkpoint.meta.epoch
    )
    return result.checkpoint.with_meta(
        baseline_accuracy=result.best_accuracy,
        accuracy=result.best_accuracy,
        snapshot_epochs=tuple(emitted),
    )


def retrain(
    ckpt: Checkpoint,
    dataset: DatasetHandle,
    config: RunConfig,
    trainer: Optional[Trainer] = None,
    *,
    threshold: Optional[float] = None,
    context: Optional[RetrainContext] = None,
) -> TrainResult:
    """Retrains a pruned model for up to ``config.retrain_epochs``, stopping as
    soon as the gate is met. Divergence is reported as accuracy 0."""
    trainer = trainer or SgdTrainer()
    if threshold is None:
        threshold = gate_threshold(ckpt, dataset, config, trainer)
    try:
        return trainer.fit(
            ckpt,
            dataset,
            config,
            config.effective_retrain_epochs,
            target=threshold,
            split=config.gate_split,
            context=context,
        )
    except TrainingDiverged as e:
        logger.warning("retraining diverged (%s): %s", context, e)
        return TrainResult(ckpt, 0.0, [], diverged=True)


def search_layer(
    ckpt: Checkpoint,
    layer_index: int,
    dataset: DatasetHandle,
    config: RunConfig,
    trainer: Optional[Trainer] = None,
    *,
    threshold: Optional[float] = None,
    start: int = 0,
    attempt: int = 0,
) -> tuple[Checkpoint, LayerSearchRecord]:
    """Tries ``config.alpha_grid[start:]`` in ascending order and accepts the
    first alpha whose retrained model passes the gate. Returns the input
    checkpoint unchanged when no alpha passes."""
    trainer = trainer or SgdTrainer()
    if threshold is None:
        threshold = gate_threshold(ckpt, dataset, config, trainer)
    layer = ckpt.graph.layers[layer_index]
    norms = filter_l1_norms(conv_weight(ckpt, layer_index), layer_index)
    fit = fit_gaussian(norms)
    record = LayerSearchRecord(layer_index, layer.name, len(norms), fit.mu, fit.sigma)
    if fit.sigma == 0:
        logger.info("%s: all filter norms equal, keeping all", layer.name)
        return ckpt, record

    for alpha in config.alpha_grid[start:]:
        decision = select_keep_set(norms, fit, alpha)
        if decision.degenerate:
            record.trials.append(AlphaTrial(alpha, None, len(norms), "empty-interval"))
            continue
        if decision.keeps_all:
            # wider intervals keep everything as well
            record.trials.append(AlphaTrial(alpha, None, len(norms), "no-op"))
            break
        pruned = prune_conv_pair(ckpt, layer_index, decision)
        if not config.keep_pruned_weights:
            pruned = reinit_pruned_layer(pruned, layer_index, config.seed)
        result = retrain(
            pruned,
            dataset,
            config,
            trainer,
            threshold=threshold,
            context=RetrainContext(layer_index, alpha, attempt),
        )
        if result.diverged:
            record.trials.append(AlphaTrial(alpha, 0.0, len(decision.keep), "diverged"))
            continue
        acc = result.best_accuracy
        if acc < threshold:
            logger.info(
                "%s alpha=%g: kept %d/%d, acc %.4f < %.4f",
                layer.name,
                alpha,
                len(decision.keep),
                len(norms),
                acc,
                threshold,
            )
            record.trials.append(AlphaTrial(alpha, acc, len(decision.keep), "failed"))
            continue
        record.trials.append(AlphaTrial(alpha, acc, len(decision.keep), "accepted"))
        record.decision = decision
        record.accuracy = acc
        record.curve = list(result.curve)
        record.curve_start = result.curve_start
        logger.info(
            "%s alpha=%g: kept %d/%d, acc %.4f accepted",
            layer.name,
            alpha,
            len(decision.keep),
            len(norms),
            acc,
        )
        accepted = result.checkpoint
        if Split.parse(config.gate_split) == Split.EVAL:
            accepted = accepted.with_meta(accuracy=acc)
        return accepted, record

    logger.info("%s: no alpha recovered accuracy, keeping all filters", layer.name)
    return ckpt, record


@dataclass
class _Visit:
    layer_index: int
    before: Checkpoint
    record: LayerSearchRecord


def auto_prune(
    baseline: Checkpoint,
    dataset: DatasetHandle,
    config: RunConfig,
    trainer: Optional[Trainer] = None,
) -> tuple[Checkpoint, PruneReport]:
    """Prunes every prunable conv from the last to the first.

    When a layer cannot recover at any alpha and the previously visited layer
    was pruned, that layer is moved to its next larger alpha and the current
    layer is searched again, at most ``config.max_rollbacks`` times.
    """
    trainer = trainer or SgdTrainer()
    threshold = gate_threshold(baseline, dataset, config, trainer)
    grid = config.alpha_grid
    order = sorted(baseline.graph.prunable_indices(), reverse=True)
    logger.info("pruning %d layers, gate accuracy %.4f", len(order), threshold)

    ckpt = baseline
    visits: list[_Visit] = []

    def search(state, index, start=0, attempt=0):
        return search_layer(
            state,
            index,
            dataset,
            config,
            trainer,
            threshold=threshold,
            start=start,
            attempt=attempt,
        )

    for index in tqdm(order, desc="layers", disable=not config.progress):
        before = ckpt
        ckpt, record = search(before, index)
        trials = list(record.trials)
        rollbacks = 0
        while record.exhausted and rollbacks < config.max_rollbacks and visits:
            prev = visits[-1]
            if not prev.record.pruned:
                break
            start = grid.index(prev.record.decision.alpha) + 1
            if start >= len(grid):
                break
            rollbacks += 1
            logger.info(
                "rollback %d: %s cannot recover, relaxing %s beyond alpha=%g",
                rollbacks,
                record.name,
                prev.record.name,
                prev.record.decision.alpha,
            )
            prev_ckpt, prev_record = search(prev.before, prev.layer_index, start, rollbacks)
            prev_record.trials = prev.record.trials + prev_record.trials
            prev_record.rollback_events = prev.record.rollback_events
            visits[-1] = _Visit(prev.layer_index, prev.before, prev_record)
            before = prev_ckpt
            ckpt, record = search(before, index, 0, rollbacks)
            trials.extend(record.trials)
        record.trials = trials
        record.rollback_events = rollbacks
        visits.append(_Visit(index, before, record))

    records = {v.layer_index: v.record for v in visits}
    final_accuracy = trainer.evaluate(ckpt, dataset, Split.EVAL)
    pruned = ckpt.with_meta(
        accuracy=final_accuracy,
        baseline_accuracy=baseline.meta.baseline_accuracy,
    )
    report = summarize(baseline, pruned, records)
    logger.info(
        "pruned filters %d -> %d, accuracy %.4f -> %.4f",
        report.baseline.filters,
        report.pruned.filters,
        report.baseline.accuracy or 0.0,
        final_accuracy,
    )
    return pruned, report


def fine_tune(
    ckpt: Checkpoint,
    dataset: DatasetHandle,
    config: RunConfig,
    trainer: Optional[Trainer] = None,
) -> Checkpoint:
    """Extra training of a pruned model for ``config.finetune_epochs``.

    Returns the best checkpoint seen, the input included, so the reported
    accuracy never drops. A diverging run returns the input unchanged.
    """
    trainer = trainer or SgdTrainer()
    if config.finetune_epochs == 0:
        return ckpt
    try:
        result = trainer.fit(ckpt, dataset, config, config.finetune_epochs, split=Split.EVAL)
    except TrainingDiverged as e:
        logger.warning("fine-tuning diverged, keeping the input checkpoint: %s", e)
        return ckpt
    return result.checkpoint.with_meta(accuracy=result.best_accuracy)
