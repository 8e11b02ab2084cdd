import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from .checkpoint import Checkpoint
from .common import NonFiniteError, Split, TrainingDiverged
from .config import RunConfig
from .datasets import DatasetHandle
from .layers import Network
from .tensor import SgdState, check_finite, sgd_step, softmax_cross_entropy, step_learning_rate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetrainContext:
    layer_index: int
    alpha: float
    # rollbacks already spent on the layer being resolved
    attempt: int = 0


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    best_accuracy: float
    curve: list[float] = field(default_factory=list)
    diverged: bool = False
    # epoch number of curve[0]; 0 when the gate passed before any training
    curve_start: int = 1


EpochHook = Callable[[int, Checkpoint], None]


class Trainer(ABC):
    @abstractmethod
    def evaluate(self, ckpt: Checkpoint, dataset: DatasetHandle, split=Split.EVAL) -> float:
        ...

    @abstractmethod
    def fit(
        self,
        ckpt: Checkpoint,
        dataset: DatasetHandle,
        config: RunConfig,
        epochs: int,
        *,
        target: Optional[float] = None,
        split=Split.EVAL,
        context: Optional[RetrainContext] = None,
        on_epoch: Optional[EpochHook] = None,
    ) -> TrainResult:
        """Trains for up to ``epochs`` epochs and returns the best checkpoint.

        An evaluation runs before the first epoch. With ``target`` set,
        training stops as soon as the accuracy reaches it; if the initial
        evaluation already does, the curve is that single value, otherwise
        it holds one accuracy per trained epoch.

        Raises ``TrainingDiverged`` on a non-finite loss or gradient.
        """
        ...


class SgdTrainer(Trainer):
    def evaluate(self, ckpt, dataset, split=Split.EVAL, batch_size: int = 256) -> float:
        net = Network(ckpt.graph, ckpt.tensors)
        correct = 0
        total = 0
        for x, y in dataset.batches(split, batch_size):
            logits = net.forward(x, train=False)
            correct += int((logits.argmax(axis=1) == y).sum())
            total += len(y)
        return correct / total if total else 0.0

    def fit(
        self,
        ckpt,
        dataset,
        config,
        epochs,
        *,
        target=None,
        split=Split.EVAL,
        context=None,
        on_epoch=None,
    ):
        split = Split.parse(split)
        net = Network(ckpt.graph, ckpt.tensors)
        state = SgdState(config.lr, config.momentum, config.weight_decay)

        def snapshot(epoch: int) -> Checkpoint:
            return ckpt.with_tensors(net.state()).with_meta(epoch=epoch)

        def evaluate(current: Checkpoint) -> float:
            try:
                return self.evaluate(current, dataset, split, config.eval_batch_size)
            except NonFiniteError as e:
                raise TrainingDiverged(f"evaluation at epoch {current.meta.epoch}: {e}") from e

        best = ckpt
        best_acc = evaluate(ckpt)
        if on_epoch is not None:
            on_epoch(0, ckpt)
        if target is not None and best_acc >= target:
            return TrainResult(best, best_acc, [best_acc], curve_start=0)

        curve = []
        label = "train" if context is None else f"layer {context.layer_index} a={context.alpha:g}"
        bar = tqdm(range(1, epochs + 1), desc=label, leave=False, disable=not config.progress)
        for epoch in bar:
            state.learning_rate = step_learning_rate(
                config.lr,
                epoch - 1,
                epochs,
                config.lr_drop_points,
                config.lr_drop_factor,
            )
            losses = []
            for x, y in dataset.batches(
                Split.TRAIN,
                config.batch_size,
                shuffle=True,
                seed=config.seed,
                epoch=epoch,
            ):
                try:
                    logits = net.forward(x, train=True)
                except NonFiniteError as e:
                    raise TrainingDiverged(f"epoch {epoch}: {e}") from e
                loss, grad = softmax_cross_entropy(logits, y)
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
                net.backward(grad)
                try:
                    params = sgd_step(net.parameters(), net.gradients(), state)
                except NonFiniteError as e:
                    raise TrainingDiverged(f"epoch {epoch}: {e}") from e
                net.set_parameters(params)
                losses.append(loss)
            try:
                check_finite("batchnorm running stats", *net.state().values())
            except NonFiniteError as e:
                raise TrainingDiverged(f"epoch {epoch}: {e}") from e

            current = snapshot(epoch)
            acc = evaluate(current)
            curve.append(acc)
            bar.set_postfix(loss=f"{np.mean(losses):.4f}", acc=f"{acc:.4f}")
            logger.debug("epoch %d: loss=%.4f acc=%.4f", epoch, np.mean(losses), acc)
            if acc > best_acc:
                best, best_acc = current, acc
            if on_epoch is not None:
                on_epoch(epoch, current)
            if target is not None and acc >= target:
                break
        bar.close()
        return TrainResult(best, best_acc, curve)


Script = Union[
    Callable[[Optional[RetrainContext]], Sequence[float]],
    Mapping[tuple[int, float], Sequence[float]],
]


class ScriptedTrainer(Trainer):
    """Replays scripted accuracy curves instead of training, for testing.

    ``script`` maps a ``RetrainContext`` (or ``(layer_index, alpha)``) to the
    curve a real trainer would have produced. The checkpoint passes through
    unchanged and ``evaluate`` reports ``base_accuracy``. Every fit call is
    appended to ``calls``.
    """

    def __init__(self, script: Script, base_accuracy: float = 1.0):
        self.script = script
        self.base_accuracy = base_accuracy
        self.calls: list[Optional[RetrainContext]] = []

    def _curve(self, context) -> list[float]:
        if callable(self.script):
            return list(self.script(context))
        if context is None:
            return [self.base_accuracy]
        return list(self.script[(context.layer_index, context.alpha)])

    def evaluate(self, ckpt, dataset, split=Split.EVAL) -> float:
        return self.base_accuracy

    def fit(
        self,
        ckpt,
        dataset,
        config,
        epochs,
        *,
        target=None,
        split=Split.EVAL,
        context=None,
        on_epoch=None,
    ):
        self.calls.append(context)
        curve = self._curve(context)[: max(epochs, 1)]
        # a first value already at the target stands for the pre-training evaluation
        if target is not None and curve and curve[0] >= target:
            if on_epoch is not None:
                on_epoch(0, ckpt)
            return TrainResult(ckpt, curve[0], curve[:1], curve_start=0)
        if target is not None:
            for i, acc in enumerate(curve):
                if acc >= target:
                    curve = curve[: i + 1]
                    break
        if on_epoch is not None:
            for epoch in range(len(curve)):
                on_epoch(epoch, ckpt)
        best = max(curve) if curve else 0.0
        return TrainResult(ckpt, best, curve)
