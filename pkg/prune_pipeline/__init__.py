from .common import *
from .graph import *
from .checkpoint import *
from .stats import *
from .prune import *
from .config import *
from .datasets import *
from .trainer import *
from .report import *
from .driver import *

from typing import Optional


def run_pipeline(
    arch: str,
    dataset: DatasetHandle,
    config: Optional[RunConfig] = None,
    *,
    trainer: Optional[Trainer] = None,
) -> tuple[Checkpoint, Checkpoint, PruneReport]:
    """train -> prune -> fine-tune in one call; returns (baseline, final, report)."""
    config = config or RunConfig()
    trainer = trainer or SgdTrainer()
    graph = build(arch, dataset.num_classes, dataset.input_shape)
    baseline = train_baseline(graph, dataset, config, trainer)
    pruned, report = auto_prune(baseline, dataset, config, trainer)
    final = fine_tune(pruned, dataset, config, trainer)
    return baseline, final, with_pruned_model(report, final)
