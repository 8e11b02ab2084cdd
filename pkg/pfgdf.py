import os
import sys

BLAS_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def blas_thread_env(env) -> dict[str, str]:
    """Thread variables to export: ``PFGDF_THREADS`` for all of them when it
    is valid, otherwise a single thread for each one not already set.
    Conv reductions are bit-reproducible only for a fixed thread count."""
    threads = env.get("PFGDF_THREADS")
    if threads is None:
        return {var: "1" for var in BLAS_THREAD_VARS if var not in env}
    if threads.isdigit() and int(threads) > 0:
        return {var: threads for var in BLAS_THREAD_VARS}
    return {}


# BLAS reads its thread count when numpy is first imported
os.environ.update(blas_thread_env(os.environ))
_threads = os.environ.get("PFGDF_THREADS")

import argparse
import json
import logging
from pathlib import Path
from typing import Optional

import polars as pl

from prune_pipeline import *

logger = logging.getLogger("pfgdf")


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def add_config_args(parser, *names):
    parser.add_argument("--config", help="flat key = value TOML file", default=None)
    flags = {
        "epochs": dict(type=int, help="baseline training epochs"),
        "batch_size": dict(type=int, help="training batch size"),
        "lr": dict(type=float, help="initial learning rate"),
        "seed": dict(type=int, help="seed for init, shuffling and re-init"),
        "snapshot_epochs": dict(help="comma separated epochs to snapshot, 0 = init"),
        "alpha_grid": dict(help="comma separated ascending alpha values"),
        "retrain_epochs": dict(type=int, help="retraining budget per alpha trial"),
        "acceptance_epsilon": dict(type=float, help="allowed accuracy drop"),
        "max_rollbacks": dict(type=int, help="rollbacks allowed per layer"),
        "gate_split": dict(choices=[s.value for s in Split], help="split the gate evaluates on"),
        "finetune_epochs": dict(type=int, help="fine-tuning epochs"),
        "hist_bins": dict(type=int, help="histogram bins"),
        "keep_pruned_weights": dict(
            action="store_const",
            const=True,
            help="keep the copied weights of a pruned layer instead of re-drawing them",
        ),
    }
    for name in names:
        parser.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **flags[name])


TRAIN_FLAGS = ("epochs", "batch_size", "lr", "seed", "snapshot_epochs", "hist_bins")
PRUNE_FLAGS = (
    "epochs",
    "batch_size",
    "lr",
    "seed",
    "alpha_grid",
    "retrain_epochs",
    "acceptance_epsilon",
    "max_rollbacks",
    "gate_split",
    "keep_pruned_weights",
)


def cli(argv=None):
    parser = ArgumentParser(
        prog="pfgdf",
        description="prunes CNN filters outside a Gaussian interval of their L1 norms",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings only, no progress bars")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("train", help="train a baseline model")
    p.add_argument("--arch", required=True, choices=sorted(ARCHITECTURES))
    p.add_argument("--data", default="synth", help="CIFAR-10 binary dir or synth[:key=val,...]")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    add_config_args(p, *TRAIN_FLAGS)

    p = sub.add_parser("analyze", help="filter norm distributions of every conv layer")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True, help="output dir")
    add_config_args(p, "hist_bins")

    p = sub.add_parser("prune", help="layer-by-layer pruning with the accuracy gate")
    p.add_argument("checkpoint", help="baseline checkpoint")
    p.add_argument("--data", default="synth")
    p.add_argument("--out", required=True, help="pruned checkpoint path")
    p.add_argument("--report", required=True, help="report dir", dest="report_dir")
    add_config_args(p, *PRUNE_FLAGS)

    p = sub.add_parser("finetune", help="extra training of a pruned model")
    p.add_argument("checkpoint", help="pruned checkpoint")
    p.add_argument("--data", default="synth")
    p.add_argument("--out", required=True, help="fine-tuned checkpoint path")
    add_config_args(p, "finetune_epochs", "batch_size", "lr", "seed")

    p = sub.add_parser("report", help="compression summary of two checkpoints")
    p.add_argument("baseline")
    p.add_argument("pruned")
    p.add_argument("--out", required=True, help="report dir")
    p.add_argument(
        "--html",
        help="also write summary.html",
        action="store_const",
        const=True,
        default=False,
    )
    add_config_args(p)

    return parser.parse_args(argv)


def resolve_config(args) -> RunConfig:
    overrides = {
        name: getattr(args, name)
        for name in (*PRUNE_FLAGS, *TRAIN_FLAGS, "finetune_epochs")
        if getattr(args, name, None) is not None
    }
    if args.quiet:
        overrides["progress"] = False
    return load_config(args.config, overrides)


def prepare_dir(path) -> Path:
    path = Path(path).absolute()
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataFormatError(f"Cannot create dir '{path}': {e}") from e
    return path


def echo_config(config: RunConfig, *dirs):
    for d in dict.fromkeys(dirs):
        dump_config(config, prepare_dir(d).joinpath("effective_config.toml"))


def open_checkpoint_dataset(ckpt: Checkpoint, spec: str) -> DatasetHandle:
    """Opens ``spec`` normalized with the constants stored in the checkpoint,
    falling back to the dataset's own for checkpoints without them."""
    meta = ckpt.meta
    if meta.norm_mean and meta.norm_std:
        dataset = open_dataset(spec, meta.norm_mean, meta.norm_std)
    else:
        dataset = open_dataset(spec)
    if meta.dataset_id and meta.dataset_id != dataset.id:
        logger.warning(
            "checkpoint was trained on '%s', running on '%s'", meta.dataset_id, dataset.id
        )
    return dataset


def cmd_train(args, config: RunConfig):
    out = Path(args.out).absolute()
    dataset = open_dataset(args.data)
    graph = build(args.arch, dataset.num_classes, dataset.input_shape)
    print(f"Arch: {graph.arch}, {count_filters(graph)} filters")
    print(f"Data: {dataset.id} ({dataset.n_train} train / {dataset.n_eval} eval)")
    snapshot_root = out.parent.joinpath(f"{out.stem}_snapshots")

    def on_snapshot(epoch, records):
        epoch_dir = prepare_dir(snapshot_root.joinpath(f"epoch_{epoch:03d}"))
        write_distributions(records, epoch_dir)

    ckpt = train_baseline(graph, dataset, config, on_snapshot=on_snapshot)
    echo_config(config, out.parent)
    save_checkpoint(ckpt, out)
    print(f"Baseline accuracy: {ckpt.meta.baseline_accuracy:.4f} (epoch {ckpt.meta.epoch})")
    if ckpt.meta.snapshot_epochs:
        print(f"Snapshots: '{snapshot_root}'")
    print(f"Checkpoint: '{out}'")


def cmd_analyze(args, config: RunConfig):
    ckpt = load_checkpoint(args.checkpoint)
    out_dir = prepare_dir(args.out)
    records = snapshot_distributions(ckpt, config.hist_bins)
    written = write_distributions(records, out_dir)
    echo_config(config, out_dir)
    print(f"Layers: {len(records)}, files: {len(written)}")
    print(f"Analysis dir: '{out_dir}'")


def print_report(report: PruneReport):
    with pl.Config(tbl_rows=-1, tbl_hide_dataframe_shape=True):
        print(summary_frame(report))
        print(layers_frame(report))


def cmd_prune(args, config: RunConfig):
    baseline = load_checkpoint(args.checkpoint)
    dataset = open_checkpoint_dataset(baseline, args.data)
    out = Path(args.out).absolute()
    report_dir = prepare_dir(args.report_dir)

    pruned, report = auto_prune(baseline, dataset, config)
    echo_config(config, out.parent, report_dir)
    save_checkpoint(pruned, out)
    emit(report, report_dir)
    print_report(report)
    print(f"Checkpoint: '{out}'")
    print(f"Report dir: '{report_dir}'")


def cmd_finetune(args, config: RunConfig):
    ckpt = load_checkpoint(args.checkpoint)
    dataset = open_checkpoint_dataset(ckpt, args.data)
    out = Path(args.out).absolute()
    final = fine_tune(ckpt, dataset, config)
    echo_config(config, out.parent)
    save_checkpoint(final, out)
    print(f"Accuracy: {final.meta.accuracy}")
    print(f"Checkpoint: '{out}'")


def cmd_report(args, config: RunConfig):
    baseline = load_checkpoint(args.baseline)
    pruned = load_checkpoint(args.pruned)
    report = summarize(baseline, pruned)
    out_dir = prepare_dir(args.out)
    emit(report, out_dir)
    echo_config(config, out_dir)
    print_report(report)
    if args.html:
        print(f"HTML: '{write_html(report, out_dir.joinpath('summary.html'))}'")
    print(f"Report dir: '{out_dir}'")


COMMANDS = {
    "train": cmd_train,
    "analyze": cmd_analyze,
    "prune": cmd_prune,
    "finetune": cmd_finetune,
    "report": cmd_report,
}


def error_line(e: PruneToolkitError) -> str:
    return json.dumps(
        {"error": type(e).__name__, "exit_code": e.exit_code, "message": str(e)}
    )


def main(argv: Optional[list[str]] = None) -> int:
    try:
        if _threads is not None and not (_threads.isdigit() and int(_threads) > 0):
            raise UsageError(f"PFGDF_THREADS must be a positive integer: '{_threads}'")
        args = cli(argv)
        level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        config = resolve_config(args)
        COMMANDS[args.command](args, config)
    except PruneToolkitError as e:
        print(error_line(e), file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
