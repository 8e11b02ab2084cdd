"""Compression accounting: before/after counters, per-layer detail and
recovery curves, written as summary.json plus CSV files."""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional

import polars as pl
import pyarrow as pa
from great_tables import GT

from . import defaults
from .checkpoint import Checkpoint, conv_weight
from .common import DataFormatError, InputError
from .prune import count_filters, count_flops, count_params
from .stats import filter_l1_norms, fit_gaussian

logger = logging.getLogger(__name__)

KEEP_ALL = "keep-all"


@dataclass(frozen=True)
class ModelSummary:
    accuracy: Optional[float]
    filters: int
    params: int
    flops: int

    @classmethod
    def of(cls, ckpt: Checkpoint) -> "ModelSummary":
        accuracy = ckpt.meta.accuracy
        if accuracy is None:
            accuracy = ckpt.meta.baseline_accuracy
        return cls(
            None if accuracy is None else float(accuracy),
            count_filters(ckpt.graph),
            count_params(ckpt),
            count_flops(ckpt.graph),
        )

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "filters": self.filters,
            "params": self.params,
            "flops": self.flops,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSummary":
        return cls(d["accuracy"], d["filters"], d["params"], d["flops"])


def reduction_pct(base: int, pruned: int) -> float:
    if base == 0:
        return 0.0
    return (base - pruned) / base * 100.0


@dataclass(frozen=True)
class LayerReport:
    layer_index: int
    name: str
    prunable: bool
    original_filters: int
    kept_filters: int
    # None = every filter kept
    accepted_alpha: Optional[float]
    mu: float
    sigma: float
    rollback_events: int = 0
    recovery_curve: tuple[float, ...] = ()
    curve_start: int = 1
    # (alpha, accuracy or None, kept, outcome) per tried alpha, in order
    trials: tuple[tuple, ...] = ()

    @property
    def alpha_label(self) -> str:
        return KEEP_ALL if self.accepted_alpha is None else repr(self.accepted_alpha)

    def to_dict(self) -> dict:
        return {
            "layer_index": self.layer_index,
            "name": self.name,
            "prunable": self.prunable,
            "original_filters": self.original_filters,
            "kept_filters": self.kept_filters,
            "accepted_alpha": self.accepted_alpha,
            "mu": self.mu,
            "sigma": self.sigma,
            "rollback_events": self.rollback_events,
            "recovery_curve": list(self.recovery_curve),
            "curve_start": self.curve_start,
            "trials": [
                {"alpha": a, "accuracy": acc, "kept": k, "outcome": o}
                for a, acc, k, o in self.trials
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerReport":
        return cls(
            layer_index=d["layer_index"],
            name=d["name"],
            prunable=d["prunable"],
            original_filters=d["original_filters"],
            kept_filters=d["kept_filters"],
            accepted_alpha=d["accepted_alpha"],
            mu=d["mu"],
            sigma=d["sigma"],
            rollback_events=d["rollback_events"],
            recovery_curve=tuple(d["recovery_curve"]),
            curve_start=d["curve_start"],
            trials=tuple(
                (t["alpha"], t["accuracy"], t["kept"], t["outcome"]) for t in d["trials"]
            ),
        )


@dataclass(frozen=True)
class PruneReport:
    arch: str
    baseline: ModelSummary
    pruned: ModelSummary
    per_layer: tuple[LayerReport, ...] = field(default_factory=tuple)
    report_version: int = defaults.report_version

    @property
    def reductions(self) -> dict[str, float]:
        return {
            "filters": reduction_pct(self.baseline.filters, self.pruned.filters),
            "params": reduction_pct(self.baseline.params, self.pruned.params),
            "flops": reduction_pct(self.baseline.flops, self.pruned.flops),
        }

    @property
    def reductions_display(self) -> dict[str, str]:
        return {k: f"{v:.2f}%" for k, v in self.reductions.items()}

    def layer(self, name: str) -> LayerReport:
        for r in self.per_layer:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "report_version": self.report_version,
            "arch": self.arch,
            "baseline": self.baseline.to_dict(),
            "pruned": self.pruned.to_dict(),
            "reductions": self.reductions,
            "reductions_display": self.reductions_display,
            "per_layer": [r.to_dict() for r in self.per_layer],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PruneReport":
        return cls(
            arch=d["arch"],
            baseline=ModelSummary.from_dict(d["baseline"]),
            pruned=ModelSummary.from_dict(d["pruned"]),
            per_layer=tuple(LayerReport.from_dict(r) for r in d["per_layer"]),
            report_version=d["report_version"],
        )


def _check_same_arch(baseline: Checkpoint, pruned: Checkpoint):
    a, b = baseline.graph, pruned.graph
    if a.arch != b.arch:
        raise InputError(f"architecture mismatch: '{a.arch}' vs '{b.arch}'")
    layout = lambda g: [(l.name, l.kind, l.kernel, l.stride, l.shortcut) for l in g.layers]
    if layout(a) != layout(b) or a.num_classes != b.num_classes:
        raise InputError(f"'{a.arch}' checkpoints do not share a layer layout")
    for i in a.conv_indices():
        if b.layers[i].out_channels > a.layers[i].out_channels:
            raise InputError(f"{a.layers[i].name}: pruned model has more filters than the baseline")


def summarize(
    baseline: Checkpoint,
    pruned: Checkpoint,
    records: Optional[Mapping[int, object]] = None,
) -> PruneReport:
    """Builds the report for a baseline/pruned checkpoint pair.

    ``records`` maps prunable layer indices to the driver's search records.
    Without them the per-layer detail is derived from the two graphs alone:
    kept counts come from the pruned graph and the Gaussian fit from the
    baseline weights.
    """
    baseline.validate()
    pruned.validate()
    _check_same_arch(baseline, pruned)
    graph = baseline.graph
    if records is not None:
        missing = sorted(set(graph.prunable_indices()) - set(records))
        if missing:
            raise InputError(f"search records missing for prunable layers {missing}")

    per_layer = []
    for i in graph.conv_indices():
        layer = graph.layers[i]
        kept = pruned.graph.layers[i].out_channels
        record = records.get(i) if records is not None else None
        if record is not None:
            decision = record.decision
            per_layer.append(
                LayerReport(
                    layer_index=i,
                    name=layer.name,
                    prunable=layer.prunable,
                    original_filters=record.original_filters,
                    kept_filters=kept,
                    accepted_alpha=None if decision is None else float(decision.alpha),
                    mu=float(record.mu),
                    sigma=float(record.sigma),
                    rollback_events=record.rollback_events,
                    recovery_curve=tuple(float(a) for a in record.curve),
                    curve_start=record.curve_start,
                    trials=tuple(
                        (float(t.alpha), t.accuracy, t.kept, t.outcome) for t in record.trials
                    ),
                )
            )
            continue
        fit = fit_gaussian(filter_l1_norms(conv_weight(baseline, i), i))
        per_layer.append(
            LayerReport(
                layer_index=i,
                name=layer.name,
                prunable=layer.prunable,
                original_filters=layer.out_channels,
                kept_filters=kept,
                accepted_alpha=None,
                mu=float(fit.mu),
                sigma=float(fit.sigma),
            )
        )

    report = PruneReport(
        arch=graph.arch,
        baseline=ModelSummary.of(baseline),
        pruned=ModelSummary.of(pruned),
        per_layer=tuple(per_layer),
    )
    kept_total = sum(r.kept_filters for r in report.per_layer)
    assert kept_total == report.pruned.filters, (kept_total, report.pruned.filters)
    return report


def _write_csv(tbl: pa.Table, path: Path):
    try:
        pl.from_arrow(tbl).write_csv(path, line_terminator="\n")
    except OSError as e:
        raise DataFormatError(f"Cannot write '{path}': {e}") from e


def report_json(report: PruneReport) -> str:
    return json.dumps(report.to_dict(), indent=2, allow_nan=False) + "\n"


def emit(report: PruneReport, out_dir) -> list[Path]:
    """Writes summary.json, layers.csv (prunable layers only) and one
    recovery_<layer>.csv per layer with a recorded recovery curve."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataFormatError(f"Cannot create report dir '{out_dir}': {e}") from e

    written = []
    summary_path = out_dir.joinpath("summary.json")
    try:
        summary_path.write_text(report_json(report), encoding="utf-8", newline="\n")
    except OSError as e:
        raise DataFormatError(f"Cannot write '{summary_path}': {e}") from e
    written.append(summary_path)

    rows = [r for r in report.per_layer if r.prunable]
    layers_tbl = pa.table(
        {
            "layer": pa.array([r.name for r in rows], type=pa.string()),
            "original": pa.array([r.original_filters for r in rows], type=pa.int64()),
            "kept": pa.array([r.kept_filters for r in rows], type=pa.int64()),
            "alpha": pa.array([r.alpha_label for r in rows], type=pa.string()),
        }
    )
    layers_path = out_dir.joinpath("layers.csv")
    _write_csv(layers_tbl, layers_path)
    written.append(layers_path)

    for r in report.per_layer:
        if not r.recovery_curve:
            continue
        n = len(r.recovery_curve)
        curve_tbl = pa.table(
            {
                "epoch": pa.array(range(r.curve_start, r.curve_start + n), type=pa.int64()),
                "accuracy": pa.array(r.recovery_curve, type=pa.float64()),
            }
        )
        path = out_dir.joinpath(f"recovery_{r.name}.csv")
        _write_csv(curve_tbl, path)
        written.append(path)

    logger.info("wrote %d report files to %s", len(written), out_dir)
    return written


def load_report(path) -> PruneReport:
    path = Path(path)
    if path.is_dir():
        path = path.joinpath("summary.json")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DataFormatError(f"Cannot read report '{path}': {e}") from e
    except json.JSONDecodeError as e:
        raise DataFormatError(f"'{path}' is not valid JSON: {e}") from e
    if d.get("report_version") != defaults.report_version:
        raise DataFormatError(
            f"'{path}': unsupported report_version {d.get('report_version')!r}"
        )
    try:
        return PruneReport.from_dict(d)
    except (KeyError, TypeError) as e:
        raise DataFormatError(f"'{path}': malformed report ({e})") from e


def summary_frame(report: PruneReport) -> pl.DataFrame:
    """Before/after table: one row per counter."""
    b, p = report.baseline, report.pruned
    display = report.reductions_display
    return pl.DataFrame(
        {
            "metric": ["accuracy", "filters", "params", "flops"],
            "baseline": [b.accuracy, float(b.filters), float(b.params), float(b.flops)],
            "pruned": [p.accuracy, float(p.filters), float(p.params), float(p.flops)],
            "reduction": [None, display["filters"], display["params"], display["flops"]],
        },
        schema={
            "metric": pl.String,
            "baseline": pl.Float64,
            "pruned": pl.Float64,
            "reduction": pl.String,
        },
    )


def layers_frame(report: PruneReport) -> pl.DataFrame:
    rows = [r for r in report.per_layer if r.prunable]
    return pl.DataFrame(
        {
            "layer": [r.name for r in rows],
            "original": [r.original_filters for r in rows],
            "kept": [r.kept_filters for r in rows],
            "alpha": [r.alpha_label for r in rows],
            "mu": [r.mu for r in rows],
            "sigma": [r.sigma for r in rows],
            "rollbacks": [r.rollback_events for r in rows],
        }
    )


def render_table(report: PruneReport) -> GT:
    return (
        GT(summary_frame(report), rowname_col="metric")
        .tab_header(
            title=f"Pruning summary: {report.arch}",
            subtitle=(
                f"{report.baseline.filters} -> {report.pruned.filters} filters, "
                f"{report.reductions_display['filters']} pruned"
            ),
        )
        .fmt_number(columns=["baseline", "pruned"], rows=[0], decimals=4)
        .fmt_integer(columns=["baseline", "pruned"], rows=[1, 2, 3])
        .cols_label(baseline="Baseline", pruned="Pruned", reduction="Pruned %")
        .sub_missing(missing_text="")
        .opt_stylize(style=2)
    )


def write_html(report: PruneReport, path) -> Path:
    path = Path(path)
    try:
        path.write_text(render_table(report).as_raw_html(), encoding="utf-8")
    except OSError as e:
        raise DataFormatError(f"Cannot write '{path}': {e}") from e
    return path


def with_pruned_model(report: PruneReport, ckpt: Checkpoint) -> PruneReport:
    """Refreshes the pruned-side counters, e.g. after fine-tuning."""
    if ckpt.graph.arch != report.arch:
        raise InputError(f"architecture mismatch: '{report.arch}' vs '{ckpt.graph.arch}'")
    return replace(report, pruned=ModelSummary.of(ckpt))
