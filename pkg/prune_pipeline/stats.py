"""Filter-norm distribution analysis: Gaussian fits, QQ series, histograms."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import polars as pl
import pyarrow as pa
from scipy import special, stats

from . import defaults
from .checkpoint import Checkpoint, conv_weight
from .common import DataFormatError, InputError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FilterNormSet:
    layer_index: int
    norms: np.ndarray

    def __len__(self):
        return len(self.norms)


@dataclass(frozen=True)
class GaussianFit:
    mu: float
    sigma: float
    layer_index: int
    n: int


@dataclass(frozen=True)
class QQSeries:
    theoretical: np.ndarray
    sample: np.ndarray

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.theoretical.tolist(), self.sample.tolist()))


@dataclass(frozen=True)
class QQLinearity:
    slope: float
    intercept: float
    r2: float
    degenerate: bool = False


@dataclass(frozen=True)
class Histogram:
    centers: np.ndarray
    densities: np.ndarray
    width: float

    @property
    def bins(self) -> list[tuple[float, float]]:
        return list(zip(self.centers.tolist(), self.densities.tolist()))


@dataclass(frozen=True)
class LayerDistribution:
    layer_index: int
    name: str
    norms: FilterNormSet
    fit: GaussianFit
    qq: QQSeries
    linearity: Optional[QQLinearity]
    histogram: Histogram


def filter_l1_norms(weight: np.ndarray, layer_index: int = 0) -> FilterNormSet:
    """Sum of absolute entries of each 3-D filter, in filter order."""
    if weight.ndim != 4:
        raise InputError(f"filter_l1_norms expects a 4-D conv weight, got {weight.shape}")
    norms = np.abs(weight.astype(np.float64)).reshape(weight.shape[0], -1).sum(axis=1)
    return FilterNormSet(layer_index, norms)


def fit_gaussian(norms: FilterNormSet) -> GaussianFit:
    """Mean and population standard deviation (two-pass)."""
    x = np.asarray(norms.norms, dtype=np.float64)
    if x.size == 0:
        raise InputError(f"layer {norms.layer_index}: cannot fit an empty norm set")
    if np.all(x == x[0]):
        return GaussianFit(float(x[0]), 0.0, norms.layer_index, x.size)
    mu = x.sum() / x.size
    sigma = np.sqrt(((x - mu) ** 2).sum() / x.size)
    return GaussianFit(float(mu), float(sigma), norms.layer_index, x.size)


def normal_ppf(p):
    """Standard normal inverse CDF."""
    return special.ndtri(p)


def qq_points(norms: FilterNormSet) -> QQSeries:
    x = np.sort(np.asarray(norms.norms, dtype=np.float64))
    n = x.size
    if n == 0:
        raise InputError(f"layer {norms.layer_index}: cannot build a QQ series from no norms")
    # Hazen plotting positions
    positions = (np.arange(1, n + 1) - 0.5) / n
    return QQSeries(normal_ppf(positions), x)


def qq_linearity(series: QQSeries) -> QQLinearity:
    n = len(series.sample)
    if n < 3:
        raise InputError(f"qq_linearity needs at least 3 points, got {n}")
    if np.ptp(series.sample) == 0:
        return QQLinearity(0.0, float(series.sample[0]), 0.0, degenerate=True)
    res = stats.linregress(series.theoretical, series.sample)
    return QQLinearity(float(res.slope), float(res.intercept), float(res.rvalue**2))


def density_histogram(norms, bins: int = defaults.hist_bins) -> Histogram:
    """Equal-width histogram over [min, max], normalized so that
    sum(density * width) == 1."""
    x = np.asarray(getattr(norms, "norms", norms), dtype=np.float64)
    if x.size == 0:
        raise InputError("density_histogram needs at least one value")
    if bins < 1:
        raise InputError(f"bins must be >= 1: {bins}")
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        # unit-width support around a constant sample
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(x, bins=bins, range=(lo, hi))
    width = (hi - lo) / bins
    densities = counts / (x.size * width)
    centers = (edges[:-1] + edges[1:]) / 2
    return Histogram(centers, densities, width)


def analyze_layer(
    ckpt: Checkpoint, layer_index: int, bins: int = defaults.hist_bins
) -> LayerDistribution:
    norms = filter_l1_norms(conv_weight(ckpt, layer_index), layer_index)
    qq = qq_points(norms)
    return LayerDistribution(
        layer_index=layer_index,
        name=ckpt.graph.layers[layer_index].name,
        norms=norms,
        fit=fit_gaussian(norms),
        qq=qq,
        linearity=qq_linearity(qq) if len(norms) >= 3 else None,
        histogram=density_histogram(norms, bins),
    )


def snapshot_distributions(
    ckpt: Checkpoint, bins: int = defaults.hist_bins
) -> list[LayerDistribution]:
    """One record per main-path conv layer."""
    return [analyze_layer(ckpt, i, bins) for i in ckpt.graph.conv_indices()]


def _write_csv(tbl: pa.Table, path: Path):
    try:
        pl.from_arrow(tbl).write_csv(path, line_terminator="\n")
    except OSError as e:
        raise DataFormatError(f"Cannot write '{path}': {e}") from e


def write_distributions(records: list[LayerDistribution], out_dir) -> list[Path]:
    """Writes norms_/qq_/hist_<layer>.csv per layer plus gauss_summary.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for r in records:
        files = {
            f"norms_{r.name}.csv": pa.table(
                {
                    "filter_index": pa.array(np.arange(len(r.norms)), type=pa.int64()),
                    "norm": pa.array(r.norms.norms, type=pa.float64()),
                }
            ),
            f"qq_{r.name}.csv": pa.table(
                {
                    "theoretical": pa.array(r.qq.theoretical, type=pa.float64()),
                    "sample": pa.array(r.qq.sample, type=pa.float64()),
                }
            ),
            f"hist_{r.name}.csv": pa.table(
                {
                    "bin_center": pa.array(r.histogram.centers, type=pa.float64()),
                    "density": pa.array(r.histogram.densities, type=pa.float64()),
                }
            ),
        }
        for filename, tbl in files.items():
            _write_csv(tbl, out_dir.joinpath(filename))
            written.append(out_dir.joinpath(filename))

    lin = [r.linearity for r in records]
    summary = pa.table(
        {
            "layer": pa.array([r.name for r in records], type=pa.string()),
            "n": pa.array([r.fit.n for r in records], type=pa.int64()),
            "mu": pa.array([r.fit.mu for r in records], type=pa.float64()),
            "sigma": pa.array([r.fit.sigma for r in records], type=pa.float64()),
            "qq_slope": pa.array([l and l.slope for l in lin], type=pa.float64()),
            "qq_intercept": pa.array([l and l.intercept for l in lin], type=pa.float64()),
            "r2": pa.array([l and l.r2 for l in lin], type=pa.float64()),
        }
    )
    summary_path = out_dir.joinpath("gauss_summary.csv")
    _write_csv(summary, summary_path)
    written.append(summary_path)
    logger.info("wrote distribution analysis for %d layers to %s", len(records), out_dir)
    return written
