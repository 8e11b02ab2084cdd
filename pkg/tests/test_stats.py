import math
import statistics

import numpy as np
import polars as pl
import pytest

from prune_pipeline import *


def norm_set(values, layer_index=0):
    return FilterNormSet(layer_index, np.asarray(values, dtype=np.float64))


def test_filter_l1_norms():
    w = np.array([[[[1, -2], [3, 0]]], [[[0.5, 0.5], [-0.5, -0.5]]]], dtype=np.float32)
    norms = filter_l1_norms(w, layer_index=4)
    np.testing.assert_allclose(norms.norms, [6.0, 2.0])
    assert norms.layer_index == 4 and norms.norms.dtype == np.float64


def test_filter_l1_norms_needs_conv_weight():
    with pytest.raises(InputError):
        filter_l1_norms(np.ones((3, 3)))


def test_fit_gaussian_uses_population_sigma():
    fit = fit_gaussian(norm_set([1, 2, 3, 4]))
    assert fit.mu == pytest.approx(2.5)
    assert fit.sigma == pytest.approx(np.sqrt(1.25))
    assert fit.n == 4


def test_fit_gaussian_constant_layer_has_zero_sigma():
    fit = fit_gaussian(norm_set([0.1] * 7))
    assert fit.sigma == 0.0
    assert fit.mu == 0.1


def test_fit_gaussian_empty():
    with pytest.raises(InputError):
        fit_gaussian(norm_set([]))


@pytest.mark.parametrize(
    "p,z", [(0.5, 0.0), (0.975, 1.959963984540054), (0.025, -1.959963984540054), (0.8413447460685429, 1.0)]
)
def test_normal_ppf(p, z):
    assert normal_ppf(p) == pytest.approx(z, abs=1e-9)


def test_qq_points_use_hazen_positions():
    qq = qq_points(norm_set([4.0, 1.0, 3.0, 2.0]))
    np.testing.assert_array_equal(qq.sample, [1.0, 2.0, 3.0, 4.0])
    np.testing.assert_allclose(qq.theoretical, normal_ppf(np.array([0.125, 0.375, 0.625, 0.875])))
    assert qq.points[0] == (pytest.approx(normal_ppf(0.125)), 1.0)


def test_qq_linearity_of_exact_gaussian_quantiles():
    n = 64
    z = normal_ppf((np.arange(1, n + 1) - 0.5) / n)
    lin = qq_linearity(qq_points(norm_set(3.0 + 2.0 * z)))
    assert lin.slope == pytest.approx(2.0)
    assert lin.intercept == pytest.approx(3.0)
    assert lin.r2 == pytest.approx(1.0)
    assert not lin.degenerate


def test_qq_linearity_edge_cases():
    with pytest.raises(InputError):
        qq_linearity(qq_points(norm_set([1.0, 2.0])))
    lin = qq_linearity(qq_points(norm_set([5.0] * 4)))
    assert lin.degenerate and lin.slope == 0.0


def test_skewed_sample_is_less_linear():
    rng = np.random.default_rng(0)
    normal = qq_linearity(qq_points(norm_set(rng.normal(size=200))))
    skewed = qq_linearity(qq_points(norm_set(rng.exponential(size=200) ** 3)))
    assert skewed.r2 < normal.r2


@pytest.mark.parametrize("bins", [1, 5, 20])
def test_density_histogram_integrates_to_one(bins):
    x = np.random.default_rng(bins).normal(size=100)
    h = density_histogram(x, bins)
    assert len(h.centers) == bins
    assert float((h.densities * h.width).sum()) == pytest.approx(1.0)
    assert h.centers[0] == pytest.approx(x.min() + h.width / 2)
    assert h.bins[-1] == (h.centers[-1], h.densities[-1])


def test_density_histogram_constant_sample():
    h = density_histogram(norm_set([2.0] * 5), bins=4)
    assert h.width == pytest.approx(0.25)
    assert float((h.densities * h.width).sum()) == pytest.approx(1.0)
    with pytest.raises(InputError):
        density_histogram([], 4)


def test_snapshot_and_write_distributions(tmp_path, toy_graph, make_checkpoint):
    ckpt = make_checkpoint(toy_graph)
    records = snapshot_distributions(ckpt, bins=5)
    assert [r.name for r in records] == ["conv0", "conv1", "conv2"]
    assert [len(r.norms) for r in records] == [8, 16, 32]

    written = write_distributions(records, tmp_path / "analysis")
    assert len(written) == 3 * 3 + 1
    norms = pl.read_csv(tmp_path / "analysis" / "norms_conv1.csv")
    assert norms.columns == ["filter_index", "norm"]
    np.testing.assert_allclose(norms["norm"].to_numpy(), records[1].norms.norms)
    hist = pl.read_csv(tmp_path / "analysis" / "hist_conv2.csv")
    assert hist.columns == ["bin_center", "density"] and hist.height == 5
    summary = pl.read_csv(tmp_path / "analysis" / "gauss_summary.csv")
    assert summary["layer"].to_list() == ["conv0", "conv1", "conv2"]
    assert b"\r\n" not in (tmp_path / "analysis" / "qq_conv0.csv").read_bytes()


def test_resnet_snapshot_skips_projection_convs():
    ckpt = init_params(build("resnet20", input_shape=(3, 8, 8)))
    records = snapshot_distributions(ckpt)
    assert len(records) == 19
    assert sum(len(r.norms) for r in records) == 688


def test_filter_l1_norms_follow_filter_permutation():
    rng = np.random.default_rng(11)
    w = rng.standard_normal((10, 3, 3, 3)).astype(np.float32)
    perm = rng.permutation(10)
    np.testing.assert_array_equal(
        filter_l1_norms(w[perm]).norms, filter_l1_norms(w).norms[perm]
    )


@pytest.mark.parametrize("seed", range(100))
def test_fit_gaussian_matches_two_pass_oracle(seed):
    rng = np.random.default_rng(seed)
    values = rng.lognormal(mean=rng.uniform(-2, 3), sigma=0.5, size=int(rng.integers(2, 300)))
    fit = fit_gaussian(norm_set(values))
    assert fit.mu == pytest.approx(statistics.fmean(values), rel=1e-12)
    assert fit.sigma == pytest.approx(statistics.pstdev(values), rel=1e-10)
    assert fit.n == len(values)


@pytest.mark.parametrize("scale,shift", [(3.0, 0.0), (0.01, 5.0), (-2.0, 1.0), (1.0, -100.0)])
def test_fit_gaussian_translation_and_scale(scale, shift):
    values = np.random.default_rng(5).normal(2.0, 0.7, size=64)
    base = fit_gaussian(norm_set(values))
    moved = fit_gaussian(norm_set(scale * values + shift))
    assert moved.mu == pytest.approx(scale * base.mu + shift, rel=1e-9, abs=1e-9)
    assert moved.sigma == pytest.approx(abs(scale) * base.sigma, rel=1e-9)


def normal_cdf(z):
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def bisect_ppf(p, lo=-40.0, hi=40.0):
    for _ in range(200):
        mid = (lo + hi) / 2
        if normal_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def test_normal_ppf_matches_bisection_on_erf():
    grid = np.linspace(0.001, 0.999, 50)
    got = normal_ppf(grid)
    for p, z in zip(grid, got):
        assert abs(z - bisect_ppf(p)) < 1e-9


def test_qq_quantiles_are_ordered():
    rng = np.random.default_rng(3)
    values = np.concatenate([rng.normal(size=40), [0.5, 0.5, 0.5]])
    qq = qq_points(norm_set(values))
    assert np.all(np.diff(qq.sample) >= 0)
    assert np.all(np.diff(qq.theoretical) > 0)
    assert qq.theoretical[0] == pytest.approx(-qq.theoretical[-1])


@pytest.mark.parametrize("seed,bins", [(0, 1), (1, 7), (2, 30), (3, 100)])
def test_density_histogram_integral_is_tight(seed, bins):
    x = np.random.default_rng(seed).exponential(size=257)
    h = density_histogram(x, bins)
    assert abs(float((h.densities * h.width).sum()) - 1.0) < 1e-9
