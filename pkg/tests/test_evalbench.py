import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from camnoise.evalbench import (
    CURVE_COLUMNS,
    HistogramSpec,
    NoiseSpec,
    ablate_count,
    ablate_range,
    add_noise,
    cell_phantom,
    cell_seed,
    gen_synthetic,
    heldout_loglik,
    psnr,
    run_ablation,
    smooth_phantom,
    split_pairs,
    synthetic_pairs,
)
from camnoise.fitting import FitConfig, batch_nll, fit_gmm
from camnoise.noise_model import HistogramNoiseModel, gmm_sample
from camnoise.stackio import CalibrationPairs, GtImage

from conftest import random_gmm


class TestSynthetic:
    def test_tiny_sigma_reproduces_gt(self):
        gt = smooth_phantom(20, 30, seed=1)
        stack = gen_synthetic(gt, NoiseSpec("gaussian", sigma=1e-9), frames=3)
        # float32 storage limits agreement to single-precision rounding
        np.testing.assert_allclose(stack.data, np.broadcast_to(gt.data, stack.shape), rtol=1e-6)

    def test_gaussian_variance(self):
        stack = gen_synthetic(np.full((50, 50), 1000.0), NoiseSpec("gaussian", sigma=30.0, seed=2), frames=40)
        resid = stack.data.astype(np.float64) - 1000.0
        n = resid.size
        chi2 = np.sum(resid**2) / 900.0
        lo, hi = stats.chi2.ppf([0.0005, 0.9995], n)
        assert lo < chi2 < hi

    def test_per_pixel_variance_follows_chi_square(self):
        # S^2 (m - 1) / sigma^2 ~ chi2(m - 1); with m = 400 about 84% of pixels land within 10% of 900
        m = 400
        stack = gen_synthetic(np.full((60, 60), 800.0), NoiseSpec("gaussian", sigma=30.0, seed=12), frames=m)
        var = stack.data.astype(np.float64).var(axis=0, ddof=1)
        within = np.mean(np.abs(var / 900.0 - 1.0) <= 0.1)
        expected = stats.chi2.cdf(1.1 * (m - 1), m - 1) - stats.chi2.cdf(0.9 * (m - 1), m - 1)
        assert within == pytest.approx(expected, abs=4 * math.sqrt(expected * (1 - expected) / var.size))

    def test_poisson_gaussian_zero_offset(self):
        gt = np.repeat(np.linspace(0, 3000, 16)[None], 8, axis=0)
        stack = gen_synthetic(gt, NoiseSpec("poisson_gaussian", gain=2.0, read_sigma=20.0, seed=13), frames=2000)
        var = stack.data.astype(np.float64).var(axis=0, ddof=1).ravel()
        slope, intercept = np.polyfit(gt.ravel(), var, 1)
        assert slope == pytest.approx(2.0, rel=0.1)
        assert intercept == pytest.approx(400.0, rel=0.1)

    def test_poisson_gaussian_variance_law(self):
        spec = NoiseSpec("poisson_gaussian", gain=2.0, offset=100.0, read_sigma=10.0, seed=3)
        levels = np.linspace(200, 4000, 12)
        pairs = synthetic_pairs(np.repeat(levels, 20_000), spec)
        var = np.array([pairs.observation[pairs.signal == v].var() for v in levels])
        slope, intercept = np.polyfit(levels, var, 1)
        assert slope == pytest.approx(2.0, rel=0.05)
        # intercept read^2 - gain * offset
        assert intercept == pytest.approx(100.0 - 200.0, abs=40.0)
        np.testing.assert_allclose(spec.variance(levels), 2 * (levels - 100) + 100)

    def test_gmm_noise(self, rng):
        model = random_gmm(rng, 2, 2)
        s = np.full(200_000, 1500.0)
        x = add_noise(s, NoiseSpec("gmm", model=model), rng)
        assert x.mean() == pytest.approx(1500.0, abs=1.0)

    def test_seeded(self):
        spec = NoiseSpec("gaussian", sigma=5.0, seed=8)
        a = gen_synthetic(np.ones((4, 4)) * 100, spec, 2)
        b = gen_synthetic(np.ones((4, 4)) * 100, spec, 2)
        np.testing.assert_array_equal(a.data, b.data)

    def test_distinct_seeds(self):
        a = gen_synthetic(np.full((4, 4), 100.0), NoiseSpec("gaussian", sigma=5.0, seed=1), 2)
        b = gen_synthetic(np.full((4, 4), 100.0), NoiseSpec("gaussian", sigma=5.0, seed=2), 2)
        assert not np.array_equal(a.data, b.data)

    def test_phantoms(self):
        for phantom in (smooth_phantom(40, 30, 100.0, 900.0, seed=4), cell_phantom(40, 30, 100.0, 900.0, seed=4)):
            assert isinstance(phantom, GtImage) and phantom.data.shape == (40, 30)
            assert phantom.data.min() >= 100.0 and phantom.data.max() <= 900.0

    @pytest.mark.parametrize("kwargs", [dict(kind="gaussian", sigma=0), dict(kind="poisson_gaussian", gain=0),
                                        dict(kind="gmm"), dict(kind="laplace")])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(ValueError):
            NoiseSpec(**kwargs)


class TestHeldout:
    def test_matches_batch_nll(self, rng):
        model = random_gmm(rng, 3, 2)
        s = rng.uniform(100, 3000, 1000)
        pairs = CalibrationPairs(s, s + rng.normal(0, 20, s.size))
        assert heldout_loglik(model, pairs) == pytest.approx(-batch_nll(model, pairs), rel=1e-12)

    def test_uniform_histogram(self, rng):
        model = HistogramNoiseModel(np.full((8, 8), 1 / 8), 0.0, 400.0)
        pairs = CalibrationPairs(rng.uniform(0, 400, 100), rng.uniform(0, 400, 100))
        assert heldout_loglik(model, pairs) == pytest.approx(-math.log(400.0), rel=1e-12)

    def test_true_model_beats_fitted(self):
        rng = np.random.default_rng(15)
        true = random_gmm(rng, 2, 2, var_low=100, var_high=600)
        s = rng.uniform(100, 3000, 2000)
        small = CalibrationPairs(s, gmm_sample(true, s, rng))
        s = rng.uniform(100, 3000, 500_000)
        held = CalibrationPairs(s, gmm_sample(true, s, rng))
        for seed in range(3):
            fitted = fit_gmm(small, FitConfig(n_gaussians=2, n_coeffs=2, iterations=300, batch_size=2000,
                                              seed=seed)).final_model
            assert heldout_loglik(true, held) >= heldout_loglik(fitted, held)

    def test_split(self, rng):
        pairs = CalibrationPairs(np.arange(100.0), np.arange(100.0) + 1)
        train, held = split_pairs(pairs, 0.3, seed=1)
        assert (len(train), len(held)) == (70, 30)
        assert sorted(np.concatenate([train.signal, held.signal])) == list(np.arange(100.0))
        np.testing.assert_array_equal(held.observation, held.signal + 1)
        with pytest.raises(ValueError):
            split_pairs(pairs, 1.0)


class TestAblation:
    @pytest.fixture
    def pairs(self, rng):
        s = rng.uniform(0, 1000, 20_000)
        return CalibrationPairs(s, s + rng.normal(0, 10, s.size))

    def test_identity(self, pairs):
        assert ablate_range(pairs, 1.0) is pairs
        assert ablate_count(pairs, 1.0) is pairs

    def test_range(self, pairs):
        kept = ablate_range(pairs, 0.3)
        threshold = pairs.min_signal + 0.3 * (pairs.max_signal - pairs.min_signal)
        assert kept.max_signal <= threshold
        assert len(kept) == np.count_nonzero(pairs.signal <= threshold)

    def test_range_half(self, pairs):
        kept = ablate_range(pairs, 0.5)
        mid = 0.5 * (pairs.min_signal + pairs.max_signal)
        assert kept.max_signal <= mid
        assert len(kept) / len(pairs) == pytest.approx(0.5, abs=0.02)

    def test_count(self, pairs):
        for frac in (0.1, 0.25, 0.33333):
            kept = ablate_count(pairs, frac, seed=2)
            assert len(kept) == math.ceil(frac * len(pairs))
            assert np.all(np.isin(kept.signal, pairs.signal))
        np.testing.assert_array_equal(ablate_count(pairs, 0.1, 3).signal, ablate_count(pairs, 0.1, 3).signal)

    def test_count_preserves_distribution(self, rng):
        s = rng.uniform(0, 1000, 1_000_000)
        pairs = CalibrationPairs(s, s)
        kept = ablate_count(pairs, 0.1, seed=4)
        edges = np.linspace(0, 1000, 21)
        p = np.histogram(pairs.signal, edges)[0] / len(pairs)
        q = np.histogram(kept.signal, edges)[0] / len(kept)
        assert 0.5 * np.abs(p - q).sum() < 0.02

    @pytest.mark.parametrize("frac", [0.0, -0.1, 1.5])
    def test_invalid_fraction(self, pairs, frac):
        with pytest.raises(ValueError):
            ablate_range(pairs, frac)
        with pytest.raises(ValueError):
            ablate_count(pairs, frac)


@pytest.fixture(scope="module")
def data():
    s = np.random.default_rng(6).uniform(100, 2000, 20_000)
    pairs = synthetic_pairs(s, NoiseSpec("poisson_gaussian", gain=1.5, read_sigma=8.0, seed=6))
    return split_pairs(pairs, 0.5, seed=6)


class TestRunAblation:
    CONFIGS = (FitConfig(n_gaussians=1, n_coeffs=2, iterations=40, batch_size=500), HistogramSpec(bins=32))

    def test_rows_and_determinism(self, data, tmp_path):
        train, held = data
        a = run_ablation(train, held, (1.0, 0.5), self.CONFIGS, mode="count", seed=1)
        b = run_ablation(train, held, (1.0, 0.5), self.CONFIGS, mode="count", seed=1)
        assert [(r.fraction, r.model_kind) for r in a.rows] == \
            [(1.0, "gmm"), (1.0, "histogram"), (0.5, "gmm"), (0.5, "histogram")]
        assert a.rows == b.rows
        a.write_csv(tmp_path / "a.csv")
        b.write_csv(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        rows = list(csv.reader(open(tmp_path / "a.csv")))
        assert tuple(rows[0]) == CURVE_COLUMNS and len(rows) == 5

    def test_cell_matches_direct_fit(self, data):
        train, held = data
        result = run_ablation(train, held, (1.0,), self.CONFIGS[:1], seed=3)
        direct = fit_gmm(train, replace(self.CONFIGS[0], seed=cell_seed(3, 0, 0))).final_model
        assert result.lookup(1.0, "gmm").heldout_ll_nats == heldout_loglik(direct, held)

    def test_gnuplot(self, data, tmp_path):
        train, held = data
        result = run_ablation(train, held, (1.0, 0.5), self.CONFIGS, mode="range")
        result.write_gnuplot(tmp_path / "c.dat")
        text = (tmp_path / "c.dat").read_text()
        assert text.count("# gmm") == 1 and text.count("# histogram") == 1

    def test_bad_mode(self, data):
        with pytest.raises(ValueError):
            run_ablation(*data, mode="other")


class TestPsnr:
    def test_identical(self, rng):
        img = rng.normal(size=(5, 5))
        assert psnr(img, img) == math.inf

    def test_mse_equals_peak_squared(self):
        gt = np.array([[0.0, 10.0]])
        assert psnr(gt, gt + 10.0) == pytest.approx(0.0, abs=1e-12)

    def test_eight_bit(self):
        gt = np.zeros((10, 10))
        est = np.full((10, 10), math.sqrt(65.025))
        assert psnr(gt, est, peak=255.0) == pytest.approx(30.0, abs=1e-9)

    def test_affine_invariance(self, rng):
        gt = rng.uniform(0, 100, (8, 8))
        est = gt + rng.normal(0, 3, gt.shape)
        assert psnr(3 * gt + 7, 3 * est + 7) == pytest.approx(psnr(gt, est), rel=1e-12)

    def test_affine_invariance_with_peak(self, rng):
        gt = rng.uniform(0, 100, (8, 8))
        est = gt + rng.normal(0, 3, gt.shape)
        assert psnr(-2 * gt + 5, -2 * est + 5, peak=2 * 150.0) == pytest.approx(psnr(gt, est, peak=150.0), rel=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.ones((2, 2)))
