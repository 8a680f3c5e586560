import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from camnoise.bootstrap import (
    BootstrapConfig,
    blindspot_denoise,
    blindspot_kernel,
    bootstrap_fit,
    bootstrap_model,
    bootstrap_pairs,
    percentile_filter,
    pseudo_ground_truth,
)
from camnoise.evalbench import NoiseSpec, gen_synthetic, heldout_loglik, smooth_phantom
from camnoise.fitting import FitConfig, fit_gmm
from camnoise.noise_model import GmmNoiseModel, HistogramNoiseModel, gmm_components
from camnoise.stackio import CalibrationPairs, ImageStack, compute_gt, extract_pairs, pairs_from_pseudo_gt

frames = arrays(np.float64, st.tuples(st.integers(2, 9), st.integers(2, 9)),
                elements=st.floats(-1e3, 1e3, allow_nan=False))


def brute_force_blindspot(image, radius):
    H, W = image.shape
    out = np.empty_like(image)
    for i in range(H):
        for j in range(W):
            vals = [image[a, b]
                    for a in range(max(0, i - radius), min(H, i + radius + 1))
                    for b in range(max(0, j - radius), min(W, j + radius + 1))
                    if (a, b) != (i, j)]
            out[i, j] = np.mean(vals)
    return out


class TestBlindspot:
    def test_kernel(self):
        k = blindspot_kernel(2)
        assert k.shape == (5, 5) and k.sum() == 24 and k[2, 2] == 0

    def test_constant_frame(self):
        np.testing.assert_allclose(blindspot_denoise(np.full((7, 5), 42.5), 2), 42.5, rtol=1e-15)

    def test_hot_pixel_removed(self):
        img = np.zeros((9, 9))
        img[4, 4] = 1e6
        out = blindspot_denoise(img, 2)
        assert out[4, 4] == 0.0
        assert out[4, 5] == pytest.approx(1e6 / 24)

    @given(frames, st.integers(1, 3))
    def test_matches_brute_force(self, img, radius):
        np.testing.assert_allclose(blindspot_denoise(img, radius), brute_force_blindspot(img, radius),
                                   rtol=1e-9, atol=1e-9)

    @given(frames, st.floats(-1e3, 1e3), st.data())
    def test_ignores_centre_pixel(self, img, value, data):
        i = data.draw(st.integers(0, img.shape[0] - 1))
        j = data.draw(st.integers(0, img.shape[1] - 1))
        changed = img.copy()
        changed[i, j] = value
        assert blindspot_denoise(changed, 2)[i, j] == pytest.approx(blindspot_denoise(img, 2)[i, j], abs=1e-9)

    def test_beats_noisy_input_on_ramp(self):
        rng = np.random.default_rng(0)
        clean = np.add.outer(np.linspace(100, 200, 64), np.linspace(0, 50, 64))
        noisy = clean + rng.normal(0, 20, clean.shape)
        mse_noisy = np.mean((noisy - clean) ** 2)
        mse_bs = np.mean((blindspot_denoise(noisy, 2) - clean) ** 2)
        assert mse_bs < mse_noisy / 5

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            blindspot_denoise(np.zeros((3, 3, 3)))
        with pytest.raises(ValueError):
            blindspot_denoise(np.zeros((1, 8)))
        with pytest.raises(ValueError):
            blindspot_denoise(np.zeros((8, 8)), radius=0)


class TestPercentileFilter:
    def test_zero_cut_is_identity(self, rng):
        pairs = CalibrationPairs(rng.normal(size=100), rng.normal(size=100))
        assert percentile_filter(pairs, 0.0) is pairs

    def test_drops_tails(self, rng):
        s = rng.permutation(np.arange(1000.0))
        pairs = CalibrationPairs(s, s + 0.5)
        kept = percentile_filter(pairs, 0.005)
        # quantiles 4.995 and 994.005 -> values 0..4 and 995..999 go
        assert len(kept) == 990
        assert kept.signal.min() == 5 and kept.signal.max() == 994
        np.testing.assert_array_equal(kept.observation, kept.signal + 0.5)

    def test_ties_kept(self):
        pairs = CalibrationPairs(np.full(50, 7.0), np.arange(50.0))
        assert len(percentile_filter(pairs, 0.1)) == 50

    @given(arrays(np.float64, st.integers(1, 200), elements=st.floats(-1e6, 1e6)), st.floats(0, 0.49))
    def test_kept_inside_band(self, s, cut):
        kept = percentile_filter(CalibrationPairs(s, s), cut)
        lo, hi = np.quantile(s, [cut, 1 - cut])
        assert np.all((kept.signal >= lo) & (kept.signal <= hi))
        dropped = np.setdiff1d(s, kept.signal)
        assert np.all((dropped < lo) | (dropped > hi))

    @given(st.integers(0, 2**32 - 1), st.integers(50, 2000), st.floats(0.0, 0.2))
    def test_keeps_most_continuous_pairs(self, seed, n, cut):
        s = np.random.default_rng(seed).normal(size=n)
        kept = percentile_filter(CalibrationPairs(s, s), cut)
        # linear interpolation can drop at most one extra order statistic per side
        assert len(kept) >= (1 - 2 * cut) * n - 2
        assert np.all(np.isin(kept.signal, s))

    def test_invalid_cut(self, rng):
        pairs = CalibrationPairs(rng.normal(size=10), rng.normal(size=10))
        for cut in (-0.1, 0.5, 0.7):
            with pytest.raises(ValueError):
                percentile_filter(pairs, cut)


class TestBootstrapPairs:
    def test_alignment(self, rng):
        stack = ImageStack(rng.normal(100, 5, (3, 6, 4)))
        pseudo = pseudo_ground_truth(stack, 1)
        pairs = bootstrap_pairs(stack, pseudo, 0.0)
        assert len(pairs) == stack.data.size
        np.testing.assert_array_equal(pairs.signal.reshape(3, 6, 4), pseudo)
        np.testing.assert_array_equal(pairs.observation.reshape(3, 6, 4), stack.data)

    def test_per_image_cut(self):
        # frame 0 lives at 0..99, frame 1 at 1000..1099; a global cut would only trim frame extremes
        a = np.arange(100.0).reshape(10, 10)
        stack = ImageStack(np.stack([a, a + 1000]))
        pooled = bootstrap_pairs(stack, stack.data, 0.05)
        split = bootstrap_pairs(stack, stack.data, 0.05, per_image=True)
        assert pooled.signal.min() >= 10 and pooled.signal.max() <= 1089
        assert split.signal.min() == 5 and 1000 + 5 in split.signal and 94 in split.signal


class TestBootstrapModel:
    def test_config_defaults_and_validation(self):
        cfg = BootstrapConfig()
        assert (cfg.model_kind, cfg.percentile_cut, cfg.radius) == ("gmm", 0.005, 2)
        for bad in (dict(model_kind="other"), dict(percentile_cut=0.5), dict(radius=0), dict(bins=1)):
            with pytest.raises(ValueError):
                BootstrapConfig(**bad)

    def test_noiseless_constant_stack(self):
        stack = ImageStack(np.full((4, 16, 16), 800.0))
        cfg = BootstrapConfig(fit=FitConfig(n_gaussians=1, n_coeffs=1, iterations=100, batch_size=500))
        model, pseudo = bootstrap_model(stack, cfg)
        assert isinstance(model, GmmNoiseModel)
        np.testing.assert_array_equal(pseudo.data, 800.0)
        assert gmm_components(model, 800.0).sigma2[0] == 50.0

    def test_oracle_pseudo_gt_reduces_to_calibration(self, rng):
        gt = rng.uniform(100, 1000, (16, 16))
        stack = ImageStack(gt + rng.normal(0, 10, (5, 16, 16)))
        oracle = np.broadcast_to(gt, stack.shape)
        fit = FitConfig(n_gaussians=1, n_coeffs=2, iterations=60, batch_size=300, seed=5)
        model, _, _ = bootstrap_fit(stack, BootstrapConfig(percentile_cut=0.0, fit=fit), pseudo_gt=oracle)
        direct = fit_gmm(pairs_from_pseudo_gt(stack, oracle), fit).final_model
        np.testing.assert_array_equal(model.coeffs, direct.coeffs)

    def test_histogram_kind(self, rng):
        stack = ImageStack(rng.normal(500, 20, (3, 20, 20)))
        model, report, pseudo = bootstrap_fit(stack, BootstrapConfig(model_kind="histogram", bins=32))
        assert isinstance(model, HistogramNoiseModel) and report is None
        assert model.min_val == float(stack.data.min()) and model.max_val == float(stack.data.max())
        # unfiltered: every pair contributes
        assert model.bins == 32 and pseudo.shape == stack.shape

    def test_smooth_phantom_single_gaussian(self):
        gt = smooth_phantom(128, 128, 200.0, 2000.0, seed=8)
        stack = gen_synthetic(gt, NoiseSpec("gaussian", sigma=30.0, seed=81), frames=20)
        fit = FitConfig(n_gaussians=1, n_coeffs=1, iterations=1500, batch_size=10_000)
        boot, _ = bootstrap_model(stack, BootstrapConfig(fit=fit))
        assert gmm_components(boot, 1000.0).sigma2[0] == pytest.approx(900.0, rel=0.15)
        calib = fit_gmm(extract_pairs(stack, compute_gt(stack)), fit).final_model
        held = extract_pairs(gen_synthetic(gt, NoiseSpec("gaussian", sigma=30.0, seed=82), frames=3), gt)
        assert abs(heldout_loglik(boot, held) - heldout_loglik(calib, held)) <= 0.1

    def test_recovers_noise_level(self):
        rng = np.random.default_rng(9)
        yy, xx = np.mgrid[0:96, 0:96]
        clean = 500 + 300 * np.sin(xx / 15.0) * np.cos(yy / 20.0)
        stack = ImageStack(clean + rng.normal(0, 25, (8, 96, 96)))
        cfg = BootstrapConfig(fit=FitConfig(n_gaussians=1, n_coeffs=1, iterations=1500, batch_size=10_000))
        model, _ = bootstrap_model(stack, cfg)
        # blind-spot pseudo-GT carries its own error (625/24), so a little above 625
        assert gmm_components(model, 500.0).sigma2[0] == pytest.approx(625.0, rel=0.15)
