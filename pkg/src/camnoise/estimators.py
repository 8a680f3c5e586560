"""scikit-learn style wrappers.

Noise models are conditional densities, so ``X`` is the clean signal (one
feature) and ``y`` the noisy observation::

    est = GmmNoiseEstimator(n_gaussians=3, n_coeffs=2).fit(signal, observed)
    est.score(signal_test, observed_test)   # mean log p(y | X), nats per pixel

The fitted model object is available as ``model_`` and can be saved with
:func:`camnoise.save_model`.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .bootstrap import DEFAULT_PERCENTILE_CUT, BootstrapConfig, bootstrap_fit
from .fitting import FitConfig, fit_gmm
from .noise_model import VARIANCE_FLOOR, hist_build
from .inference import denoise_image
from .validation import check_signal, check_signal_observation, check_stack


def _seed(random_state):
    if random_state is None:
        return 0
    if isinstance(random_state, (int, np.integer)):
        return int(random_state)
    raise ValueError("random_state must be an int or None; fits are seeded explicitly for reproducibility")


class _NoiseModelMixin:
    """``score_samples``/``score``/``sample`` on top of a fitted ``model_``."""

    def score_samples(self, X, y):
        check_is_fitted(self, "model_")
        pairs = check_signal_observation(X, y)
        return np.asarray(self.model_.log_pdf(pairs.observation, pairs.signal))

    def score(self, X, y):
        return float(np.mean(self.score_samples(X, y)))

    def sample(self, X, random_state=None):
        """One noisy observation per signal value in ``X``."""
        check_is_fitted(self, "model_")
        rng = np.random.default_rng(random_state)
        return self.model_.sample(check_signal(X), rng)


class GmmNoiseEstimator(_NoiseModelMixin, BaseEstimator):
    def __init__(self, n_gaussians=3, n_coeffs=2, variance_floor=VARIANCE_FLOOR, learning_rate=0.1,
                 batch_size=25_000, iterations=4000, init_scale=0.1, random_state=0):
        self.n_gaussians = n_gaussians
        self.n_coeffs = n_coeffs
        self.variance_floor = variance_floor
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.iterations = iterations
        self.init_scale = init_scale
        self.random_state = random_state

    def _fit_config(self):
        return FitConfig(
            n_gaussians=self.n_gaussians, n_coeffs=self.n_coeffs, variance_floor=self.variance_floor,
            learning_rate=self.learning_rate, batch_size=self.batch_size, iterations=self.iterations,
            seed=_seed(self.random_state), init_scale=self.init_scale,
        )

    def fit(self, X, y):
        pairs = check_signal_observation(X, y)
        self.fit_report_ = fit_gmm(pairs, self._fit_config())
        self.model_ = self.fit_report_.final_model
        self.n_features_in_ = 1
        return self


class HistogramNoiseEstimator(_NoiseModelMixin, BaseEstimator):
    """Binned noise model. The bin range defaults to the extrema of the training data."""

    def __init__(self, bins=256, min_val=None, max_val=None, pseudo_count=0.0):
        self.bins = bins
        self.min_val = min_val
        self.max_val = max_val
        self.pseudo_count = pseudo_count

    def fit(self, X, y):
        pairs = check_signal_observation(X, y)
        lo = min(pairs.min_signal, pairs.min_obs) if self.min_val is None else self.min_val
        hi = max(pairs.max_signal, pairs.max_obs) if self.max_val is None else self.max_val
        if hi <= lo and self.max_val is None:
            hi = lo + 1.0
        self.model_ = hist_build(pairs, self.bins, lo, hi, self.pseudo_count)
        self.n_features_in_ = 1
        return self


class BootstrapNoiseEstimator(_NoiseModelMixin, BaseEstimator):
    """Fit a noise model from noisy frames only.

    ``fit`` takes the noisy stack as ``X`` (``(frames, height, width)``). Pass
    ``pseudo_gt`` to use an external denoiser's output instead of the built-in
    blind-spot filter. Scoring and sampling follow the other noise estimators.
    """

    def __init__(self, model_kind="gmm", percentile_cut=DEFAULT_PERCENTILE_CUT, radius=2, bins=256,
                 n_gaussians=3, n_coeffs=2, variance_floor=VARIANCE_FLOOR, learning_rate=0.1,
                 batch_size=25_000, iterations=4000, init_scale=0.1, filter_histogram=False,
                 per_image=False, random_state=0):
        self.model_kind = model_kind
        self.percentile_cut = percentile_cut
        self.radius = radius
        self.bins = bins
        self.n_gaussians = n_gaussians
        self.n_coeffs = n_coeffs
        self.variance_floor = variance_floor
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.iterations = iterations
        self.init_scale = init_scale
        self.filter_histogram = filter_histogram
        self.per_image = per_image
        self.random_state = random_state

    def fit(self, X, y=None, pseudo_gt=None):
        stack = check_stack(X)
        fit_cfg = FitConfig(
            n_gaussians=self.n_gaussians, n_coeffs=self.n_coeffs, variance_floor=self.variance_floor,
            learning_rate=self.learning_rate, batch_size=self.batch_size, iterations=self.iterations,
            seed=_seed(self.random_state), init_scale=self.init_scale,
        )
        config = BootstrapConfig(
            model_kind=self.model_kind, percentile_cut=self.percentile_cut, radius=self.radius,
            bins=self.bins, fit=fit_cfg, filter_histogram=self.filter_histogram, per_image=self.per_image,
        )
        self.model_, self.fit_report_, self.pseudo_gt_ = bootstrap_fit(stack, config, pseudo_gt)
        self.n_features_in_ = 1
        return self


class MMSEDenoiser(TransformerMixin, BaseEstimator):
    """Per-pixel posterior-mean denoiser driven by a noise model and a patch prior.

    ``noise_model`` is a model object (:class:`GmmNoiseModel` or
    :class:`HistogramNoiseModel`) or a fitted noise estimator. ``transform``
    accepts a frame or a stack and returns arrays of the same shape.
    """

    def __init__(self, noise_model=None, radius=2, count=24, random_state=0):
        self.noise_model = noise_model
        self.radius = radius
        self.count = count
        self.random_state = random_state

    def _model(self):
        model = self.noise_model
        if isinstance(model, BaseEstimator):
            check_is_fitted(model, "model_")
            model = model.model_
        if model is None or not hasattr(model, "log_pdf"):
            raise ValueError("MMSEDenoiser needs a noise model")
        return model

    def fit(self, X=None, y=None):
        self.model_ = self._model()
        if self.radius < 1 or self.count < 1:
            raise ValueError("radius and count must be >= 1")
        return self

    def _run(self, X):
        check_is_fitted(self, "model_")
        X = np.asarray(X, dtype=np.float64)
        frames = X[None] if X.ndim == 2 else X
        if frames.ndim != 3:
            raise ValueError(f"expected a frame or a stack, got shape {X.shape}")
        seed = _seed(self.random_state)
        out = [denoise_image(f, self.model_, self.radius, self.count, seed + j) for j, f in enumerate(frames)]
        mmse = np.stack([o[0] for o in out])
        prior = np.stack([o[1] for o in out])
        return (mmse[0], prior[0]) if X.ndim == 2 else (mmse, prior)

    def transform(self, X):
        return self._run(X)[0]

    def prior_mean(self, X):
        """The plain neighbourhood-sample mean, a baseline for :meth:`transform`."""
        return self._run(X)[1]
