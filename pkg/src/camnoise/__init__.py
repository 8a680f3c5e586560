"""Signal-dependent camera noise models p(x | s).

Histogram and Gaussian-mixture noise models, maximum-likelihood fitting,
bootstrapped models from noisy data alone, MMSE pixel estimation, and a
synthetic-data evaluation bench.
"""

from .bootstrap import BootstrapConfig, blindspot_denoise, bootstrap_fit, bootstrap_model, percentile_filter
from .estimators import BootstrapNoiseEstimator, GmmNoiseEstimator, HistogramNoiseEstimator, MMSEDenoiser
from .evalbench import (
    HistogramSpec,
    NoiseSpec,
    ablate_count,
    ablate_range,
    gen_synthetic,
    heldout_loglik,
    psnr,
    run_ablation,
)
from .exceptions import CamnoiseError, DimensionMismatchError, FormatError, NumericalError
from .fitting import AdamState, FitConfig, FitReport, adam_step, batch_nll, batch_nll_grad, fit_gmm
from .inference import denoise_image, mmse_estimate, patch_prior
from .noise_model import (
    VARIANCE_FLOOR,
    GmmNoiseModel,
    HistogramNoiseModel,
    MixtureComponents,
    gmm_components,
    gmm_eval,
    gmm_log_eval,
    gmm_sample,
    hist_build,
    hist_eval,
    load_model,
    save_model,
)
from .stackio import (
    CalibrationPairs,
    GtImage,
    ImageStack,
    compute_gt,
    extract_pairs,
    load_gt,
    load_stack,
    save_gt,
    save_stack,
)

__version__ = "0.1.0"
