"""Noise models without calibration data.

Each noisy frame is denoised by an estimator that never looks at the pixel it
predicts; the result stands in for the clean signal ("pseudo ground truth").
Pairs of (pseudo-GT, noisy) pixels then feed the usual histogram or GMM
construction. Extreme pseudo-GT values are unreliable, so a small percentile
band at both ends of the signal distribution is dropped first.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .fitting import FitConfig, fit_gmm
from .noise_model import hist_build
from .stackio import CalibrationPairs, ImageStack, pairs_from_pseudo_gt

DEFAULT_PERCENTILE_CUT = 0.005


@dataclass(frozen=True)
class BootstrapConfig:
    """Settings for :func:`bootstrap_model`.

    ``filter_histogram`` applies the percentile cut to histogram bootstraps as well;
    by default only GMM bootstraps are filtered. ``per_image`` computes the cut
    quantiles separately for each frame instead of over the whole stack.
    """

    model_kind: str = "gmm"
    percentile_cut: float = DEFAULT_PERCENTILE_CUT
    radius: int = 2
    bins: int = 256
    fit: FitConfig = field(default_factory=FitConfig)
    filter_histogram: bool = False
    per_image: bool = False

    def __post_init__(self):
        if self.model_kind not in ("gmm", "histogram"):
            raise ValueError(f"model_kind must be 'gmm' or 'histogram', got {self.model_kind!r}")
        if not 0 <= self.percentile_cut < 0.5:
            raise ValueError(f"percentile_cut must lie in [0, 0.5), got {self.percentile_cut}")
        if self.radius < 1:
            raise ValueError(f"radius must be >= 1, got {self.radius}")
        if self.bins < 2:
            raise ValueError(f"bins must be >= 2, got {self.bins}")


def blindspot_kernel(radius: int) -> np.ndarray:
    size = 2 * radius + 1
    kernel = np.ones((size, size))
    kernel[radius, radius] = 0.0
    return kernel


def blindspot_denoise(image, radius: int = 2) -> np.ndarray:
    """Mean of the ``(2r+1)^2`` window around each pixel, leaving out the pixel itself.

    Windows are truncated at the image border.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D frame, got shape {image.shape}")
    if min(image.shape) < 2:
        raise ValueError(f"frame {image.shape} is too small for a blind-spot window")
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    kernel = blindspot_kernel(radius)
    sums = ndimage.correlate(image, kernel, mode="constant", cval=0.0)
    counts = ndimage.correlate(np.ones_like(image), kernel, mode="constant", cval=0.0)
    return sums / counts


def percentile_filter(pairs: CalibrationPairs, cut: float) -> CalibrationPairs:
    """Drop pairs whose signal is strictly outside the ``[cut, 1 - cut]`` quantile band.

    Quantiles interpolate linearly between order statistics.
    """
    if not 0 <= cut < 0.5:
        raise ValueError(f"cut must lie in [0, 0.5), got {cut}")
    if cut == 0:
        return pairs
    lo, hi = np.quantile(pairs.signal, [cut, 1.0 - cut], method="linear")
    keep = (pairs.signal >= lo) & (pairs.signal <= hi)
    if not keep.any():
        raise ValueError("percentile filter removed every pair")
    return pairs.subset(keep)


def pseudo_ground_truth(stack: ImageStack, radius: int) -> np.ndarray:
    """Blind-spot denoise every frame independently; float64, same shape as the stack."""
    return np.stack([blindspot_denoise(frame, radius) for frame in stack.data])


def bootstrap_pairs(stack: ImageStack, pseudo_gt, cut: float, per_image: bool = False) -> CalibrationPairs:
    pseudo_gt = np.asarray(pseudo_gt.data if isinstance(pseudo_gt, ImageStack) else pseudo_gt)
    pairs = pairs_from_pseudo_gt(stack, pseudo_gt)
    if cut == 0:
        return pairs
    if not per_image:
        return percentile_filter(pairs, cut)
    parts = [percentile_filter(CalibrationPairs(pseudo_gt[j], stack.data[j]), cut) for j in range(stack.frames)]
    return CalibrationPairs(
        np.concatenate([p.signal for p in parts]),
        np.concatenate([p.observation for p in parts]),
    )


def bootstrap_model(stack: ImageStack, config: BootstrapConfig = BootstrapConfig(), pseudo_gt=None):
    """Build a noise model from the noisy data alone.

    ``pseudo_gt`` may be supplied (e.g. from an external denoiser) as an array or
    stack aligned frame-for-frame with ``stack``; otherwise it is computed with
    :func:`blindspot_denoise`. Returns ``(model, pseudo_gt_stack)``; use
    :func:`bootstrap_fit` to also get the GMM fit report.
    """
    model, _, pseudo = bootstrap_fit(stack, config, pseudo_gt)
    return model, pseudo


def bootstrap_fit(stack: ImageStack, config: BootstrapConfig = BootstrapConfig(), pseudo_gt=None):
    """Like :func:`bootstrap_model` but also returns the fit report (``None`` for histograms)."""
    if pseudo_gt is None:
        pseudo = pseudo_ground_truth(stack, config.radius)
    else:
        pseudo = np.asarray(pseudo_gt.data if isinstance(pseudo_gt, ImageStack) else pseudo_gt, dtype=np.float64)

    if config.model_kind == "gmm":
        pairs = bootstrap_pairs(stack, pseudo, config.percentile_cut, config.per_image)
        report = fit_gmm(pairs, config.fit)
        model = report.final_model
    else:
        cut = config.percentile_cut if config.filter_histogram else 0.0
        pairs = bootstrap_pairs(stack, pseudo, cut, config.per_image)
        # bin range follows the data to be denoised
        lo, hi = float(stack.data.min()), float(stack.data.max())
        if hi <= lo:
            hi = lo + 1.0
        report = None
        model = hist_build(pairs, config.bins, lo, hi)
    return model, report, ImageStack(pseudo)
