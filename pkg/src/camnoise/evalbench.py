"""Synthetic data, ablation of calibration data, and evaluation metrics.

The ablation bench measures how noise models degrade when calibration data
covers less of the signal range or contains fewer pixels. The robustness
metric is the held-out mean log-likelihood of the model in nats per pixel.
"""

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .fitting import FitConfig, fit_gmm
from .noise_model import GmmNoiseModel, gmm_sample, hist_build
from .stackio import CalibrationPairs, GtImage, ImageStack

DEFAULT_FRACTIONS = (1.0, 0.7, 0.5, 0.3, 0.1)
CURVE_COLUMNS = ("fraction", "model_kind", "K", "n", "B", "heldout_ll_nats")


@dataclass(frozen=True)
class NoiseSpec:
    """Synthetic noise process.

    ``kind`` is one of ``"gaussian"`` (uses ``sigma``), ``"poisson_gaussian"``
    (``gain``, ``offset``, ``read_sigma``) or ``"gmm"`` (``model``).
    """

    kind: str = "gaussian"
    sigma: float = 30.0
    gain: float = 1.0
    offset: float = 0.0
    read_sigma: float = 0.0
    model: GmmNoiseModel = None
    seed: int = 0

    def __post_init__(self):
        if self.kind == "gaussian":
            if not self.sigma > 0:
                raise ValueError(f"sigma must be > 0, got {self.sigma}")
        elif self.kind == "poisson_gaussian":
            if not self.gain > 0:
                raise ValueError(f"gain must be > 0, got {self.gain}")
            if self.read_sigma < 0:
                raise ValueError(f"read_sigma must be >= 0, got {self.read_sigma}")
        elif self.kind == "gmm":
            if not isinstance(self.model, GmmNoiseModel):
                raise ValueError("gmm noise needs a GmmNoiseModel")
        else:
            raise ValueError(f"unknown noise kind {self.kind!r}")

    def variance(self, s):
        """Per-pixel noise variance of this noise process (Gaussian and Poisson-Gaussian only)."""
        s = np.asarray(s, dtype=np.float64)
        if self.kind == "gaussian":
            return np.full_like(s, self.sigma**2)
        if self.kind == "poisson_gaussian":
            return self.gain * np.maximum(s - self.offset, 0.0) + self.read_sigma**2
        raise ValueError("variance is only defined for gaussian and poisson_gaussian noise")


def add_noise(signal, spec: NoiseSpec, rng):
    """Draw one noisy observation per element of ``signal``."""
    s = np.asarray(signal.data if isinstance(signal, GtImage) else signal, dtype=np.float64)
    if spec.kind == "gaussian":
        return s + rng.normal(0.0, spec.sigma, size=s.shape)
    if spec.kind == "poisson_gaussian":
        electrons = rng.poisson(np.maximum(s - spec.offset, 0.0) / spec.gain)
        return spec.gain * electrons + spec.offset + rng.normal(0.0, 1.0, size=s.shape) * spec.read_sigma
    return gmm_sample(spec.model, s, rng)


def gen_synthetic(gt, spec: NoiseSpec, frames: int) -> ImageStack:
    """``frames`` independent noisy realisations of a ground-truth image."""
    if frames < 1:
        raise ValueError(f"frames must be >= 1, got {frames}")
    gt = gt.data if isinstance(gt, GtImage) else np.asarray(gt, dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    signal = np.broadcast_to(gt, (frames,) + gt.shape)
    return ImageStack(add_noise(signal, spec, rng))


def synthetic_pairs(signal, spec: NoiseSpec) -> CalibrationPairs:
    rng = np.random.default_rng(spec.seed)
    signal = np.asarray(signal, dtype=np.float64)
    return CalibrationPairs(signal, add_noise(signal, spec, rng))


def smooth_phantom(height=128, width=128, low=200.0, high=2000.0, seed=0) -> GtImage:
    """Sum of broad Gaussian blobs rescaled to ``[low, high]``."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.zeros((height, width))
    for _ in range(6):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        sy, sx = rng.uniform(0.15, 0.35) * height, rng.uniform(0.15, 0.35) * width
        img += rng.uniform(0.5, 1.0) * np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
    img = (img - img.min()) / (img.max() - img.min())
    return GtImage(low + (high - low) * img)


def cell_phantom(height=128, width=128, low=200.0, high=2000.0, n_cells=25, seed=0) -> GtImage:
    """Flat background with sharp-edged elliptical "cells" of random brightness."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.full((height, width), low)
    for _ in range(n_cells):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        ry, rx = rng.uniform(4, 12), rng.uniform(4, 12)
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img[inside] = rng.uniform(low + 0.3 * (high - low), high)
    return GtImage(img)


def heldout_loglik(model, pairs: CalibrationPairs) -> float:
    """Mean ``log p(x|s)`` over the pairs, in nats per pixel."""
    if len(pairs) == 0:
        raise ValueError("no pairs to evaluate")
    return float(np.mean(model.log_pdf(pairs.observation, pairs.signal)))


def split_pairs(pairs: CalibrationPairs, heldout_fraction: float = 0.5, seed: int = 0):
    """Random disjoint ``(train, heldout)`` split."""
    if not 0 < heldout_fraction < 1:
        raise ValueError(f"heldout_fraction must lie in (0, 1), got {heldout_fraction}")
    n = len(pairs)
    perm = np.random.default_rng(seed).permutation(n)
    n_held = int(round(heldout_fraction * n))
    if n_held == 0 or n_held == n:
        raise ValueError(f"cannot split {n} pairs with heldout_fraction={heldout_fraction}")
    return pairs.subset(np.sort(perm[n_held:])), pairs.subset(np.sort(perm[:n_held]))


def _check_fraction(keep_fraction):
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")


def ablate_range(pairs: CalibrationPairs, keep_fraction: float) -> CalibrationPairs:
    """Keep pairs whose signal lies in the lowest ``keep_fraction`` of the signal range."""
    _check_fraction(keep_fraction)
    if keep_fraction == 1:
        return pairs
    threshold = pairs.min_signal + keep_fraction * (pairs.max_signal - pairs.min_signal)
    keep = pairs.signal <= threshold
    if not keep.any():
        raise ValueError("range ablation removed every pair")
    return pairs.subset(keep)


def ablate_count(pairs: CalibrationPairs, keep_fraction: float, seed: int = 0) -> CalibrationPairs:
    """Uniform subsample without replacement of ``ceil(keep_fraction * N)`` pairs (original order kept)."""
    _check_fraction(keep_fraction)
    if keep_fraction == 1:
        return pairs
    size = math.ceil(keep_fraction * len(pairs))
    idx = np.random.default_rng(seed).choice(len(pairs), size=size, replace=False)
    return pairs.subset(np.sort(idx))


@dataclass(frozen=True)
class HistogramSpec:
    bins: int = 256
    pseudo_count: float = 0.0


@dataclass(frozen=True)
class AblationRow:
    fraction: float
    model_kind: str
    K: int
    n: int
    B: int
    heldout_ll_nats: float
    final_nll: float = float("nan")

    def as_csv_row(self):
        k = "" if self.K is None else self.K
        n = "" if self.n is None else self.n
        b = "" if self.B is None else self.B
        return [repr(float(self.fraction)), self.model_kind, k, n, b, repr(float(self.heldout_ll_nats))]


def cell_seed(seed: int, fraction_index: int, config_index: int) -> int:
    """Independent seed for one (fraction, model) cell of the ablation grid."""
    return int(np.random.SeedSequence([seed, fraction_index, config_index]).generate_state(1)[0])


@dataclass
class AblationResult:
    rows: list = field(default_factory=list)

    def lookup(self, fraction, model_kind, K=None, n=None, B=None):
        for row in self.rows:
            if row.fraction == fraction and row.model_kind == model_kind and (K is None or row.K == K) \
                    and (n is None or row.n == n) and (B is None or row.B == B):
                return row
        raise KeyError((fraction, model_kind, K, n, B))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CURVE_COLUMNS)
            for row in self.rows:
                writer.writerow(row.as_csv_row())

    def write_gnuplot(self, path):
        """One whitespace-separated block per model, separated by two blank lines."""
        blocks = {}
        for row in self.rows:
            blocks.setdefault((row.model_kind, row.K, row.n, row.B), []).append(row)
        with open(path, "w") as fh:
            for (kind, K, n, B), rows in blocks.items():
                fh.write(f"# {kind} K={K} n={n} B={B}\n# fraction heldout_ll_nats\n")
                for row in sorted(rows, key=lambda r: r.fraction, reverse=True):
                    fh.write(f"{row.fraction!r} {row.heldout_ll_nats!r}\n")
                fh.write("\n\n")


def histogram_range(heldout: CalibrationPairs):
    lo = min(heldout.min_signal, heldout.min_obs)
    hi = max(heldout.max_signal, heldout.max_obs)
    return lo, (hi if hi > lo else lo + 1.0)


def run_ablation(train: CalibrationPairs, heldout: CalibrationPairs, fractions=DEFAULT_FRACTIONS,
                 model_configs=(FitConfig(), HistogramSpec()), mode="range", seed=0) -> AblationResult:
    """Fit every model config on ablated training data and score it on ``heldout``.

    ``mode`` selects :func:`ablate_range` or :func:`ablate_count`. Each cell
    ``(fraction i, config j)`` uses :func:`cell_seed` ``(seed, i, j)`` for both the
    count subsample and the GMM fit, so the table does not depend on evaluation order.
    Histograms span the held-out data range.
    """
    if mode not in ("range", "count"):
        raise ValueError(f"mode must be 'range' or 'count', got {mode!r}")
    result = AblationResult()
    lo, hi = histogram_range(heldout)
    for i, fraction in enumerate(fractions):
        for j, cfg in enumerate(model_configs):
            cseed = cell_seed(seed, i, j)
            data = ablate_range(train, fraction) if mode == "range" else ablate_count(train, fraction, cseed)
            if isinstance(cfg, HistogramSpec):
                model = hist_build(data, cfg.bins, lo, hi, cfg.pseudo_count)
                row = AblationRow(fraction, "histogram", None, None, cfg.bins, heldout_loglik(model, heldout))
            elif isinstance(cfg, FitConfig):
                report = fit_gmm(data, replace(cfg, seed=cseed))
                ll = heldout_loglik(report.final_model, heldout)
                row = AblationRow(fraction, "gmm", cfg.n_gaussians, cfg.n_coeffs, None, ll, report.final_nll)
            else:
                raise TypeError(f"unsupported model config {cfg!r}")
            result.rows.append(row)
    return result


def psnr(gt, estimate, peak=None) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images.

    ``peak`` defaults to the dynamic range ``max(gt) - min(gt)``.
    """
    gt = np.asarray(gt.data if isinstance(gt, GtImage) else gt, dtype=np.float64)
    estimate = np.asarray(estimate.data if isinstance(estimate, GtImage) else estimate, dtype=np.float64)
    if gt.shape != estimate.shape:
        raise ValueError(f"shape mismatch: {gt.shape} vs {estimate.shape}")
    if peak is None:
        peak = float(gt.max() - gt.min())
    if not peak > 0:
        raise ValueError(f"peak must be > 0, got {peak}")
    mse = float(np.mean((gt - estimate) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)
