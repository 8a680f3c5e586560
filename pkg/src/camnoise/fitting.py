"""Maximum-likelihood fitting of GMM noise models with mini-batch ADAM.

The objective is the batch-mean negative log-likelihood of the observations
given their signals. Gradients are analytic. Below the variance floor the
variance polynomial receives zero gradient (the subgradient of ``max``).

Internally ADAM works on a rescaled copy of the coefficients. The mean block
is measured in units of ``STEP_FRACTION`` residual standard deviations and the
variance block in units of ``STEP_FRACTION`` residual variances (from a probe
sample), so one step of size 0.1 moves every block by a comparable amount
relative to the data. The stored model always carries unscaled coefficients.
"""

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import NumericalError
from .noise_model import VARIANCE_FLOOR, GmmNoiseModel, component_log_terms, logsumexp_rows
from .stackio import CalibrationPairs

logger = logging.getLogger(__name__)

PROBE_SIZE = 10_000
STEP_FRACTION = 0.1


@dataclass(frozen=True)
class FitConfig:
    n_gaussians: int = 3
    n_coeffs: int = 2
    variance_floor: float = VARIANCE_FLOOR
    learning_rate: float = 0.1
    batch_size: int = 25_000
    iterations: int = 4000
    seed: int = 0
    init_scale: float = 0.1
    checkpoint_every: int = 10

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.n_gaussians < 1 or self.n_coeffs < 1:
            raise ValueError("n_gaussians and n_coeffs must be >= 1")
        if not self.variance_floor > 0:
            raise ValueError(f"variance_floor must be > 0, got {self.variance_floor}")
        if self.init_scale < 0:
            raise ValueError(f"init_scale must be >= 0, got {self.init_scale}")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size, **kwargs):
        return cls(np.zeros(size), np.zeros(size), **kwargs)


@dataclass
class FitReport:
    """Outcome of one fit. ``nll_trace`` holds ``(iteration, mean NLL)`` checkpoints."""

    final_model: GmmNoiseModel
    config: FitConfig
    nll_trace: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def final_nll(self) -> float:
        return self.nll_trace[-1][1]

    def write_trace_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "mean_nll"])
            for it, nll in self.nll_trace:
                writer.writerow([it, repr(float(nll))])

    def to_dict(self):
        return {
            "config": asdict(self.config),
            "final_nll": self.final_nll,
            "wall_time": self.wall_time,
            "min_signal": self.final_model.min_signal,
            "max_signal": self.final_model.max_signal,
            "coeffs": self.final_model.coeffs.tolist(),
        }


def _as_arrays(batch):
    if isinstance(batch, CalibrationPairs):
        return batch.signal, batch.observation
    s, x = batch
    s = np.asarray(s, dtype=np.float64).ravel()
    x = np.asarray(x, dtype=np.float64).ravel()
    if s.shape != x.shape:
        raise ValueError("signal and observation batches differ in length")
    return s, x


def _nll_and_grad(model: GmmNoiseModel, s, x, need_grad=True):
    if s.size == 0:
        raise ValueError("empty batch")
    terms, cache = component_log_terms(model, x, s)
    log_p = logsumexp_rows(terms, keepdims=True)
    # np.sum uses pairwise summation in a fixed order, so reductions are deterministic
    nll = -float(np.sum(log_p)) / s.size
    if not need_grad:
        return nll, None

    r = np.exp(terms - log_p)
    alpha, gm, gv = cache["alpha"], cache["gm"], cache["gv"]
    sigma2, resid, V = cache["sigma2"], cache["resid"], cache["V"]

    q = r * resid / sigma2
    q_tot = q.sum(axis=1, keepdims=True)
    mean_offset = np.sum(alpha * gm, axis=1, keepdims=True)

    d_gw = r - alpha - alpha * q_tot * (gm - mean_offset)
    d_gm = q - alpha * q_tot
    d_gv = np.where(gv > model.variance_floor, 0.5 * r * (resid**2 / sigma2 - 1.0) / sigma2, 0.0)

    # d(log-likelihood)/d(coeff[k, j]) = sum_i d_g[i, k] * V[i, j]; negate for the NLL
    grad = -np.concatenate([(d.T @ V).ravel() for d in (d_gw, d_gm, d_gv)]) / s.size
    return nll, grad


def batch_nll(model: GmmNoiseModel, batch) -> float:
    """Mean negative log-likelihood of a batch of (signal, observation) pairs."""
    s, x = _as_arrays(batch)
    return _nll_and_grad(model, s, x, need_grad=False)[0]


def batch_nll_grad(model: GmmNoiseModel, batch) -> np.ndarray:
    """Analytic gradient of :func:`batch_nll` with respect to ``model.coeffs``."""
    s, x = _as_arrays(batch)
    return _nll_and_grad(model, s, x)[1]


def adam_step(state: AdamState, params, grad, lr):
    """One bias-corrected ADAM update. Returns ``(new_params, new_state)``; inputs are not modified."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ValueError(f"length mismatch: params {params.shape}, grad {grad.shape}, state {state.m.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad**2
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


def signal_range(pairs: CalibrationPairs):
    """Polynomial normalisation range; a constant-signal data set gets a unit-width range."""
    lo, hi = pairs.min_signal, pairs.max_signal
    if hi <= lo:
        hi = lo + 1.0
    return lo, hi


def init_model(pairs: CalibrationPairs, config: FitConfig, rng):
    """Random starting model plus the per-coefficient scale used by the optimiser.

    Returns ``(model, scale)``: ``model.coeffs = theta * scale`` with ``theta`` the
    optimiser's variables.
    """
    K, n, c = config.n_gaussians, config.n_coeffs, config.variance_floor
    probe = rng.integers(0, len(pairs), size=min(PROBE_SIZE, len(pairs)))
    resid_var = float(np.var(pairs.observation[probe] - pairs.signal[probe]))

    scale = np.ones((3, K, n))
    scale[1] = STEP_FRACTION * np.sqrt(max(resid_var, c))
    scale[2] = STEP_FRACTION * max(resid_var, c)

    theta = rng.uniform(-config.init_scale, config.init_scale, size=(3, K, n))
    theta[2, :, 0] = (c + 2.0 * resid_var) / scale[2, :, 0]
    lo, hi = signal_range(pairs)
    model = GmmNoiseModel(K, n, (theta * scale).ravel(), lo, hi, c)
    return model, scale.ravel()


def fit_gmm(pairs: CalibrationPairs, config: FitConfig = FitConfig()) -> FitReport:
    """Fit a GMM noise model by mini-batch ADAM on the mean negative log-likelihood.

    Batches are drawn uniformly with replacement. The run is fully determined by
    ``(pairs, config)``.
    """
    if len(pairs) == 0:
        raise ValueError("no calibration pairs")
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    model, scale = init_model(pairs, config, rng)
    theta = model.coeffs / scale
    state = AdamState.zeros(theta.size)
    signal, obs = pairs.signal, pairs.observation
    trace = []

    for it in range(1, config.iterations + 1):
        idx = rng.integers(0, len(pairs), size=config.batch_size)
        nll, grad = _nll_and_grad(model, signal[idx], obs[idx])
        if not np.isfinite(nll) or not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite objective at iteration {it}", iteration=it)
        if it == 1 or it % config.checkpoint_every == 0:
            trace.append((it - 1, nll))
        theta, state = adam_step(state, theta, grad * scale, config.learning_rate)
        with np.errstate(over="ignore"):
            finite = np.all(np.isfinite(theta * scale))
        if not finite:
            raise NumericalError(f"coefficients diverged at iteration {it}", iteration=it)
        model = model.with_coeffs(theta * scale)

    final_idx = rng.integers(0, len(pairs), size=config.batch_size)
    final_nll = _nll_and_grad(model, signal[final_idx], obs[final_idx], need_grad=False)[0]
    if not np.isfinite(final_nll):
        raise NumericalError("non-finite objective after the last step", iteration=config.iterations)
    trace.append((config.iterations, final_nll))
    elapsed = time.perf_counter() - start
    logger.info("fit K=%d n=%d: final NLL %.5f after %d iterations (%.1fs)",
                config.n_gaussians, config.n_coeffs, final_nll, config.iterations, elapsed)
    return FitReport(model, config, trace, elapsed)
