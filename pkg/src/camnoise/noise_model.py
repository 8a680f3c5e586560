"""Conditional noise densities p(x | s): a binned histogram table and a signal-dependent GMM.

GMM parameterisation
--------------------
Each of the ``K`` components has three polynomials in the normalised signal
``t = (s - min_signal) / (max_signal - min_signal)``, each with ``n`` coefficients
(lowest degree first):

* ``g_w[k](t)``  -> weights   ``alpha = softmax_k(g_w)``
* ``g_m[k](t)``  -> means     ``mu_k = s + g_m[k] - sum_j alpha_j g_m[j]``
* ``g_v[k](t)``  -> variances ``sigma2_k = max(g_v[k], c)``

The coefficient vector is stored as ``[weights | means | variances]``, each block
``K`` rows of ``n`` coefficients, so its length is ``3 * K * n``. Because of the
centering term the mixture mean is exactly ``s`` for every signal.

Both model files share the NMDL container (little-endian)::

    b"NMDL"  u8 version(=1)  u8 kind (0 histogram, 1 GMM)
    histogram: u32 B, f64 min_val, f64 max_val, B*B f64 row-major table
    GMM:       u32 K, u32 n, f64 min_signal, f64 max_signal, f64 c, 3*K*n f64 coefficients
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write_bytes
from .exceptions import FormatError
from .stackio import CalibrationPairs

VARIANCE_FLOOR = 50.0

NMDL_MAGIC = b"NMDL"
NMDL_VERSION = 1
KIND_HISTOGRAM = 0
KIND_GMM = 1

_LOG_2PI = math.log(2.0 * math.pi)
_PREFIX = struct.Struct("<4sBB")
_HIST_HEADER = struct.Struct("<Idd")
_GMM_HEADER = struct.Struct("<IIddd")


def logsumexp_rows(a, keepdims=False):
    """Stable ``log(sum(exp(a), axis=-1))`` for finite ``a``."""
    top = a.max(axis=-1, keepdims=True)
    out = top + np.log(np.exp(a - top).sum(axis=-1, keepdims=True))
    return out if keepdims else out[..., 0]


def _readonly(arr):
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Histogram model
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HistogramNoiseModel:
    """``B x B`` table; row ``i`` is the distribution of observation bins given signal bin ``i``.

    Signal and observation share the bin edges spanning ``[min_val, max_val]``.
    """

    table: np.ndarray
    min_val: float
    max_val: float

    def __post_init__(self):
        table = _readonly(self.table)
        if table.ndim != 2 or table.shape[0] != table.shape[1]:
            raise ValueError(f"histogram table must be square, got shape {table.shape}")
        if table.shape[0] < 2:
            raise ValueError("histogram needs at least 2 bins")
        if not np.all(np.isfinite(table)) or np.any(table < 0):
            raise ValueError("histogram entries must be finite and nonnegative")
        if not (math.isfinite(self.min_val) and math.isfinite(self.max_val)) or self.max_val <= self.min_val:
            raise ValueError(f"invalid histogram range [{self.min_val}, {self.max_val}]")
        object.__setattr__(self, "table", table)
        object.__setattr__(self, "min_val", float(self.min_val))
        object.__setattr__(self, "max_val", float(self.max_val))

    @property
    def bins(self) -> int:
        return self.table.shape[0]

    @property
    def bin_width(self) -> float:
        return (self.max_val - self.min_val) / self.bins

    def bin_index(self, v):
        """Bin of each value; values outside the range land in the edge bins."""
        idx = np.floor((np.asarray(v, dtype=np.float64) - self.min_val) / self.bin_width)
        return np.clip(idx, 0, self.bins - 1).astype(np.intp)

    def pdf(self, x, s):
        return hist_eval(self, x, s)

    def log_pdf(self, x, s):
        # unseen (signal bin, observation bin) cells have zero density
        with np.errstate(divide="ignore"):
            return np.log(hist_eval(self, x, s))

    def sample(self, s, rng):
        return hist_sample(self, s, rng)


def hist_build(pairs: CalibrationPairs, bins: int, min_val: float, max_val: float,
               pseudo_count: float = 0.0) -> HistogramNoiseModel:
    """Count pairs into a ``bins x bins`` table and normalise each signal row.

    Rows that receive no counts become uniform. ``pseudo_count`` is added to every
    cell before normalising (additive smoothing); the default 0 keeps raw frequencies.
    """
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    if not max_val > min_val:
        raise ValueError(f"max_val ({max_val}) must exceed min_val ({min_val})")
    if len(pairs) == 0:
        raise ValueError("no calibration pairs")
    if pseudo_count < 0:
        raise ValueError(f"pseudo_count must be >= 0, got {pseudo_count}")
    width = (max_val - min_val) / bins

    def index(v):
        return np.clip(np.floor((v - min_val) / width), 0, bins - 1).astype(np.intp)

    flat = index(pairs.signal) * bins + index(pairs.observation)
    counts = np.bincount(flat, minlength=bins * bins).reshape(bins, bins) + float(pseudo_count)
    totals = counts.sum(axis=1, keepdims=True)
    table = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 1.0 / bins)
    return HistogramNoiseModel(table, min_val, max_val)


def hist_eval(model: HistogramNoiseModel, x, s):
    """Density ``table[bin(s), bin(x)] / bin_width``; inputs are clamped to the edge bins."""
    x, s = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(s, dtype=np.float64))
    out = model.table[model.bin_index(s), model.bin_index(x)] / model.bin_width
    return out if out.ndim else float(out)


def hist_sample(model: HistogramNoiseModel, s, rng):
    """Draw an observation bin from the row of ``s``, then a uniform position inside the bin."""
    s = np.asarray(s, dtype=np.float64)
    rows = model.table[model.bin_index(s).ravel()]
    cdf = np.cumsum(rows, axis=1)
    u = rng.random(rows.shape[0]) * cdf[:, -1]
    col = np.minimum((cdf < u[:, None]).sum(axis=1), model.bins - 1)
    x = model.min_val + (col + rng.random(rows.shape[0])) * model.bin_width
    return x.reshape(s.shape) if s.ndim else float(x[0])


# ---------------------------------------------------------------------------
# GMM model
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MixtureComponents:
    """Per-signal mixture parameters; each array has shape ``signal.shape + (K,)``."""

    alpha: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray


@dataclass(frozen=True, eq=False)
class GmmNoiseModel:
    n_gaussians: int
    n_coeffs: int
    coeffs: np.ndarray
    min_signal: float
    max_signal: float
    variance_floor: float = VARIANCE_FLOOR

    def __post_init__(self):
        K, n = int(self.n_gaussians), int(self.n_coeffs)
        if K < 1 or n < 1:
            raise ValueError(f"need n_gaussians >= 1 and n_coeffs >= 1, got K={K}, n={n}")
        coeffs = _readonly(self.coeffs).ravel()
        if coeffs.size != 3 * K * n:
            raise ValueError(f"expected {3 * K * n} coefficients for K={K}, n={n}, got {coeffs.size}")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("coefficients must be finite")
        if not self.variance_floor > 0:
            raise ValueError(f"variance floor must be positive, got {self.variance_floor}")
        if not (math.isfinite(self.min_signal) and math.isfinite(self.max_signal)) or self.max_signal <= self.min_signal:
            raise ValueError(f"invalid signal range [{self.min_signal}, {self.max_signal}]")
        coeffs.setflags(write=False)
        object.__setattr__(self, "n_gaussians", K)
        object.__setattr__(self, "n_coeffs", n)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "min_signal", float(self.min_signal))
        object.__setattr__(self, "max_signal", float(self.max_signal))
        object.__setattr__(self, "variance_floor", float(self.variance_floor))

    @property
    def blocks(self):
        """``(weight, mean, variance)`` coefficient matrices, each ``(K, n)``."""
        return tuple(self.coeffs.reshape(3, self.n_gaussians, self.n_coeffs))

    def with_coeffs(self, coeffs):
        return GmmNoiseModel(self.n_gaussians, self.n_coeffs, coeffs, self.min_signal,
                             self.max_signal, self.variance_floor)

    def components(self, s):
        return gmm_components(self, s)

    def pdf(self, x, s):
        return gmm_eval(self, x, s)

    def log_pdf(self, x, s):
        return gmm_log_eval(self, x, s)

    def sample(self, s, rng):
        return gmm_sample(self, s, rng)


def poly_features(model: GmmNoiseModel, s):
    """Vandermonde matrix ``(N, n)`` of the normalised signal for flat ``s``."""
    t = (np.asarray(s, dtype=np.float64).ravel() - model.min_signal) / (model.max_signal - model.min_signal)
    return np.vander(t, model.n_coeffs, increasing=True)


def raw_polynomials(model: GmmNoiseModel, s):
    """Evaluate the weight, mean and variance polynomials; each result is ``(N, K)``."""
    V = poly_features(model, s)
    w, m, v = model.blocks
    # (K, N) products viewed as (N, K): reductions over K then run over contiguous rows
    return V, (w @ V.T).T, (m @ V.T).T, (v @ V.T).T


def _components_flat(model, s):
    s = np.asarray(s, dtype=np.float64).ravel()
    V, gw, gm, gv = raw_polynomials(model, s)
    log_alpha = gw - logsumexp_rows(gw, keepdims=True)
    alpha = np.exp(log_alpha)
    mean_offset = np.sum(alpha * gm, axis=1, keepdims=True)
    mu = s[:, None] + (gm - mean_offset)
    sigma2 = np.maximum(gv, model.variance_floor)
    return V, gw, gm, gv, log_alpha, alpha, mu, sigma2


def gmm_components(model: GmmNoiseModel, s) -> MixtureComponents:
    """Mixture weights, means and clamped variances at signal(s) ``s``.

    Signals outside the fitted range are evaluated by polynomial extrapolation.
    """
    s = np.asarray(s, dtype=np.float64)
    *_, alpha, mu, sigma2 = _components_flat(model, s)
    shape = s.shape + (model.n_gaussians,)
    return MixtureComponents(alpha.reshape(shape), mu.reshape(shape), sigma2.reshape(shape))


def component_log_terms(model, x, s):
    """Per-component ``log alpha_k + log N(x; mu_k, sigma2_k)`` for flat, equal-length ``x``, ``s``.

    Returns the terms together with the intermediates the gradient needs.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    V, gw, gm, gv, log_alpha, alpha, mu, sigma2 = _components_flat(model, s)
    resid = x[:, None] - mu
    terms = log_alpha - 0.5 * (_LOG_2PI + np.log(sigma2)) - 0.5 * resid**2 / sigma2
    return terms, dict(V=V, gm=gm, gv=gv, alpha=alpha, sigma2=sigma2, resid=resid)


def gmm_log_eval(model: GmmNoiseModel, x, s):
    """``log p(x | s)`` via log-sum-exp over components; finite for finite inputs."""
    x, s = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(s, dtype=np.float64))
    terms, _ = component_log_terms(model, x, s)
    out = logsumexp_rows(terms).reshape(x.shape)
    return out if out.ndim else float(out)


def gmm_eval(model: GmmNoiseModel, x, s):
    out = np.exp(gmm_log_eval(model, x, s))
    return out if np.ndim(out) else float(out)


def gmm_sample(model: GmmNoiseModel, s, rng):
    """Ancestral sampling: pick component ``k`` with probability ``alpha_k(s)``, then draw from it."""
    s = np.asarray(s, dtype=np.float64)
    comp = gmm_components(model, s.ravel())
    cdf = np.cumsum(comp.alpha, axis=1)
    u = rng.random(s.size) * cdf[:, -1]
    k = np.minimum((cdf < u[:, None]).sum(axis=1), model.n_gaussians - 1)
    rows = np.arange(s.size)
    x = comp.mu[rows, k] + np.sqrt(comp.sigma2[rows, k]) * rng.standard_normal(s.size)
    return x.reshape(s.shape) if s.ndim else float(x[0])


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------


def encode_model(model) -> bytes:
    if isinstance(model, HistogramNoiseModel):
        head = _PREFIX.pack(NMDL_MAGIC, NMDL_VERSION, KIND_HISTOGRAM)
        head += _HIST_HEADER.pack(model.bins, model.min_val, model.max_val)
        return head + model.table.astype("<f8").tobytes(order="C")
    if isinstance(model, GmmNoiseModel):
        head = _PREFIX.pack(NMDL_MAGIC, NMDL_VERSION, KIND_GMM)
        head += _GMM_HEADER.pack(model.n_gaussians, model.n_coeffs, model.min_signal,
                                 model.max_signal, model.variance_floor)
        return head + model.coeffs.astype("<f8").tobytes()
    raise TypeError(f"cannot serialise {type(model).__name__}")


def decode_model(buf: bytes):
    if len(buf) < _PREFIX.size:
        raise FormatError("NMDL file too short")
    magic, version, kind = _PREFIX.unpack_from(buf)
    if magic != NMDL_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {NMDL_MAGIC!r}")
    if version != NMDL_VERSION:
        raise FormatError(f"unsupported NMDL version {version}")
    body = buf[_PREFIX.size:]
    try:
        if kind == KIND_HISTOGRAM:
            if len(body) < _HIST_HEADER.size:
                raise FormatError("truncated histogram header")
            bins, lo, hi = _HIST_HEADER.unpack_from(body)
            payload = body[_HIST_HEADER.size:]
            if len(payload) != bins * bins * 8:
                raise FormatError(f"histogram payload is {len(payload)} bytes, expected {bins * bins * 8}")
            table = np.frombuffer(payload, dtype="<f8").reshape(bins, bins)
            return HistogramNoiseModel(table, lo, hi)
        if kind == KIND_GMM:
            if len(body) < _GMM_HEADER.size:
                raise FormatError("truncated GMM header")
            K, n, lo, hi, c = _GMM_HEADER.unpack_from(body)
            payload = body[_GMM_HEADER.size:]
            if len(payload) != 3 * K * n * 8:
                raise FormatError(f"GMM payload is {len(payload)} bytes, expected {3 * K * n * 8}")
            return GmmNoiseModel(K, n, np.frombuffer(payload, dtype="<f8"), lo, hi, c)
    except FormatError:
        raise
    except ValueError as exc:
        raise FormatError(f"invalid model contents: {exc}") from exc
    raise FormatError(f"unknown model kind {kind}")


def save_model(model, path) -> None:
    atomic_write_bytes(path, encode_model(model))


def load_model(path):
    with open(path, "rb") as fh:
        return decode_model(fh.read())
