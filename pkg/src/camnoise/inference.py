"""Posterior-mean (MMSE) pixel estimates from a noise model and prior signal samples.

For an observed value ``x`` and candidate clean signals ``s_1..s_N`` drawn from a
prior, the estimate is ``sum_k s_k p(x|s_k) / sum_k p(x|s_k)``. Here the prior
samples come from each pixel's blind-spot neighbourhood, a weak stand-in for a
learned prior that is enough to run the estimator end to end.
"""

import numpy as np

from .bootstrap import blindspot_kernel


def mmse_estimate(model, x, samples):
    """Noise-model-weighted average of prior samples.

    ``samples`` has shape ``np.shape(x) + (N,)``. Weights are computed in log space
    with the per-pixel maximum subtracted. If every weight of a pixel is
    unusable (non-finite log-density), the sample nearest to ``x`` is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 0:
        samples = samples[None]
    if samples.shape[-1] == 0:
        raise ValueError("no prior samples")
    if samples.shape[:-1] != x.shape:
        raise ValueError(f"samples shape {samples.shape} does not match observation shape {x.shape}")

    xb = np.broadcast_to(x[..., None], samples.shape)
    log_w = np.asarray(model.log_pdf(xb, samples), dtype=np.float64)
    top = log_w.max(axis=-1, keepdims=True)
    ok = np.isfinite(top)
    w = np.exp(np.where(ok, log_w - np.where(ok, top, 0.0), -np.inf))
    total = w.sum(axis=-1)
    estimate = (w * samples).sum(axis=-1) / np.where(total > 0, total, 1.0)

    bad = ~(total > 0)
    if np.any(bad):
        nearest = np.take_along_axis(samples, np.abs(samples - xb).argmin(axis=-1)[..., None], axis=-1)[..., 0]
        estimate = np.where(bad, nearest, estimate)
    # a convex combination cannot leave the sample range; guard against rounding
    estimate = np.clip(estimate, samples.min(axis=-1), samples.max(axis=-1))
    return estimate if estimate.ndim else float(estimate)


def _window_offsets(radius):
    dy, dx = np.nonzero(blindspot_kernel(radius))
    return dy - radius, dx - radius


def patch_prior(image, radius: int = 2, count: int = 24, seed: int = 0) -> np.ndarray:
    """Draw ``count`` neighbour values per pixel from its blind-spot window.

    Without replacement while the (border-truncated) window has enough pixels,
    then with replacement. Returns an array of shape ``image.shape + (count,)``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 2:
        raise ValueError(f"expected a 2-D frame of at least 2x2 pixels, got shape {image.shape}")
    if radius < 1 or count < 1:
        raise ValueError("radius and count must be >= 1")
    H, W = image.shape
    dy, dx = _window_offsets(radius)
    yy = np.arange(H)[:, None, None] + dy
    xx = np.arange(W)[None, :, None] + dx
    valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
    n_valid = valid.sum(axis=-1, keepdims=True)

    rng = np.random.default_rng(seed)
    keys = np.where(valid, rng.random(valid.shape), np.inf)
    order = np.argsort(keys, axis=-1, kind="stable")
    slot = np.arange(count)
    fill = np.floor(rng.random((H, W, count)) * n_valid).astype(np.intp)
    pick = np.where(slot < n_valid, np.minimum(slot, order.shape[-1] - 1), fill)
    chosen = np.take_along_axis(order, pick, axis=-1)
    ys = np.clip(np.arange(H)[:, None, None] + dy[chosen], 0, H - 1)
    xs = np.clip(np.arange(W)[None, :, None] + dx[chosen], 0, W - 1)
    return image[ys, xs]


def denoise_image(image, model, radius: int = 2, count: int = 24, seed: int = 0):
    """Return ``(mmse_frame, prior_mean_frame)`` for one noisy frame."""
    image = np.asarray(image, dtype=np.float64)
    samples = patch_prior(image, radius, count, seed)
    return mmse_estimate(model, image, samples), samples.mean(axis=-1)
