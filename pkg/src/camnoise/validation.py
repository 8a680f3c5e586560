"""Input checks shared by the estimator wrappers."""

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length

from .stackio import CalibrationPairs, ImageStack


def check_signal(X, name="X"):
    """Flatten a 1-D signal vector or an ``(n, 1)`` column into float64."""
    X = np.asarray(X)
    if X.ndim == 2 and X.shape[1] != 1:
        raise ValueError(f"{name} must have a single feature (the clean signal), got shape {X.shape}")
    X = check_array(X.reshape(-1, 1), dtype=np.float64, ensure_all_finite=True, input_name=name)
    return X[:, 0]


def check_signal_observation(X, y):
    """Validate ``(signal, observation)`` inputs and return them as :class:`CalibrationPairs`."""
    if y is None:
        raise ValueError("noise models need the noisy observations as y")
    s = check_signal(X)
    x = check_array(np.asarray(y).reshape(-1, 1), dtype=np.float64, ensure_all_finite=True, input_name="y")[:, 0]
    check_consistent_length(s, x)
    return CalibrationPairs(s, x)


def check_stack(X) -> ImageStack:
    """Accept an :class:`ImageStack`, a 2-D frame, or a ``(frames, height, width)`` array."""
    if isinstance(X, ImageStack):
        return X
    X = np.asarray(X)
    if X.ndim not in (2, 3):
        raise ValueError(f"expected a frame or a (frames, height, width) stack, got shape {X.shape}")
    return ImageStack(X)


def check_fraction(value, name, low=0.0, high=1.0, closed_low=False, closed_high=True):
    ok_low = value >= low if closed_low else value > low
    ok_high = value <= high if closed_high else value < high
    if not (ok_low and ok_high):
        lb = "[" if closed_low else "("
        rb = "]" if closed_high else ")"
        raise ValueError(f"{name} must lie in {lb}{low}, {high}{rb}, got {value}")
    return value
