"""Input checks shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array

HAND_DIM = 6


def check_hand_states(X, name="X"):
    """Return ``X`` as a float64 (n, 6) array with entries in [0, 1]."""
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] != HAND_DIM:
        raise ValueError(f"{name} must have {HAND_DIM} columns, got {X.shape[1]}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} entries must lie in [0, 1]")
    return X


def check_finite_scalar(z, name="z"):
    z = float(z)
    if not np.isfinite(z):
        raise ValueError(f"{name} must be finite, got {z}")
    return z
