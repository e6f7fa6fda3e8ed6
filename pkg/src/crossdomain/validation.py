"""Input checks shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array

from .errors import DimensionError, NonFiniteError


def check_features(X, n_features=None, dtype=np.float64, min_samples=1):
    """2-D finite float array, optionally with a fixed column count."""
    X = np.asarray(X)
    if X.ndim == 2 and X.size and not np.isfinite(X.astype(np.float64, copy=False)).all():
        raise NonFiniteError("input contains NaN or Inf")
    X = check_array(X, dtype=dtype, ensure_min_samples=min_samples)
    if n_features is not None and X.shape[1] != n_features:
        raise DimensionError(f"expected {n_features} features, got array of shape {X.shape}")
    return X


def check_paired(X, y, name_x="X", name_y="y"):
    if len(X) != len(y):
        raise DimensionError(f"{name_x} has {len(X)} rows but {name_y} has {len(y)}")
