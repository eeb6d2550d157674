"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np


def check_images(X, image_size: int = 32, channels: int = 3) -> np.ndarray:
    """Coerce X to a float64 (n, channels, image_size, image_size) array.

    Accepts the image layout directly or flattened (n, channels*size*size)
    rows, the layout sklearn pipelines usually carry.
    """
    X = np.asarray(X, dtype=np.float64)
    flat = channels * image_size * image_size
    if X.ndim == 2 and X.shape[1] == flat:
        X = X.reshape(X.shape[0], channels, image_size, image_size)
    if X.ndim == 3 and X.shape == (channels, image_size, image_size):
        X = X[None]
    if X.ndim != 4 or X.shape[1:] != (channels, image_size, image_size):
        raise ValueError(
            f"expected images shaped (n, {channels}, {image_size}, {image_size}) "
            f"or (n, {flat}), got {X.shape}"
        )
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    return np.ascontiguousarray(X)


def check_labels(y, n_samples: int | None = None, n_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"labels must be 1-d, got shape {y.shape}")
    if n_samples is not None and len(y) != n_samples:
        raise ValueError(f"got {len(y)} labels for {n_samples} samples")
    out = y.astype(np.int64)
    if not np.array_equal(out, np.asarray(y, dtype=np.float64)):
        raise ValueError("labels must be integers")
    if np.any(out < 0):
        raise ValueError("labels must be nonnegative")
    if n_classes is not None and np.any(out >= n_classes):
        raise ValueError(f"labels must be < {n_classes}")
    return out
