"""Input-validation helpers, in the spirit of sklearn's check_array."""

from __future__ import annotations

import numpy as np


def check_image(image: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate a single H x W x 3 float image with values in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {image.shape}")
    if not np.issubdtype(image.dtype, np.floating):
        raise ValueError(f"{name} must be a float array, got dtype {image.dtype}")
    if not np.isfinite(image).all():
        raise ValueError(f"{name} contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return image


def check_image_stack(images: np.ndarray, name: str = "images") -> np.ndarray:
    """Validate an N x H x W x 3 float image stack with values in [0, 1]."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[3] != 3:
        raise ValueError(f"{name} must have shape (N, H, W, 3), got {images.shape}")
    if images.shape[0] < 1:
        raise ValueError(f"{name} must contain at least one image")
    if not np.issubdtype(images.dtype, np.floating):
        raise ValueError(f"{name} must be a float array, got dtype {images.dtype}")
    if not np.isfinite(images).all():
        raise ValueError(f"{name} contains non-finite values")
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return images


def check_features(X: np.ndarray, name: str = "X") -> np.ndarray:
    """Validate a 2-D finite float feature matrix with at least one column."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {X.shape}")
    if X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty in both dimensions, got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_labels(y: np.ndarray, n_samples: int, name: str = "y") -> np.ndarray:
    """Validate an integer label vector aligned with ``n_samples``."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {y.shape}")
    if y.shape[0] != n_samples:
        raise ValueError(f"{name} has {y.shape[0]} entries, expected {n_samples}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"{name} must be integer class ids, got dtype {y.dtype}")
    if y.size and y.min() < 0:
        raise ValueError(f"{name} contains negative class ids")
    return y.astype(np.int64)


def check_fraction(value: float, name: str, *, inclusive_low: bool = False) -> float:
    """Validate a scalar fraction in (0, 1] (or [0, 1] with inclusive_low)."""
    value = float(value)
    low_ok = value >= 0.0 if inclusive_low else value > 0.0
    if not (low_ok and value <= 1.0):
        bracket = "[0, 1]" if inclusive_low else "(0, 1]"
        raise ValueError(f"{name} must be in {bracket}, got {value}")
    return value


def check_probability_rows(rows: np.ndarray, name: str = "rows", tol: float = 1e-6) -> np.ndarray:
    """Validate that every row is a probability vector summing to 1 +- tol."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {rows.shape}")
    if (rows < 0).any() or (rows > 1).any():
        raise ValueError(f"{name} entries must lie in [0, 1]")
    sums = rows.sum(axis=1)
    if np.abs(sums - 1.0).max() > tol:
        raise ValueError(f"{name} rows must sum to 1 within {tol}")
    return rows
