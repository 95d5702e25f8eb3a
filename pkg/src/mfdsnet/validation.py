"""Input validation for the estimator interface.

Image pairs are accepted either as a list of :class:`SamplePair` or as an
array of shape ``(n_samples, 2, H, W, 3)`` holding uint8 pixels or floats in
[0, 1].  Masks are arrays of shape ``(n_samples, H, W)`` with values in {0, 1}.
"""
import numpy as np

from .datakit import SamplePair


def check_pairs(X, divisor=8):
    """Return ``X`` as a uint8 array of shape (n, 2, H, W, 3)."""
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], SamplePair):
        X = np.stack([np.stack([s.image_a, s.image_b]) for s in X])
    X = np.asarray(X)
    if X.ndim != 5 or X.shape[1] != 2 or X.shape[-1] != 3:
        raise ValueError(f"expected image pairs of shape (n_samples, 2, H, W, 3), got {X.shape}")
    if X.shape[0] < 1:
        raise ValueError("at least one image pair is required")
    h, w = X.shape[2:4]
    if h % divisor or w % divisor:
        raise ValueError(f"image height and width must be divisible by {divisor}, got {h}x{w}")
    if X.dtype == np.uint8:
        return X
    if not np.issubdtype(X.dtype, np.floating) and not np.issubdtype(X.dtype, np.integer):
        raise TypeError(f"unsupported image dtype {X.dtype}")
    X = X.astype(np.float64)
    if not np.isfinite(X).all():
        raise ValueError("image pairs contain NaN or infinite values")
    if np.issubdtype(np.asarray(X).dtype, np.floating) and X.max(initial=0) <= 1.0:
        X = X * 255.0
    if X.min(initial=0) < 0 or X.max(initial=0) > 255:
        raise ValueError("pixel values must lie in [0, 1] (float) or [0, 255]")
    return np.round(X).astype(np.uint8)


def check_masks(y, n_samples=None, shape=None):
    if isinstance(y, (list, tuple)) and y and isinstance(y[0], SamplePair):
        y = np.stack([s.gt for s in y])
    y = np.asarray(y)
    if y.ndim == 4 and y.shape[1] == 1:
        y = y[:, 0]
    if y.ndim != 3:
        raise ValueError(f"expected masks of shape (n_samples, H, W), got {y.shape}")
    if n_samples is not None and y.shape[0] != n_samples:
        raise ValueError(f"got {y.shape[0]} masks for {n_samples} image pairs")
    if shape is not None and y.shape[1:] != tuple(shape):
        raise ValueError(f"mask size {y.shape[1:]} does not match image size {tuple(shape)}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("masks must be binary (values in {0, 1})")
    return y.astype(np.uint8)


def check_pairs_masks(X, y, divisor=8):
    X = check_pairs(X, divisor)
    return X, check_masks(y, X.shape[0], X.shape[2:4])


def as_samples(X, y=None, prefix="sample"):
    """Wrap validated arrays as SamplePairs (masks default to zeros)."""
    n, _, h, w, _ = X.shape
    if y is None:
        y = np.zeros((n, h, w), dtype=np.uint8)
    return [SamplePair(X[i, 0], X[i, 1], y[i], f"{prefix}-{i:05d}") for i in range(n)]
