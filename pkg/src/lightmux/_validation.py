import numpy as np

from .errors import ParameterError


def check_image(image, name="image", allow_negative=True):
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ParameterError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    if not allow_negative and np.any(arr < 0):
        raise ParameterError(f"{name} must be non-negative")
    return arr


def check_weights(w, n=None):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1:
        raise ParameterError(f"illumination state must be a vector, got shape {w.shape}")
    if n is not None and w.shape[0] != n:
        raise ParameterError(f"illumination state has length {w.shape[0]}, expected {n}")
    if np.any(w < 0) or np.any(w > 1) or not np.all(np.isfinite(w)):
        raise ParameterError("illumination weights must lie in [0, 1]")
    return w


def check_matrix(W, n=None):
    W = np.asarray(W, dtype=np.float64)
    if W.ndim == 1:
        W = W[:, None]
    if W.ndim != 2 or W.shape[1] < 1:
        raise ParameterError(f"illumination matrix must be N x M with M >= 1, got {W.shape}")
    if n is not None and W.shape[0] != n:
        raise ParameterError(f"illumination matrix has {W.shape[0]} rows, expected {n}")
    if np.any(W < 0) or np.any(W > 1) or not np.all(np.isfinite(W)):
        raise ParameterError("illumination matrix entries must lie in [0, 1]")
    return W


def check_positive(value, name):
    if not value > 0:
        raise ParameterError(f"{name} must be > 0, got {value}")
    return value
